//! Voxel max pooling with floor-rounded centroid positions.

use std::collections::HashMap;

use super::level::LevelGraph;
use super::matrix::Features;
use crate::error::{Error, Result};
use crate::events::SensorGeometry;
use crate::graph::GridPosition;

/// Voxel grid of one pooling layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub gx: u32,
    pub gy: u32,
    pub gt: u32,
    pub c_out: usize,
}

impl PoolSpec {
    /// Only `gt = 1` is supported: the time axis is never partitioned.
    pub fn new(gx: u32, gy: u32, gt: u32, c_out: usize) -> Result<Self> {
        if gx == 0 || gy == 0 || c_out == 0 {
            return Err(Error::InvalidConfig("pool grid and channels must be positive".into()));
        }
        if gt != 1 {
            return Err(Error::InvalidConfig(format!("g_t = {gt} is not supported, only 1")));
        }
        Ok(Self { gx, gy, gt, c_out })
    }

    /// Grid `i` of the published schedule: `(56 / 2^i, 40 / 2^i, 1)`.
    pub fn schedule(i: u32, c_out: usize) -> Result<Self> {
        Self::new(56 >> i, 40 >> i, 1, c_out)
    }

    pub fn cells(&self) -> u32 {
        self.gx * self.gy * self.gt
    }

    /// Voxel coordinates `(vx, vy, vt)` of a pixel position.
    pub fn voxel_key(&self, p: GridPosition, geometry: SensorGeometry) -> (u32, u32, u32) {
        let vx = (p.x * i64::from(self.gx) / i64::from(geometry.width)).clamp(0, i64::from(self.gx) - 1);
        let vy = (p.y * i64::from(self.gy) / i64::from(geometry.height)).clamp(0, i64::from(self.gy) - 1);
        (vx as u32, vy as u32, 0)
    }
}

/// One occupied voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub key: (u32, u32, u32),
    /// Member node indices in ascending order.
    pub members: Vec<u32>,
    /// Sum of member `(x, y, t)` in pixels and microseconds.
    pub pos_sum: [i64; 3],
    pub count: i64,
}

impl Voxel {
    /// Floor of the member mean, on the integer grid.
    pub fn position(&self) -> GridPosition {
        GridPosition::new(
            self.pos_sum[0].div_euclid(self.count),
            self.pos_sum[1].div_euclid(self.count),
            self.pos_sum[2].div_euclid(self.count),
        )
    }
}

/// Per-layer pooling state: voxel of each input node, voxel contents and
/// per-channel argmax. Output node `v` is voxel `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolCache {
    pub spec: PoolSpec,
    pub voxel_of: Vec<u32>,
    pub voxels: Vec<Voxel>,
    pub registry: HashMap<(u32, u32, u32), u32>,
    /// `argmax[v * c + ch]` is the member holding the maximum of channel `ch`.
    pub argmax: Vec<u32>,
}

impl PoolCache {
    pub fn new(spec: PoolSpec) -> Self {
        Self {
            spec,
            voxel_of: Vec::new(),
            voxels: Vec::new(),
            registry: HashMap::new(),
            argmax: Vec::new(),
        }
    }

    pub fn argmax_of(&self, v: usize) -> &[u32] {
        let c = self.spec.c_out;
        &self.argmax[v * c..(v + 1) * c]
    }

    pub fn argmax_of_mut(&mut self, v: usize) -> &mut [u32] {
        let c = self.spec.c_out;
        &mut self.argmax[v * c..(v + 1) * c]
    }

    /// Registers input node `n` at `p`; returns its voxel and whether the
    /// voxel is new.
    pub fn add_member(&mut self, n: u32, p: GridPosition, geometry: SensorGeometry) -> (u32, bool) {
        let key = self.spec.voxel_key(p, geometry);
        let next = self.voxels.len() as u32;
        let v = *self.registry.entry(key).or_insert(next);
        let fresh = v == next;
        if fresh {
            self.voxels.push(Voxel {
                key,
                members: Vec::new(),
                pos_sum: [0; 3],
                count: 0,
            });
            self.argmax.extend(std::iter::repeat_n(n, self.spec.c_out));
        }
        let voxel = &mut self.voxels[v as usize];
        voxel.members.push(n);
        voxel.pos_sum[0] += p.x;
        voxel.pos_sum[1] += p.y;
        voxel.pos_sum[2] += p.t;
        voxel.count += 1;
        debug_assert_eq!(self.voxel_of.len(), n as usize);
        self.voxel_of.push(v);
        (v, fresh)
    }

    /// Number of distinct members holding at least one channel maximum.
    pub fn argmax_holders(&self, v: usize) -> usize {
        let mut held: Vec<u32> = self.argmax_of(v).to_vec();
        held.sort_unstable();
        held.dedup();
        held.len()
    }
}

/// Componentwise max over `members` (ascending), writing the maxima to `out`
/// and the lowest-index holder of each to `arg`.
pub fn voxel_max(features: &Features, members: &[u32], out: &mut [f64], arg: &mut [u32]) {
    let first = members[0];
    out.copy_from_slice(features.row(first as usize));
    arg.iter_mut().for_each(|a| *a = first);
    for &m in &members[1..] {
        for (c, &x) in features.row(m as usize).iter().enumerate() {
            if x > out[c] {
                out[c] = x;
                arg[c] = m;
            }
        }
    }
}

/// Whether member `n` with value `x` on a channel would displace the
/// current holder `holder` of maximum `max`.
pub fn beats(x: f64, n: u32, max: f64, holder: u32) -> bool {
    x > max || (x == max && n < holder)
}

/// Feature half of the pruning test: no changed member holds a maximum
/// (condition i) and none of their new values would take one over
/// (condition ii). When this holds, the voxel's maxima and argmax are
/// unchanged.
pub fn feature_prunable<'a>(
    max: &[f64],
    argmax: &[u32],
    changed: impl IntoIterator<Item = (u32, &'a [f64])>,
) -> bool {
    for (n, x) in changed {
        for c in 0..max.len() {
            if argmax[c] == n || beats(x[c], n, max[c], argmax[c]) {
                return false;
            }
        }
    }
    true
}

/// Dense max pooling of a whole level: returns the pooled graph, features and
/// cache. Output nodes are numbered by first member, output edges follow the
/// input edge order.
pub fn max_pool(spec: PoolSpec, graph: &LevelGraph, features: &Features) -> Result<(LevelGraph, Features, PoolCache)> {
    if features.channels() != spec.c_out {
        return Err(Error::ChannelMismatch {
            layer: "pool".into(),
            expected: spec.c_out,
            actual: features.channels(),
        });
    }
    let geometry = graph.geometry();
    let mut cache = PoolCache::new(spec);
    for (n, &p) in graph.positions().iter().enumerate() {
        cache.add_member(n as u32, p, geometry);
    }
    let mut pooled = LevelGraph::new(geometry);
    let mut out = Features::zeros(cache.voxels.len(), spec.c_out);
    for v in 0..cache.voxels.len() {
        pooled.push_node(cache.voxels[v].position());
        let c = spec.c_out;
        let arg = &mut cache.argmax[v * c..(v + 1) * c];
        voxel_max(features, &cache.voxels[v].members, out.row_mut(v), arg);
    }
    for e in graph.edges() {
        let (a, b) = (cache.voxel_of[e.src as usize], cache.voxel_of[e.dst as usize]);
        if a != b {
            pooled.add_edge(a, b);
        }
    }
    Ok((pooled, out, cache))
}
