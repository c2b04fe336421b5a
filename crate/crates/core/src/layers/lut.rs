//! Look-up-table spline convolution.
//!
//! Node positions live on the integer pixel grid at every layer, so the
//! source-minus-destination offset of an edge takes finitely many values.
//! The interpolated, batch-norm-folded weight matrix for each offset is
//! computed once and each message becomes a table lookup plus one
//! matrix-vector product.

use std::sync::OnceLock;

use super::level::LevelGraph;
use super::matrix::{Features, Matrix};
use super::spline::{spline_weight, BatchNormParams, EdgeAttribute, LayerScale, SplineKernel};
use crate::error::{Error, Result};
use crate::events::SensorGeometry;
use crate::graph::GridPosition;

const EMPTY: u32 = u32::MAX;

/// Deployed convolution layer.
///
/// Every covered offset owns a table slot. Slots are filled on first use, so
/// the deep pooled levels, whose offset ranges are wide, only pay for the
/// offsets that occur.
#[derive(Debug)]
pub struct LutConvLayer {
    name: String,
    c_in: usize,
    c_out: usize,
    scale: LayerScale,
    kernel: SplineKernel,
    row_scale: Vec<f64>,
    min_dx: i64,
    min_dy: i64,
    span_x: usize,
    span_y: usize,
    slots: Vec<u32>,
    offsets: Vec<(i64, i64)>,
    table: Vec<OnceLock<Matrix>>,
    root: Matrix,
    bias: Vec<f64>,
}

impl Clone for LutConvLayer {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            c_in: self.c_in,
            c_out: self.c_out,
            scale: self.scale,
            kernel: self.kernel.clone(),
            row_scale: self.row_scale.clone(),
            min_dx: self.min_dx,
            min_dy: self.min_dy,
            span_x: self.span_x,
            span_y: self.span_y,
            slots: self.slots.clone(),
            offsets: self.offsets.clone(),
            table: self.table.iter().map(|_| OnceLock::new()).collect(),
            root: self.root.clone(),
            bias: self.bias.clone(),
        }
    }
}

/// Folds `bn` into `kernel` and builds the table over `offsets`.
pub fn build_lut(
    name: impl Into<String>,
    kernel: &SplineKernel,
    bn: &BatchNormParams,
    offsets: &[(i64, i64)],
    scale: LayerScale,
) -> Result<LutConvLayer> {
    let name = name.into();
    if offsets.is_empty() {
        return Err(Error::EmptyOffsets);
    }
    if bn.channels() != kernel.c_out {
        return Err(Error::ChannelMismatch {
            layer: name,
            expected: kernel.c_out,
            actual: bn.channels(),
        });
    }
    let row_scale = bn.scale();
    let min_dx = offsets.iter().map(|o| o.0).min().unwrap();
    let max_dx = offsets.iter().map(|o| o.0).max().unwrap();
    let min_dy = offsets.iter().map(|o| o.1).min().unwrap();
    let max_dy = offsets.iter().map(|o| o.1).max().unwrap();
    let span_x = (max_dx - min_dx + 1) as usize;
    let span_y = (max_dy - min_dy + 1) as usize;
    let mut slots = vec![EMPTY; span_x * span_y];
    let mut kept = Vec::with_capacity(offsets.len());
    for &(dx, dy) in offsets {
        let slot = (dy - min_dy) as usize * span_x + (dx - min_dx) as usize;
        if slots[slot] == EMPTY {
            slots[slot] = kept.len() as u32;
            kept.push((dx, dy));
        }
    }
    let mut root = kernel.root.clone();
    root.scale_rows(&row_scale);
    Ok(LutConvLayer {
        name,
        c_in: kernel.c_in,
        c_out: kernel.c_out,
        scale,
        kernel: kernel.clone(),
        row_scale,
        min_dx,
        min_dy,
        span_x,
        span_y,
        slots,
        table: kept.iter().map(|_| OnceLock::new()).collect(),
        offsets: kept,
        root,
        bias: bn.shift(),
    })
}

impl LutConvLayer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn scale(&self) -> LayerScale {
        self.scale
    }

    pub fn root(&self) -> &Matrix {
        &self.root
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Covered offsets, in insertion order.
    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }

    /// Number of covered offsets.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Number of table entries materialized so far.
    pub fn filled(&self) -> usize {
        self.table.iter().filter(|c| c.get().is_some()).count()
    }

    fn slot(&self, dx: i64, dy: i64) -> Option<usize> {
        let ix = dx - self.min_dx;
        let iy = dy - self.min_dy;
        if ix < 0 || iy < 0 || ix as usize >= self.span_x || iy as usize >= self.span_y {
            return None;
        }
        match self.slots[iy as usize * self.span_x + ix as usize] {
            EMPTY => None,
            s => Some(s as usize),
        }
    }

    /// Fused matrix of a covered offset, computed without touching the table.
    pub fn compute_entry(&self, dx: i64, dy: i64) -> Option<Matrix> {
        self.slot(dx, dy)?;
        let e = EdgeAttribute::from_offset(dx as f64, dy as f64, self.scale);
        let mut m = spline_weight(&self.kernel, e);
        m.scale_rows(&self.row_scale);
        Some(m)
    }

    pub fn lookup(&self, dx: i64, dy: i64) -> Option<&Matrix> {
        let s = self.slot(dx, dy)?;
        Some(self.table[s].get_or_init(|| self.compute_entry(dx, dy).expect("covered offset")))
    }

    /// Weight matrix for the edge `src -> dst`.
    pub fn edge_matrix(&self, src: GridPosition, dst: GridPosition) -> Result<&Matrix> {
        let (dx, dy) = (src.x - dst.x, src.y - dst.y);
        self.lookup(dx, dy).ok_or_else(|| Error::UncoveredOffset {
            layer: self.name.clone(),
            dx,
            dy,
        })
    }

    /// Message from `src` to `dst` carrying `x`, accumulated into `out`.
    pub fn message_acc(&self, src: GridPosition, dst: GridPosition, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.edge_matrix(src, dst)?.matvec_acc(x, out);
        Ok(())
    }

    /// Full sum of node `i`: writes the root term `W x_i` to `root` and
    /// `bias + W x_i + sum_j W_ij x_j` to `sum`.
    pub fn node_sum(&self, graph: &LevelGraph, x: &Features, i: usize, root: &mut [f64], sum: &mut [f64]) -> Result<()> {
        self.root.matvec_into(x.row(i), root);
        self.node_sum_with_root(graph, x, i, root, sum)
    }

    /// Like [`node_sum`](Self::node_sum) with a known root term; sources are
    /// added in adjacency order.
    pub fn node_sum_with_root(&self, graph: &LevelGraph, x: &Features, i: usize, root: &[f64], sum: &mut [f64]) -> Result<()> {
        for ((s, b), r) in sum.iter_mut().zip(&self.bias).zip(root.iter()) {
            *s = b + r;
        }
        let dst = graph.position(i);
        for &j in graph.incoming(i) {
            let j = j as usize;
            self.message_acc(graph.position(j), dst, x.row(j), sum)?;
        }
        Ok(())
    }
}

/// Dense convolution over a whole level: returns the pre-activation sums.
pub fn conv_forward(layer: &LutConvLayer, graph: &LevelGraph, features: &Features) -> Result<Features> {
    if features.channels() != layer.c_in {
        return Err(Error::ChannelMismatch {
            layer: layer.name.clone(),
            expected: layer.c_in,
            actual: features.channels(),
        });
    }
    let n = graph.len();
    let mut out = Features::zeros(n, layer.c_out);
    let mut root = vec![0.0; layer.c_out];
    for i in 0..n {
        layer.node_sum(graph, features, i, &mut root, out.row_mut(i))?;
    }
    Ok(out)
}

/// Reference convolution that evaluates the spline for every edge and
/// applies batch norm afterwards, without any table or folding.
pub fn conv_forward_spline(
    kernel: &SplineKernel,
    bn: &BatchNormParams,
    scale: LayerScale,
    graph: &LevelGraph,
    features: &Features,
) -> Features {
    let n = graph.len();
    let mut out = Features::zeros(n, kernel.c_out);
    for i in 0..n {
        let y = out.row_mut(i);
        kernel.root.matvec_into(features.row(i), y);
        let dst = graph.position(i);
        for &j in graph.incoming(i) {
            let src = graph.position(j as usize);
            let e = EdgeAttribute::from_offset((src.x - dst.x) as f64, (src.y - dst.y) as f64, scale);
            spline_weight(kernel, e).matvec_acc(features.row(j as usize), y);
        }
        bn.apply(y);
    }
    out
}

/// Largest `d` with `d / extent < radius`.
pub fn radius_reach(extent: u32, radius: f64) -> i64 {
    let mut d = 0i64;
    while ((d + 1) as f64 / f64::from(extent)) < radius {
        d += 1;
    }
    d
}

/// Scale of the input layer: `ceil(R * W)`, `ceil(R * H)` pixels.
pub fn input_scale(geometry: SensorGeometry, radius: f64) -> LayerScale {
    LayerScale {
        rx: (radius * f64::from(geometry.width)).ceil().max(1.0),
        ry: (radius * f64::from(geometry.height)).ceil().max(1.0),
    }
}

/// Scale after pooling to a `gx x gy` grid: twice the voxel pitch.
pub fn pooled_scale(geometry: SensorGeometry, gx: u32, gy: u32) -> LayerScale {
    LayerScale {
        rx: 2.0 * f64::from(geometry.width) / f64::from(gx),
        ry: 2.0 * f64::from(geometry.height) / f64::from(gy),
    }
}

/// Per-axis reach of each pooled level along an axis of `extent` pixels.
///
/// `cells[k]` is the voxel count of pooling layer `k` and `input_reach` the
/// largest offset of an input edge. A pooled node sits on an integer pixel
/// inside its voxel, and two pooled nodes are linked only if some pair of
/// their members was linked one level up. The result bounds the offsets each
/// pooled level can produce.
pub fn pooled_reaches(extent: u32, cells: &[u32], input_reach: i64) -> Vec<i64> {
    let n = extent as usize;
    // Voxel index of every pixel at the previous level; the input level
    // is the pixel grid itself.
    let mut prev: Vec<i64> = (0..n as i64).collect();
    let mut prev_link = input_reach;
    let mut out = Vec::with_capacity(cells.len());
    for &g in cells {
        let cur: Vec<i64> = (0..n as i64).map(|p| p * i64::from(g) / i64::from(extent)).collect();
        let mut link = 0;
        for p in 0..n {
            for q in p..n {
                if (prev[q] - prev[p]).abs() <= prev_link {
                    link = link.max((cur[q] - cur[p]).abs());
                }
            }
        }
        let mut reach = 0;
        for p in 0..n {
            for q in p..n {
                if (cur[q] - cur[p]).abs() <= link {
                    reach = reach.max((q - p) as i64);
                }
            }
        }
        out.push(reach);
        prev = cur;
        prev_link = link;
    }
    out
}

/// All integer offsets in `[-rx, rx] x [-ry, ry]`, x fastest.
pub fn rect_offsets(rx: i64, ry: i64) -> Vec<(i64, i64)> {
    (-ry..=ry)
        .flat_map(|dy| (-rx..=rx).map(move |dx| (dx, dy)))
        .collect()
}
