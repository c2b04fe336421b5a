//! Per-event incremental inference.
//!
//! The cache is the full [`NetworkState`] of a dense pass. Inserting an event
//! appends a node to the input graph and walks the op list once, carrying two
//! kinds of change records: a [`LevelDelta`] per graph level (new nodes,
//! moved nodes, new edges) and a [`FeatureDelta`] per op (old output of every
//! node whose output changed). Convolutions update only the sums those
//! records reach; pooling layers stop records that cannot alter their output.
//! After every insertion the cache equals a dense pass on the grown graph up
//! to summation order.

mod audit;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::error::{Error, Result};
use crate::events::Event;
use crate::graph::{DirectedEdge, EventGraph, GridPosition};
use crate::layers::block::concat_row;
use crate::layers::pool::{feature_prunable, voxel_max};
use crate::layers::{relu, Features, LevelGraph, LinearLayer, LutConvLayer, PoolCache};
use crate::metrics::cost::{c_linear, c_message_add, c_recomp, c_root, c_update, CONCAT_FLOPS, POOL_ADD_FLOPS, POOL_MOVE_FLOPS, POOL_POSITION_FLOPS};
use crate::network::{dense_forward, HeadOutput, Model, NetworkState, OpKind, TensorState};

pub use audit::{audit_cache, compare_heads, rows_close, Discrepancy, DEFAULT_TOLERANCE};
pub use report::{HeadDelta, InsertionReport, LayerReport, NodeAction, OpTag, PoolReport};

/// Structural change of one graph level during one insertion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelDelta {
    /// Appended nodes, ascending.
    pub new_nodes: Vec<u32>,
    /// Existing nodes whose `(x, y)` changed, with their old position.
    pub moved: BTreeMap<u32, GridPosition>,
    /// Existing nodes whose time coordinate alone changed, with their old
    /// position. Features do not depend on time, so these only feed the
    /// position sums of the next pooling layer.
    pub retimed: BTreeMap<u32, GridPosition>,
    /// Appended edges, in creation order.
    pub new_edges: Vec<DirectedEdge>,
}

impl LevelDelta {
    pub fn is_quiet(&self) -> bool {
        self.new_nodes.is_empty() && self.moved.is_empty() && self.new_edges.is_empty()
    }
}

/// Old output of every existing node whose output changed at one op.
pub type FeatureDelta = BTreeMap<u32, Vec<f64>>;

/// Cached activations of every op, pooling caches included.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub state: NetworkState,
}

impl ActivationCache {
    pub fn head_outputs(&self, model: &Model) -> Vec<HeadOutput> {
        self.state.head_outputs(model)
    }

    /// Overwrites one cached pre-activation value; for fault-injection tests.
    pub fn corrupt_pre(&mut self, op: usize, node: usize, channel: usize, value: f64) -> bool {
        match self.state.tensors.get_mut(op).and_then(|t| t.pre.as_mut()) {
            Some(pre) if node < pre.len() && channel < pre.channels() => {
                pre.row_mut(node)[channel] = value;
                true
            }
            _ => false,
        }
    }
}

/// Runs one dense pass and keeps every intermediate.
pub fn init_cache(model: &Model, graph: &EventGraph) -> Result<ActivationCache> {
    Ok(ActivationCache {
        state: dense_forward(model, graph)?.state,
    })
}

/// Inserts `event` into `graph` and brings `cache` up to date.
pub fn insert_and_update(
    model: &Model,
    cache: &mut ActivationCache,
    graph: &mut EventGraph,
    event: &Event,
) -> Result<InsertionReport> {
    let st = &mut cache.state;
    if st.levels[0].len() != graph.len() {
        return Err(Error::InvalidConfig("cache does not belong to this graph".into()));
    }
    let (idx, edges) = graph.insert_event(event)?;
    let mut deltas = vec![LevelDelta::default(); model.level_count()];
    {
        let l0 = &mut st.levels[0];
        l0.push_node(GridPosition::of_event(event));
        for e in &edges {
            l0.add_edge(e.src, e.dst);
        }
        deltas[0].new_nodes.push(idx as u32);
        deltas[0].new_edges = edges;
    }
    let ops = &model.arch.ops;
    let mut fdeltas: Vec<FeatureDelta> = Vec::with_capacity(ops.len());
    let mut layers = Vec::with_capacity(ops.len());
    for (o, op) in ops.iter().enumerate() {
        let (before, rest) = st.tensors.split_at_mut(o);
        let out = &mut rest[0];
        let mut rep;
        let fd = match op.kind {
            OpKind::Input => {
                rep = LayerReport::new(&op.name, OpTag::Input, 0, 0, 1);
                rep.new_nodes = 1;
                out.out.push_row(&[f64::from(event.p)]);
                FeatureDelta::new()
            }
            OpKind::ConcatPos { src } => {
                rep = LayerReport::new(&op.name, OpTag::Concat, op.level, ops[src].channels, op.channels);
                concat_update(&st.levels[op.level], &deltas[op.level], &before[src].out, &fdeltas[src], out, &mut rep)
            }
            OpKind::Conv { src, layer, relu } => {
                let conv = model.conv(layer);
                rep = LayerReport::new(&op.name, OpTag::Conv, op.level, conv.c_in(), conv.c_out());
                conv_update(conv, relu, &st.levels[op.level], &deltas[op.level], &before[src].out, &fdeltas[src], out, &mut rep)?
            }
            OpKind::Linear { src, layer } => {
                let lin = model.linear(layer);
                rep = LayerReport::new(&op.name, OpTag::Linear, op.level, lin.c_in(), lin.c_out());
                linear_update(lin, &deltas[op.level], &before[src].out, &fdeltas[src], out, &mut rep)
            }
            OpKind::AddRelu { a, b } => {
                rep = LayerReport::new(&op.name, OpTag::Add, op.level, op.channels, op.channels);
                add_update(&deltas[op.level], &before[a].out, &before[b].out, &fdeltas[a], &fdeltas[b], out, &mut rep)
            }
            OpKind::Pool { src, pool } => {
                rep = LayerReport::new(&op.name, OpTag::Pool, op.level, op.channels, op.channels);
                let (lo, hi) = st.levels.split_at_mut(op.level);
                let (next, fd) = pool_update(
                    &lo[op.level - 1],
                    &mut hi[0],
                    &mut st.pools[pool],
                    &deltas[op.level - 1],
                    &before[src].out,
                    &fdeltas[src],
                    out,
                    &mut rep,
                );
                deltas[op.level] = next;
                fd
            }
        };
        rep.feature_changed = fd.len() as u64;
        if !matches!(op.kind, OpKind::Pool { .. } | OpKind::Input) {
            rep.new_nodes = deltas[op.level].new_nodes.len() as u64;
            rep.position_changed = deltas[op.level].moved.len() as u64;
            rep.new_edges = deltas[op.level].new_edges.len() as u64;
        }
        fdeltas.push(fd);
        layers.push(rep);
    }

    let pools: Vec<&LayerReport> = layers.iter().filter(|l| l.op == OpTag::Pool).collect();
    let pruned_at = pools.iter().find(|l| !l.any_change()).map(|l| l.name.clone());
    let full_tree_pruned = pools.first().map(|l| !l.any_change()).unwrap_or(false);
    let heads = model
        .arch
        .heads
        .iter()
        .enumerate()
        .map(|(h, ops)| {
            let changed: BTreeSet<u32> = [ops.reg, ops.cls, ops.obj]
                .iter()
                .flat_map(|&o| fdeltas[o].keys().copied())
                .collect();
            HeadDelta {
                head: h,
                new_nodes: deltas[ops.level].new_nodes.len() as u64,
                changed_nodes: changed.len() as u64,
            }
        })
        .collect();
    Ok(InsertionReport {
        node: idx as u32,
        t: event.t,
        in_degree: st.levels[0].incoming(idx).len() as u64,
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
        pruned_at,
        full_tree_pruned,
        heads,
    })
}


fn concat_update(
    g: &LevelGraph,
    delta: &LevelDelta,
    x: &Features,
    fd_in: &FeatureDelta,
    st: &mut TensorState,
    rep: &mut LayerReport,
) -> FeatureDelta {
    let mut fd = FeatureDelta::new();
    let mut row = Vec::with_capacity(st.out.channels());
    let affected: BTreeSet<u32> = fd_in.keys().chain(delta.moved.keys()).copied().collect();
    for &i in &affected {
        row.clear();
        concat_row(x.row(i as usize), g, i as usize, &mut row);
        let cur = st.out.row_mut(i as usize);
        if !bits_equal(cur, &row) {
            fd.insert(i, cur.to_vec());
            cur.copy_from_slice(&row);
        }
        rep.flops += CONCAT_FLOPS;
        rep.trace.push(NodeAction::Concat);
    }
    for &n in &delta.new_nodes {
        row.clear();
        concat_row(x.row(n as usize), g, n as usize, &mut row);
        st.out.push_row(&row);
        rep.flops += CONCAT_FLOPS;
        rep.trace.push(NodeAction::Concat);
    }
    fd
}

fn linear_update(
    lin: &LinearLayer,
    delta: &LevelDelta,
    x: &Features,
    fd_in: &FeatureDelta,
    st: &mut TensorState,
    rep: &mut LayerReport,
) -> FeatureDelta {
    let mut fd = FeatureDelta::new();
    let mut row = vec![0.0; lin.c_out()];
    let cost = c_linear(lin.c_in() as u64, lin.c_out() as u64);
    for &i in fd_in.keys() {
        lin.apply_into(x.row(i as usize), &mut row);
        let cur = st.out.row_mut(i as usize);
        if !bits_equal(cur, &row) {
            fd.insert(i, cur.to_vec());
            cur.copy_from_slice(&row);
        }
        rep.flops += cost;
        rep.trace.push(NodeAction::Linear);
    }
    for &n in &delta.new_nodes {
        lin.apply_into(x.row(n as usize), &mut row);
        st.out.push_row(&row);
        rep.flops += cost;
        rep.trace.push(NodeAction::Linear);
    }
    fd
}

#[allow(clippy::too_many_arguments)]
fn add_update(
    delta: &LevelDelta,
    a: &Features,
    b: &Features,
    fd_a: &FeatureDelta,
    fd_b: &FeatureDelta,
    st: &mut TensorState,
    rep: &mut LayerReport,
) -> FeatureDelta {
    let mut fd = FeatureDelta::new();
    let c = st.out.channels();
    let mut row = vec![0.0; c];
    let affected: BTreeSet<u32> = fd_a.keys().chain(fd_b.keys()).copied().collect();
    for &i in &affected {
        crate::network::add_relu_row(a.row(i as usize), b.row(i as usize), &mut row);
        let cur = st.out.row_mut(i as usize);
        if !bits_equal(cur, &row) {
            fd.insert(i, cur.to_vec());
            cur.copy_from_slice(&row);
        }
        rep.flops += c as u64;
        rep.trace.push(NodeAction::Add);
    }
    for &n in &delta.new_nodes {
        crate::network::add_relu_row(a.row(n as usize), b.row(n as usize), &mut row);
        st.out.push_row(&row);
        rep.flops += c as u64;
        rep.trace.push(NodeAction::Add);
    }
    fd
}

/// Convolution update rules.
///
/// Nodes that are new or moved get their whole sum recomputed. Every other
/// node's sum is patched: a changed source replaces its old message, a new
/// edge adds one, and a changed feature replaces the root term.
#[allow(clippy::too_many_arguments)]
fn conv_update(
    conv: &LutConvLayer,
    act: bool,
    g: &LevelGraph,
    delta: &LevelDelta,
    x: &Features,
    fd_in: &FeatureDelta,
    st: &mut TensorState,
    rep: &mut LayerReport,
) -> Result<FeatureDelta> {
    let (c_in, c_out) = (conv.c_in() as u64, conv.c_out() as u64);
    let pre = st.pre.as_mut().expect("conv op keeps sums");
    let root = st.root.as_mut().expect("conv op keeps root terms");
    let mut old_out: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut touch = |i: u32, out: &Features| {
        old_out.entry(i).or_insert_with(|| out.row(i as usize).to_vec());
    };

    for _ in &delta.new_nodes {
        pre.push_zeros();
        root.push_zeros();
        st.out.push_zeros();
    }
    let new_set: BTreeSet<u32> = delta.new_nodes.iter().copied().collect();
    let full: BTreeSet<u32> = new_set.iter().chain(delta.moved.keys()).copied().collect();

    for &i in &full {
        let iu = i as usize;
        let n_src = g.incoming(iu).len() as u64;
        if new_set.contains(&i) {
            conv.node_sum(g, x, iu, root.row_mut(iu), pre.row_mut(iu))?;
            rep.flops += c_root(c_in, c_out) + c_recomp(n_src, c_in, c_out);
            rep.new_messages += n_src;
        } else {
            touch(i, &st.out);
            if fd_in.contains_key(&i) {
                conv.node_sum(g, x, iu, root.row_mut(iu), pre.row_mut(iu))?;
                rep.flops += c_root(c_in, c_out);
            } else {
                let r = root.row(iu).to_vec();
                conv.node_sum_with_root(g, x, iu, &r, pre.row_mut(iu))?;
            }
            rep.flops += c_recomp(n_src, c_in, c_out);
            rep.recomputed_messages += n_src;
        }
    }

    let new_edges: HashSet<(u32, u32)> = delta.new_edges.iter().map(|e| (e.src, e.dst)).collect();
    let sources: BTreeSet<u32> = fd_in
        .keys()
        .chain(delta.moved.keys())
        .copied()
        .filter(|k| !new_set.contains(k))
        .collect();
    let mut diff = vec![0.0; conv.c_in()];
    let mut tmp = vec![0.0; conv.c_out()];
    for &k in &sources {
        let ku = k as usize;
        let new_pos = g.position(ku);
        let old_pos = delta.moved.get(&k).copied();
        let x_new = x.row(ku);
        let x_old = fd_in.get(&k).map(Vec::as_slice).unwrap_or(x_new);
        let mut n_dst = 0u64;
        for &i in g.outgoing(ku) {
            if full.contains(&i) || new_edges.contains(&(k, i)) {
                continue;
            }
            touch(i, &st.out);
            let dst = g.position(i as usize);
            let y = pre.row_mut(i as usize);
            match old_pos {
                None => {
                    for ((d, a), b) in diff.iter_mut().zip(x_new).zip(x_old) {
                        *d = a - b;
                    }
                    conv.message_acc(new_pos, dst, &diff, y)?;
                }
                Some(old) => {
                    conv.edge_matrix(old, dst)?.matvec_into(x_old, &mut tmp);
                    conv.message_acc(new_pos, dst, x_new, y)?;
                    for (v, t) in y.iter_mut().zip(&tmp) {
                        *v -= t;
                    }
                }
            }
            n_dst += 1;
        }
        rep.replaced_messages += n_dst;
        rep.flops += c_update(n_dst, c_in, c_out);
        if full.contains(&k) {
            rep.trace.push(NodeAction::Moved {
                n_src: g.incoming(ku).len() as u64,
                n_dst,
                feature_changed: fd_in.contains_key(&k),
            });
        } else {
            touch(k, &st.out);
            conv.root().matvec_into(x_new, &mut tmp);
            let (y, r) = (pre.row_mut(ku), root.row_mut(ku));
            for ((v, r_old), r_new) in y.iter_mut().zip(r.iter_mut()).zip(&tmp) {
                *v += r_new - *r_old;
                *r_old = *r_new;
            }
            rep.flops += c_root(c_in, c_out);
            rep.trace.push(NodeAction::FeatureOnly { n_dst });
        }
    }
    for &n in &delta.new_nodes {
        rep.trace.push(NodeAction::NewNode {
            n_src: g.incoming(n as usize).len() as u64,
        });
    }

    for e in &delta.new_edges {
        if full.contains(&e.dst) {
            continue;
        }
        touch(e.dst, &st.out);
        let y = pre.row_mut(e.dst as usize);
        conv.message_acc(g.position(e.src as usize), g.position(e.dst as usize), x.row(e.src as usize), y)?;
        rep.flops += c_message_add(c_in, c_out);
        rep.new_messages += 1;
        rep.trace.push(NodeAction::NewEdge);
    }

    let activate = |v: f64| if act { relu(v) } else { v };
    let mut fd = FeatureDelta::new();
    for (i, old) in old_out {
        let iu = i as usize;
        for (o, p) in st.out.row_mut(iu).iter_mut().zip(pre.row(iu)) {
            *o = activate(*p);
        }
        if !bits_equal(st.out.row(iu), &old) {
            fd.insert(i, old);
        }
    }
    for &n in &delta.new_nodes {
        let nu = n as usize;
        for (o, p) in st.out.row_mut(nu).iter_mut().zip(pre.row(nu)) {
            *o = activate(*p);
        }
    }
    Ok(fd)
}

/// Pooling update with pruning.
///
/// A touched voxel keeps its output when no changed member holds one of its
/// maxima, no changed member's new value would take one over, and its floored
/// mean `(x, y)` is unchanged. Otherwise its maxima are recomputed and any
/// change is passed on.
#[allow(clippy::too_many_arguments)]
fn pool_update(
    g_in: &LevelGraph,
    g_out: &mut LevelGraph,
    cache: &mut PoolCache,
    delta: &LevelDelta,
    x: &Features,
    fd_in: &FeatureDelta,
    st: &mut TensorState,
    rep: &mut LayerReport,
) -> (LevelDelta, FeatureDelta) {
    let geometry = g_in.geometry();
    let c = cache.spec.c_out;
    let mut next = LevelDelta::default();
    let mut pool_rep = PoolReport::default();
    let mut structural: BTreeSet<u32> = BTreeSet::new();
    let mut fresh: BTreeSet<u32> = BTreeSet::new();
    let mut candidates: BTreeMap<u32, Vec<u32>> = BTreeMap::new();

    for &n in &delta.new_nodes {
        let (v, is_new) = cache.add_member(n, g_in.position(n as usize), geometry);
        if is_new {
            let placeholder = g_out.push_node(GridPosition::new(0, 0, 0));
            debug_assert_eq!(placeholder, v);
            st.out.push_zeros();
            fresh.insert(v);
            next.new_nodes.push(v);
        }
        structural.insert(v);
        candidates.entry(v).or_default().push(n);
        rep.flops += POOL_ADD_FLOPS;
        rep.trace.push(NodeAction::PoolAdd);
    }
    for (&n, old) in delta.moved.iter().chain(delta.retimed.iter()) {
        let v = cache.voxel_of[n as usize];
        let new = g_in.position(n as usize);
        debug_assert_eq!(cache.spec.voxel_key(new, geometry), cache.voxels[v as usize].key);
        let sum = &mut cache.voxels[v as usize].pos_sum;
        sum[0] += new.x - old.x;
        sum[1] += new.y - old.y;
        sum[2] += new.t - old.t;
        structural.insert(v);
        rep.flops += POOL_MOVE_FLOPS;
        rep.trace.push(NodeAction::PoolMove);
    }
    for &n in fd_in.keys() {
        candidates.entry(cache.voxel_of[n as usize]).or_default().push(n);
    }

    let mut xy_moved: BTreeSet<u32> = BTreeSet::new();
    for &v in &structural {
        let p = cache.voxels[v as usize].position();
        rep.flops += POOL_POSITION_FLOPS;
        rep.trace.push(NodeAction::PoolPosition);
        if fresh.contains(&v) {
            g_out.set_position(v as usize, p);
            continue;
        }
        let old = g_out.position(v as usize);
        if p != old {
            g_out.set_position(v as usize, p);
            if p.same_xy(&old) {
                next.retimed.insert(v, old);
            } else {
                next.moved.insert(v, old);
                xy_moved.insert(v);
            }
        }
    }

    let mut fd = FeatureDelta::new();
    let mut max = vec![0.0; c];
    let mut arg = vec![0u32; c];
    let touched: BTreeSet<u32> = structural.iter().chain(candidates.keys()).copied().collect();
    for &v in &touched {
        let vu = v as usize;
        let members = &cache.voxels[vu].members;
        if fresh.contains(&v) {
            let (lo, hi) = (vu * c, (vu + 1) * c);
            voxel_max(x, members, st.out.row_mut(vu), &mut cache.argmax[lo..hi]);
            pool_rep.created += 1;
            continue;
        }
        pool_rep.touched += 1;
        let keeps_feature = match candidates.get(&v) {
            None => true,
            Some(changed) => feature_prunable(
                st.out.row(vu),
                cache.argmax_of(vu),
                changed.iter().map(|&n| (n, x.row(n as usize))),
            ),
        };
        if keeps_feature && !xy_moved.contains(&v) {
            pool_rep.pruned += 1;
        }
        if !keeps_feature {
            pool_rep.recomputed += 1;
            voxel_max(x, members, &mut max, &mut arg);
            cache.argmax_of_mut(vu).copy_from_slice(&arg);
            let cur = st.out.row_mut(vu);
            if !bits_equal(cur, &max) {
                fd.insert(v, cur.to_vec());
                cur.copy_from_slice(&max);
            }
        }
        pool_rep.max_argmax_holders = pool_rep.max_argmax_holders.max(cache.argmax_holders(vu) as u64);
    }

    for e in &delta.new_edges {
        let (a, b) = (cache.voxel_of[e.src as usize], cache.voxel_of[e.dst as usize]);
        if a != b && g_out.add_edge(a, b) {
            next.new_edges.push(DirectedEdge { src: a, dst: b });
        }
    }

    rep.new_nodes = next.new_nodes.len() as u64;
    rep.position_changed = next.moved.len() as u64;
    rep.new_edges = next.new_edges.len() as u64;
    rep.pool = Some(pool_rep);
    (next, fd)
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Incremental inference session over one growing graph.
pub struct AsyncEngine<'m> {
    model: &'m Model,
    graph: EventGraph,
    cache: ActivationCache,
}

impl<'m> AsyncEngine<'m> {
    /// Starts from `graph` with one dense pass.
    pub fn new(model: &'m Model, graph: EventGraph) -> Result<Self> {
        let cache = init_cache(model, &graph)?;
        Ok(Self { model, graph, cache })
    }

    pub fn insert(&mut self, event: &Event) -> Result<InsertionReport> {
        insert_and_update(self.model, &mut self.cache, &mut self.graph, event)
    }

    pub fn graph(&self) -> &EventGraph {
        &self.graph
    }

    pub fn cache(&self) -> &ActivationCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut ActivationCache {
        &mut self.cache
    }

    pub fn head_outputs(&self) -> Vec<HeadOutput> {
        self.cache.head_outputs(self.model)
    }

    pub fn audit(&self, tol: f64) -> Result<Vec<Discrepancy>> {
        audit_cache(self.model, &self.cache, &self.graph, tol)
    }
}
