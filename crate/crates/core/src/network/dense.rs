use serde::Serialize;

use super::{LayerWeights, Model, OpKind};
use crate::error::{Error, Result};
use crate::graph::{EventGraph, GridPosition};
use crate::layers::{concat_position, conv_forward_spline, max_pool, relu, Features, LevelGraph, PoolCache};

/// Output of one op. Convolutions also keep their pre-activation sums and
/// root terms `W x_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorState {
    pub out: Features,
    pub pre: Option<Features>,
    pub root: Option<Features>,
}

impl TensorState {
    fn plain(out: Features) -> Self {
        Self {
            out,
            pre: None,
            root: None,
        }
    }
}

/// Every intermediate of a forward pass: the graph of each level, the output
/// of each op and the cache of each pooling layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub levels: Vec<LevelGraph>,
    pub tensors: Vec<TensorState>,
    pub pools: Vec<PoolCache>,
}

/// Raw outputs of one head node.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadNodeOutput {
    pub node: u32,
    pub voxel: (u32, u32),
    pub position: GridPosition,
    pub reg: [f64; 4],
    pub cls: Vec<f64>,
    pub obj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadOutput {
    pub head: usize,
    pub grid: (u32, u32),
    pub nodes: Vec<HeadNodeOutput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutput {
    pub heads: Vec<HeadOutput>,
    pub state: NetworkState,
}

impl NetworkState {
    /// Sparse outputs of both heads, one entry per occupied output voxel.
    pub fn head_outputs(&self, model: &Model) -> Vec<HeadOutput> {
        model
            .arch
            .heads
            .iter()
            .enumerate()
            .map(|(h, ops)| {
                let level = &self.levels[ops.level];
                let pool = &self.pools[ops.level - 1];
                let nodes = (0..level.len())
                    .map(|i| {
                        let reg = self.tensors[ops.reg].out.row(i);
                        let key = pool.voxels[i].key;
                        HeadNodeOutput {
                            node: i as u32,
                            voxel: (key.0, key.1),
                            position: level.position(i),
                            reg: [reg[0], reg[1], reg[2], reg[3]],
                            cls: self.tensors[ops.cls].out.row(i).to_vec(),
                            obj: self.tensors[ops.obj].out.row(i)[0],
                        }
                    })
                    .collect();
                HeadOutput {
                    head: h,
                    grid: ops.grid,
                    nodes,
                }
            })
            .collect()
    }
}

/// From-scratch forward pass with look-up-table convolutions.
pub fn dense_forward(model: &Model, graph: &EventGraph) -> Result<DenseOutput> {
    let state = run(model, graph, false)?;
    Ok(DenseOutput {
        heads: state.head_outputs(model),
        state,
    })
}

/// Forward pass that evaluates every spline weight directly and applies batch
/// norm unfused; the reference for the finalized path.
pub fn dense_forward_spline(model: &Model, graph: &EventGraph) -> Result<DenseOutput> {
    let state = run(model, graph, true)?;
    Ok(DenseOutput {
        heads: state.head_outputs(model),
        state,
    })
}

pub(crate) fn input_features(graph: &EventGraph) -> Features {
    let mut f = Features::new(1);
    for n in graph.nodes() {
        f.push_row(&[n.feature]);
    }
    f
}

fn run(model: &Model, graph: &EventGraph, spline: bool) -> Result<NetworkState> {
    if graph.geometry() != model.config.geometry {
        return Err(Error::InvalidConfig("graph geometry differs from the model's".into()));
    }
    if graph.radius() != model.config.radius || graph.max_neighbors() != model.config.max_neighbors {
        return Err(Error::InvalidConfig("graph radius or degree cap differs from the model's".into()));
    }
    let mut levels = vec![LevelGraph::from_event_graph(graph)];
    let mut tensors: Vec<TensorState> = Vec::with_capacity(model.arch.ops.len());
    let mut pools = Vec::new();
    for op in &model.arch.ops {
        let state = match op.kind {
            OpKind::Input => TensorState::plain(input_features(graph)),
            OpKind::ConcatPos { src } => TensorState::plain(concat_position(&tensors[src].out, &levels[op.level])),
            OpKind::Conv { src, layer, relu: act } => {
                let g = &levels[op.level];
                let x = &tensors[src].out;
                let (pre, root) = if spline {
                    let path = &model.arch.layers[layer].path;
                    let Some(LayerWeights::Conv { kernel, bn }) = model.weights.get(path) else {
                        return Err(Error::MissingTensor(path.clone()));
                    };
                    (conv_forward_spline(kernel, bn, model.scales[op.level], g, x), None)
                } else {
                    let conv = model.conv(layer);
                    let mut pre = Features::zeros(g.len(), conv.c_out());
                    let mut root = Features::zeros(g.len(), conv.c_out());
                    for i in 0..g.len() {
                        conv.node_sum(g, x, i, root.row_mut(i), pre.row_mut(i))?;
                    }
                    (pre, Some(root))
                };
                let out = if act { pre.map(relu) } else { pre.clone() };
                TensorState {
                    out,
                    pre: Some(pre),
                    root,
                }
            }
            OpKind::Linear { src, layer } => {
                let x = &tensors[src].out;
                if spline {
                    let path = &model.arch.layers[layer].path;
                    let Some(LayerWeights::Linear { root, bn }) = model.weights.get(path) else {
                        return Err(Error::MissingTensor(path.clone()));
                    };
                    let mut out = Features::zeros(x.len(), root.rows());
                    for i in 0..x.len() {
                        root.matvec_into(x.row(i), out.row_mut(i));
                        bn.apply(out.row_mut(i));
                    }
                    TensorState::plain(out)
                } else {
                    TensorState::plain(model.linear(layer).forward(x))
                }
            }
            OpKind::AddRelu { a, b } => {
                let (xa, xb) = (&tensors[a].out, &tensors[b].out);
                let mut out = Features::zeros(xa.len(), op.channels);
                for i in 0..xa.len() {
                    add_relu(xa.row(i), xb.row(i), out.row_mut(i));
                }
                TensorState::plain(out)
            }
            OpKind::Pool { src, pool } => {
                let (g, f, cache) = max_pool(model.arch.pools[pool], &levels[op.level - 1], &tensors[src].out)?;
                levels.push(g);
                pools.push(cache);
                TensorState::plain(f)
            }
        };
        tensors.push(state);
    }
    Ok(NetworkState { levels, tensors, pools })
}

pub(crate) fn add_relu(a: &[f64], b: &[f64], out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = relu(x + y);
    }
}
