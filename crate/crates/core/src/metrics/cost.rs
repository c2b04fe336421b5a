//! Closed-form FLOP counts. A multiply and an add count one each.

use serde::{Deserialize, Serialize};

use crate::asynch::{LayerReport, NodeAction};
use crate::network::{Model, NetworkState, OpKind};

/// How a message weight is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// Evaluate the B-spline basis for every message.
    Spline,
    /// Read the weight matrix from a table.
    Lut,
}

/// Per-layer inputs of the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub c_in: u64,
    pub c_out: u64,
    pub d: u32,
    pub m: u32,
    pub mode: ConvMode,
}

impl CostModel {
    pub fn per_message(&self) -> u64 {
        flops_per_message(self.mode, self.d, self.m, self.c_in, self.c_out)
    }
}

/// FLOPs of one message. Spline mode interpolates `(d+1)^m` control matrices
/// per message before the product; LUT mode only multiplies.
pub fn flops_per_message(mode: ConvMode, d: u32, m: u32, c_in: u64, c_out: u64) -> u64 {
    let product = (2 * c_in - 1) * c_out;
    match mode {
        ConvMode::Lut => product,
        ConvMode::Spline => (2 * u64::from(d + 1).pow(m) - 1) * c_in * c_out + product,
    }
}

/// Root term: matrix-vector product plus bias.
pub fn c_root(c_in: u64, c_out: u64) -> u64 {
    (2 * c_in + 1) * c_out
}

/// Sum of `n_src` messages.
pub fn c_recomp(n_src: u64, c_in: u64, c_out: u64) -> u64 {
    if n_src == 0 {
        0
    } else {
        (2 * c_in * n_src - 1) * c_out
    }
}

/// Replacing one message at each of `n_dst` destinations.
pub fn c_update(n_dst: u64, c_in: u64, c_out: u64) -> u64 {
    n_dst * (2 * c_in + 1) * c_out
}

/// One message added to an existing sum.
pub fn c_message_add(c_in: u64, c_out: u64) -> u64 {
    2 * c_in * c_out
}

/// A root-only linear map with bias.
pub fn c_linear(c_in: u64, c_out: u64) -> u64 {
    2 * c_in * c_out
}

pub const CONCAT_FLOPS: u64 = 2;
pub const POOL_ADD_FLOPS: u64 = 3;
pub const POOL_MOVE_FLOPS: u64 = 6;
pub const POOL_POSITION_FLOPS: u64 = 3;

/// FLOPs of one traced action in a layer with the given channel counts.
pub fn action_cost(action: NodeAction, c_in: u64, c_out: u64) -> u64 {
    match action {
        NodeAction::NewNode { n_src } => c_root(c_in, c_out) + c_recomp(n_src, c_in, c_out),
        NodeAction::Moved {
            n_src,
            n_dst,
            feature_changed,
        } => {
            let root = if feature_changed { c_root(c_in, c_out) } else { 0 };
            c_recomp(n_src, c_in, c_out) + c_update(n_dst, c_in, c_out) + root
        }
        NodeAction::FeatureOnly { n_dst } => c_root(c_in, c_out) + c_update(n_dst, c_in, c_out),
        NodeAction::NewEdge => c_message_add(c_in, c_out),
        NodeAction::Linear => c_linear(c_in, c_out),
        NodeAction::Add => c_out,
        NodeAction::Concat => CONCAT_FLOPS,
        NodeAction::PoolAdd => POOL_ADD_FLOPS,
        NodeAction::PoolMove => POOL_MOVE_FLOPS,
        NodeAction::PoolPosition => POOL_POSITION_FLOPS,
    }
}

/// Per-layer FLOPs of an insertion, recomputed from its trace.
pub fn insertion_cost(layers: &[LayerReport]) -> Vec<u64> {
    layers
        .iter()
        .map(|l| {
            l.trace
                .iter()
                .map(|&a| action_cost(a, l.c_in as u64, l.c_out as u64))
                .sum()
        })
        .collect()
}

/// FLOPs of a from-scratch pass that produced `state`, under the same
/// conventions as the asynchronous engine.
pub fn dense_cost(model: &Model, state: &NetworkState) -> u64 {
    let mut total = 0;
    for (o, op) in model.arch.ops.iter().enumerate() {
        let n = state.tensors[o].out.len() as u64;
        let c_out = op.channels as u64;
        total += match op.kind {
            OpKind::Input => 0,
            OpKind::ConcatPos { .. } => n * CONCAT_FLOPS,
            OpKind::Conv { src, .. } => {
                let c_in = model.arch.ops[src].channels as u64;
                let g = &state.levels[op.level];
                (0..g.len())
                    .map(|i| c_root(c_in, c_out) + c_recomp(g.incoming(i).len() as u64, c_in, c_out))
                    .sum()
            }
            OpKind::Linear { src, .. } => n * c_linear(model.arch.ops[src].channels as u64, c_out),
            OpKind::AddRelu { .. } => n * c_out,
            OpKind::Pool { .. } => {
                let members = state.levels[op.level - 1].len() as u64;
                members * POOL_ADD_FLOPS + n * POOL_POSITION_FLOPS
            }
        };
    }
    total
}
