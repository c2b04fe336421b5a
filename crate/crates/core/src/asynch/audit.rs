use serde::Serialize;

use super::ActivationCache;
use crate::error::Result;
use crate::graph::EventGraph;
use crate::layers::Features;
use crate::network::{dense_forward, HeadOutput, Model};

/// Relative tolerance of the cache against a dense pass.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// One cached value that disagrees with a fresh dense pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Discrepancy {
    /// Op name, or `level<i>` for graph structure.
    pub op: String,
    pub node: Option<u32>,
    pub what: String,
}

/// `max |a - b| <= tol * max(max |a|, max |b|)`, plus a tiny absolute slack
/// for rows that are zero up to rounding.
pub fn rows_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff <= tol * norm(a).max(norm(b)) + 1e-12
}

/// Differences between two sets of head outputs, one line per mismatch.
pub fn compare_heads(a: &[HeadOutput], b: &[HeadOutput], tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    if a.len() != b.len() {
        out.push(format!("head count {} vs {}", a.len(), b.len()));
        return out;
    }
    for (ha, hb) in a.iter().zip(b) {
        if ha.nodes.len() != hb.nodes.len() {
            out.push(format!("head {}: {} vs {} nodes", ha.head, ha.nodes.len(), hb.nodes.len()));
            continue;
        }
        for (na, nb) in ha.nodes.iter().zip(&hb.nodes) {
            let same = na.voxel == nb.voxel
                && na.position == nb.position
                && rows_close(&na.reg, &nb.reg, tol)
                && rows_close(&na.cls, &nb.cls, tol)
                && rows_close(&[na.obj], &[nb.obj], tol);
            if !same {
                out.push(format!("head {} node {}: {:?} vs {:?}", ha.head, na.node, na, nb));
            }
        }
    }
    out
}

fn features_differ(a: &Features, b: &Features, i: usize, tol: f64) -> bool {
    !rows_close(a.row(i), b.row(i), tol)
}

/// Recomputes a dense pass on `graph` and lists every cached value that
/// differs from it beyond `tol`. Argmax indices count as different only when
/// the two candidates' values differ beyond `tol`.
pub fn audit_cache(model: &Model, cache: &ActivationCache, graph: &EventGraph, tol: f64) -> Result<Vec<Discrepancy>> {
    let dense = dense_forward(model, graph)?.state;
    let cached = &cache.state;
    let mut out = Vec::new();
    let mut report = |op: &str, node: Option<usize>, what: String| {
        out.push(Discrepancy {
            op: op.to_string(),
            node: node.map(|n| n as u32),
            what,
        })
    };

    for (l, (c, d)) in cached.levels.iter().zip(&dense.levels).enumerate() {
        let name = format!("level{l}");
        if c.len() != d.len() {
            report(&name, None, format!("{} nodes, expected {}", c.len(), d.len()));
            continue;
        }
        for i in 0..c.len() {
            if c.position(i) != d.position(i) {
                report(&name, Some(i), format!("position {:?}, expected {:?}", c.position(i), d.position(i)));
            }
        }
        if c.edges() != d.edges() {
            report(&name, None, "edge list differs".into());
        }
    }

    for (o, op) in model.arch.ops.iter().enumerate() {
        let (c, d) = (&cached.tensors[o], &dense.tensors[o]);
        if c.out.len() != d.out.len() {
            report(&op.name, None, format!("{} rows, expected {}", c.out.len(), d.out.len()));
            continue;
        }
        for i in 0..c.out.len() {
            let mut bad = features_differ(&c.out, &d.out, i, tol);
            if let (Some(cp), Some(dp)) = (&c.pre, &d.pre) {
                bad |= features_differ(cp, dp, i, tol);
            }
            if let (Some(cr), Some(dr)) = (&c.root, &d.root) {
                bad |= features_differ(cr, dr, i, tol);
            }
            if bad {
                report(&op.name, Some(i), "activation differs".into());
            }
        }
    }

    let pool_ops = model.arch.ops.iter().enumerate().filter_map(|(o, op)| match op.kind {
        crate::network::OpKind::Pool { src, pool } => Some((o, src, pool)),
        _ => None,
    });
    for (o, src, p) in pool_ops {
        let name = &model.arch.ops[o].name;
        let (c, d) = (&cached.pools[p], &dense.pools[p]);
        if c.voxel_of != d.voxel_of || c.voxels != d.voxels {
            report(name, None, "voxel membership or position sums differ".into());
            continue;
        }
        let x = &dense.tensors[src].out;
        for v in 0..c.voxels.len() {
            for (ch, (&a, &b)) in c.argmax_of(v).iter().zip(d.argmax_of(v)).enumerate() {
                if a != b && !rows_close(&[x.row(a as usize)[ch]], &[x.row(b as usize)[ch]], tol) {
                    report(name, Some(v), format!("argmax of channel {ch} is {a}, expected {b}"));
                }
            }
        }
    }
    Ok(out)
}
