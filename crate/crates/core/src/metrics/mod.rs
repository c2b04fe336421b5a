//! FLOP cost models and run statistics.

pub mod cost;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::asynch::{InsertionReport, OpTag};

pub use cost::{action_cost, dense_cost, flops_per_message, insertion_cost, ConvMode, CostModel};

/// Accumulated counters of one op over a stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub op: OpTag,
    pub insertions: u64,
    pub total_flops: u64,
    /// Sum over insertions of moved-node counts.
    pub position_changes: u64,
    /// Sum over insertions of changed-feature counts.
    pub feature_changes: u64,
    /// Insertions with at least one moved node.
    pub any_position: u64,
    /// Insertions with at least one changed feature.
    pub any_feature: u64,
    /// Insertions where anything left the op.
    pub any_change: u64,
    /// Touched and pruned voxels, for pooling layers.
    pub voxels_touched: u64,
    pub voxels_pruned: u64,
}

impl LayerStats {
    fn new(name: &str, op: OpTag) -> Self {
        Self {
            name: name.to_string(),
            op,
            insertions: 0,
            total_flops: 0,
            position_changes: 0,
            feature_changes: 0,
            any_position: 0,
            any_feature: 0,
            any_change: 0,
            voxels_touched: 0,
            voxels_pruned: 0,
        }
    }

    fn ratio(a: u64, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn mean_flops(&self) -> f64 {
        Self::ratio(self.total_flops, self.insertions)
    }

    pub fn p_position_change(&self) -> f64 {
        Self::ratio(self.any_position, self.insertions)
    }

    pub fn p_feature_change(&self) -> f64 {
        Self::ratio(self.any_feature, self.insertions)
    }

    pub fn p_any_change(&self) -> f64 {
        Self::ratio(self.any_change, self.insertions)
    }

    /// Fraction of touched voxels pruned; zero for non-pooling ops.
    pub fn prune_rate(&self) -> f64 {
        Self::ratio(self.voxels_pruned, self.voxels_touched)
    }

    fn merge(&mut self, o: &LayerStats) {
        self.insertions += o.insertions;
        self.total_flops += o.total_flops;
        self.position_changes += o.position_changes;
        self.feature_changes += o.feature_changes;
        self.any_position += o.any_position;
        self.any_feature += o.any_feature;
        self.any_change += o.any_change;
        self.voxels_touched += o.voxels_touched;
        self.voxels_pruned += o.voxels_pruned;
    }
}

/// Statistics of a stream of insertions. Shards merge associatively.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub insertions: u64,
    pub total_flops: u64,
    /// Insertions stopped by the first pooling layer.
    pub full_tree_prunes: u64,
    /// Largest number of distinct argmax holders seen in a touched voxel of
    /// the first pooling layer.
    pub max_argmax_holders: u64,
    pub layers: Vec<LayerStats>,
}

impl RunStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, report: &InsertionReport) {
        self.insertions += 1;
        self.total_flops += report.total_flops;
        if report.full_tree_pruned {
            self.full_tree_prunes += 1;
        }
        if let Some(p) = report.pool_reports().next().and_then(|l| l.pool.as_ref()) {
            self.max_argmax_holders = self.max_argmax_holders.max(p.max_argmax_holders);
        }
        for l in &report.layers {
            let mut s = LayerStats::new(&l.name, l.op);
            s.insertions = 1;
            s.total_flops = l.flops;
            s.position_changes = l.position_changed;
            s.feature_changes = l.feature_changed;
            s.any_position = u64::from(l.position_changed > 0);
            s.any_feature = u64::from(l.feature_changed > 0);
            s.any_change = u64::from(l.any_change());
            if let Some(p) = &l.pool {
                s.voxels_touched = p.touched;
                s.voxels_pruned = p.pruned;
            }
            self.layer_mut(&l.name, l.op).merge(&s);
        }
    }

    fn layer_mut(&mut self, name: &str, op: OpTag) -> &mut LayerStats {
        match self.layers.iter().position(|l| l.name == name) {
            Some(i) => &mut self.layers[i],
            None => {
                self.layers.push(LayerStats::new(name, op));
                self.layers.last_mut().unwrap()
            }
        }
    }

    pub fn merge(&mut self, other: &RunStats) {
        self.insertions += other.insertions;
        self.total_flops += other.total_flops;
        self.full_tree_prunes += other.full_tree_prunes;
        self.max_argmax_holders = self.max_argmax_holders.max(other.max_argmax_holders);
        for l in &other.layers {
            self.layer_mut(&l.name, l.op).merge(l);
        }
    }

    /// Pass-through fraction: insertions whose update survives the first
    /// pooling layer.
    pub fn phi(&self) -> f64 {
        if self.insertions == 0 {
            return 0.0;
        }
        1.0 - self.full_tree_prune_rate()
    }

    /// Fraction of insertions stopped at the first pooling layer.
    pub fn full_tree_prune_rate(&self) -> f64 {
        LayerStats::ratio(self.full_tree_prunes, self.insertions)
    }

    /// Fraction of touched voxels pruned, over all pooling layers.
    pub fn voxel_prune_rate(&self) -> f64 {
        let pools = self.layers.iter().filter(|l| l.op == OpTag::Pool);
        let (p, t) = pools.fold((0, 0), |(p, t), l| (p + l.voxels_pruned, t + l.voxels_touched));
        LayerStats::ratio(p, t)
    }

    pub fn mean_flops(&self) -> f64 {
        LayerStats::ratio(self.total_flops, self.insertions)
    }

    pub fn pool_layers(&self) -> impl Iterator<Item = &LayerStats> {
        self.layers.iter().filter(|l| l.op == OpTag::Pool)
    }

    /// One row per op: `layer,mean_flops,p_pos_change,p_feat_change,prune_rate`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mean_flops,p_pos_change,p_feat_change,prune_rate\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                l.name,
                sig9(l.mean_flops()),
                sig9(l.p_position_change()),
                sig9(l.p_feature_change()),
                sig9(l.prune_rate())
            );
        }
        s
    }
}

pub fn aggregate_stats<'a>(reports: impl IntoIterator<Item = &'a InsertionReport>) -> RunStats {
    let mut stats = RunStats::new();
    for r in reports {
        stats.add(r);
    }
    stats
}

/// `x` rounded to nine significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn sig9(x: f64) -> String {
    round_sig9(x).to_string()
}
