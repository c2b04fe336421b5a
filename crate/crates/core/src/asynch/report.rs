use serde::{Deserialize, Serialize};

/// What kind of op a [`LayerReport`] describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpTag {
    Input,
    Concat,
    Conv,
    Linear,
    Add,
    Pool,
}

/// One unit of work in the cost trace of an op.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum NodeAction {
    /// Full sum of a new node with `n_src` sources.
    NewNode { n_src: u64 },
    /// Full recompute of a moved node and message replacement at its `n_dst`
    /// destinations; the root term is recomputed only if the feature changed.
    Moved { n_src: u64, n_dst: u64, feature_changed: bool },
    /// Root update and message replacement at `n_dst` destinations.
    FeatureOnly { n_dst: u64 },
    /// One message along a new edge into an existing node.
    NewEdge,
    /// One node through a root-only linear map.
    Linear,
    /// One node through residual addition.
    Add,
    /// One node through position concatenation.
    Concat,
    /// A new member added to a voxel's position sum.
    PoolAdd,
    /// A member's position replaced in a voxel's position sum.
    PoolMove,
    /// A voxel's mean position recomputed.
    PoolPosition,
}

/// Pooling-specific counters of one insertion.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolReport {
    /// Existing voxels with a changed member.
    pub touched: u64,
    /// Touched voxels where all three pruning conditions held.
    pub pruned: u64,
    /// Touched voxels whose maxima were recomputed.
    pub recomputed: u64,
    /// Voxels created by the insertion.
    pub created: u64,
    /// Largest number of distinct argmax holders among touched voxels.
    pub max_argmax_holders: u64,
}

/// Work done by one op during one insertion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub op: OpTag,
    pub level: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Nodes created at this op's level.
    pub new_nodes: u64,
    /// Existing nodes whose `(x, y)` moved.
    pub position_changed: u64,
    /// Existing nodes whose output feature changed.
    pub feature_changed: u64,
    /// Edges created at this op's level.
    pub new_edges: u64,
    pub flops: u64,
    /// Messages along edges not seen before.
    pub new_messages: u64,
    /// Messages recomputed for moved nodes.
    pub recomputed_messages: u64,
    /// Old messages replaced at destinations.
    pub replaced_messages: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolReport>,
    #[serde(skip)]
    pub trace: Vec<NodeAction>,
}

impl LayerReport {
    pub(crate) fn new(name: &str, op: OpTag, level: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            name: name.to_string(),
            op,
            level,
            c_in,
            c_out,
            new_nodes: 0,
            position_changed: 0,
            feature_changed: 0,
            new_edges: 0,
            flops: 0,
            new_messages: 0,
            recomputed_messages: 0,
            replaced_messages: 0,
            pool: None,
            trace: Vec::new(),
        }
    }

    /// Whether anything beyond silent time updates left this op.
    pub fn any_change(&self) -> bool {
        self.new_nodes > 0 || self.position_changed > 0 || self.feature_changed > 0 || self.new_edges > 0
    }
}

/// Change of one head's outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadDelta {
    pub head: usize,
    pub new_nodes: u64,
    pub changed_nodes: u64,
}

/// Everything measured during one asynchronous insertion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionReport {
    /// Index of the inserted event's node.
    pub node: u32,
    pub t: u64,
    /// In-degree of the new input node.
    pub in_degree: u64,
    pub layers: Vec<LayerReport>,
    pub total_flops: u64,
    /// First pooling layer whose output did not change, if any.
    pub pruned_at: Option<String>,
    /// The first pooling layer stopped the update.
    pub full_tree_pruned: bool,
    pub heads: Vec<HeadDelta>,
}

impl InsertionReport {
    pub fn pool_reports(&self) -> impl Iterator<Item = &LayerReport> {
        self.layers.iter().filter(|l| l.op == OpTag::Pool)
    }

    pub fn conv_reports(&self) -> impl Iterator<Item = &LayerReport> {
        self.layers.iter().filter(|l| l.op == OpTag::Conv)
    }
}
