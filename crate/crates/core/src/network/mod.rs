//! The detection network: configuration, architecture, weights and the dense
//! forward pass.

mod dense;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::SensorGeometry;
use crate::graph::{DEFAULT_MAX_NEIGHBORS, DEFAULT_RADIUS};
use crate::layers::lut::{input_scale, pooled_reaches, pooled_scale, radius_reach, rect_offsets};
use crate::layers::{build_lut, LayerScale, LinearLayer, LutConvLayer, PoolSpec};

pub use dense::{dense_forward, dense_forward_spline, DenseOutput, HeadNodeOutput, HeadOutput, NetworkState, TensorState};
pub(crate) use dense::add_relu as add_relu_row;
pub use weights::{load_weights, save_weights, LayerWeights, ModelWeights};

/// Number of pooling layers.
pub const POOL_COUNT: usize = 4;

/// Published model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Nano,
    Small,
    Medium,
    Large,
}

impl ModelSize {
    pub const ALL: [ModelSize; 4] = [ModelSize::Nano, ModelSize::Small, ModelSize::Medium, ModelSize::Large];

    /// Channel count of blocks 3 to 5 and the heads.
    pub fn c_wide(self) -> usize {
        match self {
            ModelSize::Nano => 32,
            ModelSize::Small => 64,
            ModelSize::Medium => 92,
            ModelSize::Large => 128,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelSize::Nano => "nano",
            ModelSize::Small => "small",
            ModelSize::Medium => "medium",
            ModelSize::Large => "large",
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n" | "nano" => Ok(ModelSize::Nano),
            "s" | "small" => Ok(ModelSize::Small),
            "m" | "medium" => Ok(ModelSize::Medium),
            "l" | "large" => Ok(ModelSize::Large),
            _ => Err(Error::InvalidConfig(format!("unknown model size `{s}`"))),
        }
    }
}

/// Hyperparameters of one network instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub size: ModelSize,
    pub c_wide: usize,
    pub c_early: usize,
    pub n_cls: usize,
    pub geometry: SensorGeometry,
    pub radius: f64,
    pub max_neighbors: usize,
    /// Convolutions in the first block, which runs on the raw event graph.
    pub input_depth: usize,
    /// Convolutions in every later residual block.
    pub block_depth: usize,
}

impl ModelConfig {
    pub fn new(size: ModelSize, geometry: SensorGeometry) -> Self {
        Self {
            size,
            c_wide: size.c_wide(),
            c_early: 16,
            n_cls: 2,
            geometry,
            radius: DEFAULT_RADIUS,
            max_neighbors: DEFAULT_MAX_NEIGHBORS,
            input_depth: 2,
            block_depth: 2,
        }
    }

    pub fn with_c_early(mut self, c: usize) -> Self {
        self.c_early = c;
        self
    }

    pub fn with_input_depth(mut self, depth: usize) -> Self {
        self.input_depth = depth;
        self
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn with_n_cls(mut self, n: usize) -> Self {
        self.n_cls = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_wide == 0 || self.c_early == 0 || self.n_cls == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if self.input_depth == 0 || self.block_depth == 0 {
            return Err(Error::InvalidConfig("blocks need at least one convolution".into()));
        }
        if self.radius.is_nan() || self.radius <= 0.0 || self.max_neighbors == 0 {
            return Err(Error::InvalidConfig("radius and max_neighbors must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of the features entering pooling layer `i`.
    pub fn pool_channels(&self, i: usize) -> usize {
        if i < 2 {
            self.c_early
        } else {
            self.c_wide
        }
    }

    pub fn pool_specs(&self) -> Result<Vec<PoolSpec>> {
        (0..POOL_COUNT)
            .map(|i| PoolSpec::schedule(i as u32, self.pool_channels(i)))
            .collect()
    }
}

/// Whether a layer uses neighbor messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Linear,
}

/// A weighted layer of the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub path: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub level: usize,
}

/// Node of the computation graph. Operands are indices of earlier ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// Polarity of each event.
    Input,
    ConcatPos { src: usize },
    Conv { src: usize, layer: usize, relu: bool },
    Linear { src: usize, layer: usize },
    AddRelu { a: usize, b: usize },
    /// Produces the next level's graph.
    Pool { src: usize, pool: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Op {
    pub name: String,
    pub kind: OpKind,
    /// Graph level the op's output lives on.
    pub level: usize,
    pub channels: usize,
}

/// Output ops of one detection head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadOps {
    pub level: usize,
    pub reg: usize,
    pub cls: usize,
    pub obj: usize,
    pub grid: (u32, u32),
}

/// Layer list and computation graph derived from a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub ops: Vec<Op>,
    pub layers: Vec<LayerSpec>,
    pub pools: Vec<PoolSpec>,
    pub heads: Vec<HeadOps>,
}

struct ArchBuilder {
    ops: Vec<Op>,
    layers: Vec<LayerSpec>,
}

impl ArchBuilder {
    fn op(&mut self, name: String, kind: OpKind, level: usize, channels: usize) -> usize {
        self.ops.push(Op {
            name,
            kind,
            level,
            channels,
        });
        self.ops.len() - 1
    }

    fn layer(&mut self, path: String, kind: LayerKind, c_in: usize, c_out: usize, level: usize) -> usize {
        self.layers.push(LayerSpec {
            path,
            kind,
            c_in,
            c_out,
            level,
        });
        self.layers.len() - 1
    }

    fn conv(&mut self, path: String, src: usize, c_out: usize, relu: bool) -> usize {
        let (level, c_in) = (self.ops[src].level, self.ops[src].channels);
        let layer = self.layer(path.clone(), LayerKind::Conv, c_in, c_out, level);
        self.op(path, OpKind::Conv { src, layer, relu }, level, c_out)
    }

    fn block(&mut self, name: &str, src: usize, c_out: usize, depth: usize) -> usize {
        let (level, c_in) = (self.ops[src].level, self.ops[src].channels);
        let mut h = self.op(format!("{name}.concat"), OpKind::ConcatPos { src }, level, c_in + 2);
        for k in 1..=depth {
            h = self.conv(format!("{name}.conv{k}"), h, c_out, k < depth);
        }
        let skip = if c_in == c_out {
            src
        } else {
            let path = format!("{name}.skip");
            let layer = self.layer(path.clone(), LayerKind::Linear, c_in, c_out, level);
            self.op(path, OpKind::Linear { src, layer }, level, c_out)
        };
        self.op(format!("{name}.out"), OpKind::AddRelu { a: h, b: skip }, level, c_out)
    }

    fn pool(&mut self, pool: usize, src: usize) -> usize {
        let (level, c) = (self.ops[src].level, self.ops[src].channels);
        self.op(format!("pool{}", pool + 1), OpKind::Pool { src, pool }, level + 1, c)
    }

    fn head(&mut self, name: &str, src: usize, c: usize, n_cls: usize, grid: (u32, u32)) -> HeadOps {
        let stem = self.conv(format!("{name}.stem"), src, c, true);
        let cls_conv = self.conv(format!("{name}.cls_conv"), stem, c, true);
        let cls = self.conv(format!("{name}.cls_pred"), cls_conv, n_cls, false);
        let reg_conv = self.conv(format!("{name}.reg_conv"), stem, c, true);
        let reg = self.conv(format!("{name}.reg_pred"), reg_conv, 4, false);
        let obj = self.conv(format!("{name}.obj_pred"), reg_conv, 1, false);
        HeadOps {
            level: self.ops[src].level,
            reg,
            cls,
            obj,
            grid,
        }
    }
}

impl Architecture {
    /// Input block, four `[pool, block]` stages, Head1 after block 4 on the
    /// 14 x 10 graph and Head2 after block 5 on the 7 x 5 graph.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let pools = config.pool_specs()?;
        let mut b = ArchBuilder {
            ops: Vec::new(),
            layers: Vec::new(),
        };
        let input = b.op("input".into(), OpKind::Input, 0, 1);
        let (ce, cw, d) = (config.c_early, config.c_wide, config.block_depth);
        let mut x = b.block("block1", input, ce, config.input_depth);
        x = b.pool(0, x);
        x = b.block("block2", x, ce, d);
        x = b.pool(1, x);
        x = b.block("block3", x, cw, d);
        x = b.pool(2, x);
        x = b.block("block4", x, cw, d);
        let g3 = (pools[2].gx, pools[2].gy);
        let head1 = b.head("head1", x, cw, config.n_cls, g3);
        x = b.pool(3, x);
        x = b.block("block5", x, cw, d);
        let g4 = (pools[3].gx, pools[3].gy);
        let head2 = b.head("head2", x, cw, config.n_cls, g4);
        Ok(Self {
            ops: b.ops,
            layers: b.layers,
            pools,
            heads: vec![head1, head2],
        })
    }

    /// Number of distinct convolution layers.
    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv).count()
    }

    /// Largest number of convolutions on any path from the input to a head
    /// output.
    pub fn conv_depth(&self) -> usize {
        let mut depth = vec![0usize; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            depth[i] = match op.kind {
                OpKind::Input => 0,
                OpKind::ConcatPos { src } | OpKind::Linear { src, .. } | OpKind::Pool { src, .. } => depth[src],
                OpKind::Conv { src, .. } => depth[src] + 1,
                OpKind::AddRelu { a, b } => depth[a].max(depth[b]),
            };
        }
        self.heads
            .iter()
            .flat_map(|h| [h.reg, h.cls, h.obj])
            .map(|o| depth[o])
            .max()
            .unwrap_or(0)
    }

    /// Output voxel capacity `g_x * g_y` of each head.
    pub fn head_capacities(&self) -> Vec<u32> {
        self.heads.iter().map(|h| h.grid.0 * h.grid.1).collect()
    }

    pub fn layer_index(&self, path: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.path == path)
    }
}

/// Finalized layer.
#[derive(Clone, Debug)]
pub enum DeployedLayer {
    Conv(LutConvLayer),
    Linear(LinearLayer),
}

/// A finalized network: every convolution is in look-up-table form.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub weights: ModelWeights,
    pub layers: Vec<DeployedLayer>,
    /// Edge-attribute scale of each graph level.
    pub scales: Vec<LayerScale>,
    /// Per-axis offset reach of each graph level.
    pub reaches: Vec<(i64, i64)>,
}

/// Where the weights of [`build_model`] come from.
#[derive(Clone, Debug)]
pub enum WeightSource {
    Weights(ModelWeights),
    Seed(u64),
}

pub fn build_model(config: &ModelConfig, source: WeightSource) -> Result<Model> {
    let arch = Architecture::new(config)?;
    let weights = match source {
        WeightSource::Weights(w) => w,
        WeightSource::Seed(seed) => ModelWeights::random(&arch, seed),
    };
    weights.check(&arch)?;
    let g = config.geometry;
    let rx0 = radius_reach(g.width, config.radius);
    let ry0 = radius_reach(g.height, config.radius);
    let gx: Vec<u32> = arch.pools.iter().map(|p| p.gx).collect();
    let gy: Vec<u32> = arch.pools.iter().map(|p| p.gy).collect();
    let px = pooled_reaches(g.width, &gx, rx0);
    let py = pooled_reaches(g.height, &gy, ry0);
    let mut scales = vec![input_scale(g, config.radius)];
    let mut reaches = vec![(rx0, ry0)];
    for (i, p) in arch.pools.iter().enumerate() {
        scales.push(pooled_scale(g, p.gx, p.gy));
        reaches.push((px[i], py[i]));
    }
    let offsets: Vec<Vec<(i64, i64)>> = reaches.iter().map(|&(rx, ry)| rect_offsets(rx, ry)).collect();
    let mut layers = Vec::with_capacity(arch.layers.len());
    for spec in &arch.layers {
        let deployed = match weights.get(&spec.path) {
            Some(LayerWeights::Conv { kernel, bn }) => {
                DeployedLayer::Conv(build_lut(spec.path.clone(), kernel, bn, &offsets[spec.level], scales[spec.level])?)
            }
            Some(LayerWeights::Linear { root, bn }) => DeployedLayer::Linear(LinearLayer::new(spec.path.clone(), root, bn)?),
            None => return Err(Error::MissingTensor(spec.path.clone())),
        };
        layers.push(deployed);
    }
    Ok(Model {
        config: *config,
        arch,
        weights,
        layers,
        scales,
        reaches,
    })
}

impl Model {
    pub fn conv(&self, layer: usize) -> &LutConvLayer {
        match &self.layers[layer] {
            DeployedLayer::Conv(c) => c,
            DeployedLayer::Linear(_) => panic!("layer {layer} is not a convolution"),
        }
    }

    pub fn linear(&self, layer: usize) -> &LinearLayer {
        match &self.layers[layer] {
            DeployedLayer::Linear(l) => l,
            DeployedLayer::Conv(_) => panic!("layer {layer} is not linear"),
        }
    }

    /// Trainable parameters: control grids, root matrices and batch-norm
    /// affine parameters.
    pub fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }

    pub fn level_count(&self) -> usize {
        POOL_COUNT + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(size: ModelSize) -> ModelConfig {
        ModelConfig::new(size, SensorGeometry::new(304, 240).unwrap())
    }

    #[test]
    fn architecture_audit() {
        let arch = Architecture::new(&config(ModelSize::Small)).unwrap();
        assert_eq!(arch.conv_depth(), 13);
        let grids: Vec<_> = arch.pools.iter().map(|p| (p.gx, p.gy)).collect();
        assert_eq!(grids, vec![(56, 40), (28, 20), (14, 10), (7, 5)]);
        assert_eq!(arch.head_capacities(), vec![140, 35]);
        assert_eq!(arch.heads[0].level, 3);
        assert_eq!(arch.heads[1].level, 4);
    }

    #[test]
    fn nano_uses_32_wide_channels() {
        let arch = Architecture::new(&config(ModelSize::Nano)).unwrap();
        for l in &arch.layers {
            if l.path.starts_with("block3") || l.path.starts_with("head") {
                assert!(l.c_out == 32 || l.path.ends_with("_pred"), "{l:?}");
            }
        }
    }

    #[test]
    fn input_depth_changes_only_the_first_block() {
        for depth in 1..=3 {
            let arch = Architecture::new(&config(ModelSize::Nano).with_input_depth(depth)).unwrap();
            let n = arch.layers.iter().filter(|l| l.path.starts_with("block1.conv")).count();
            assert_eq!(n, depth);
            assert_eq!(arch.conv_depth(), 11 + depth);
        }
    }

    #[test]
    fn size_names_parse() {
        assert_eq!("small".parse::<ModelSize>().unwrap(), ModelSize::Small);
        assert_eq!("L".parse::<ModelSize>().unwrap(), ModelSize::Large);
        assert!("huge".parse::<ModelSize>().is_err());
    }
}
