//! Model weights and the `.eagw` tensor container.
//!
//! Layout, little-endian: magic `EAGW`, version (u32), tensor count (u32),
//! then per tensor a table entry `path_len (u16), path (utf-8), rank (u8),
//! dims (u32 x rank), byte offset (u64)`, then the tensor data as f32.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, LayerKind};
use crate::error::{Error, Result};
use crate::layers::{BatchNormParams, Matrix, SplineKernel, KERNEL_SIZE};

const MAGIC: &[u8; 4] = b"EAGW";
const VERSION: u32 = 1;

/// Weights of one layer before finalization.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights {
    Conv { kernel: SplineKernel, bn: BatchNormParams },
    Linear { root: Matrix, bn: BatchNormParams },
}

impl LayerWeights {
    fn shape(&self) -> (LayerKind, usize, usize) {
        match self {
            LayerWeights::Conv { kernel, .. } => (LayerKind::Conv, kernel.c_in, kernel.c_out),
            LayerWeights::Linear { root, .. } => (LayerKind::Linear, root.cols(), root.rows()),
        }
    }

    fn bn(&self) -> &BatchNormParams {
        match self {
            LayerWeights::Conv { bn, .. } | LayerWeights::Linear { bn, .. } => bn,
        }
    }
}

/// All layer weights, keyed by layer path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights {
    layers: BTreeMap<String, LayerWeights>,
}

struct Tensor {
    path: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, path: &str) -> Option<&LayerWeights> {
        self.layers.get(path)
    }

    pub fn insert(&mut self, path: impl Into<String>, weights: LayerWeights) {
        self.layers.insert(path.into(), weights);
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &LayerWeights)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Uniform `+-sqrt(1 / (c_in k^2))` control and root weights, identity
    /// batch norm. Values are drawn in f32 so they survive the container.
    pub fn random(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self::new();
        for spec in &arch.layers {
            let k2 = (KERNEL_SIZE * KERNEL_SIZE) as f32;
            let bound = (1.0 / (spec.c_in as f32 * k2)).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let mut draw = |rows: usize, cols: usize| {
                Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| f64::from(dist.sample(&mut rng))).collect())
            };
            let mut bn = BatchNormParams::identity(spec.c_out);
            bn.eps = f64::from(BatchNormParams::DEFAULT_EPS as f32);
            let weights = match spec.kind {
                LayerKind::Conv => {
                    let mut kernel = SplineKernel::zeros(spec.c_in, spec.c_out);
                    for m in kernel.control.iter_mut() {
                        *m = draw(spec.c_out, spec.c_in);
                    }
                    kernel.root = draw(spec.c_out, spec.c_in);
                    LayerWeights::Conv { kernel, bn }
                }
                LayerKind::Linear => LayerWeights::Linear {
                    root: draw(spec.c_out, spec.c_in),
                    bn,
                },
            };
            out.insert(spec.path.clone(), weights);
        }
        out
    }

    /// Checks the weights against an architecture, in layer order: the first
    /// offending path is reported.
    pub fn check(&self, arch: &Architecture) -> Result<()> {
        for spec in &arch.layers {
            let w = self.get(&spec.path).ok_or_else(|| Error::MissingTensor(spec.path.clone()))?;
            let (kind, c_in, c_out) = w.shape();
            if kind != spec.kind {
                let path = match spec.kind {
                    LayerKind::Conv => format!("{}.control", spec.path),
                    LayerKind::Linear => format!("{}.root", spec.path),
                };
                return Err(Error::ShapeMismatch {
                    path,
                    expected: vec![spec.c_out, spec.c_in],
                    found: vec![],
                });
            }
            if (c_in, c_out) != (spec.c_in, spec.c_out) {
                return Err(Error::ShapeMismatch {
                    path: format!("{}.root", spec.path),
                    expected: vec![spec.c_out, spec.c_in],
                    found: vec![c_out, c_in],
                });
            }
        }
        if let Some(extra) = self.layers.keys().find(|p| arch.layer_index(p).is_none()) {
            return Err(Error::UnknownPath(extra.clone()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .values()
            .map(|w| {
                let (kind, c_in, c_out) = w.shape();
                let grids = match kind {
                    LayerKind::Conv => KERNEL_SIZE * KERNEL_SIZE + 1,
                    LayerKind::Linear => 1,
                };
                grids * c_in * c_out + 2 * c_out
            })
            .sum()
    }

    fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        for (path, w) in &self.layers {
            let (_, c_in, c_out) = w.shape();
            match w {
                LayerWeights::Conv { kernel, .. } => {
                    let data = kernel.control.iter().flat_map(|m| f(m.data())).collect();
                    out.push(Tensor {
                        path: format!("{path}.control"),
                        dims: vec![kernel.k, kernel.k, c_out, c_in],
                        data,
                    });
                    out.push(Tensor {
                        path: format!("{path}.root"),
                        dims: vec![c_out, c_in],
                        data: f(kernel.root.data()),
                    });
                }
                LayerWeights::Linear { root, .. } => out.push(Tensor {
                    path: format!("{path}.root"),
                    dims: vec![c_out, c_in],
                    data: f(root.data()),
                }),
            }
            let bn = w.bn();
            for (name, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
                out.push(Tensor {
                    path: format!("{path}.bn.{name}"),
                    dims: vec![c_out],
                    data: f(v),
                });
            }
            out.push(Tensor {
                path: format!("{path}.bn.eps"),
                dims: vec![1],
                data: vec![bn.eps as f32],
            });
        }
        out
    }

    fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        const SUFFIXES: [&str; 7] = [".control", ".root", ".bn.gamma", ".bn.beta", ".bn.mean", ".bn.var", ".bn.eps"];
        let mut grouped: BTreeMap<String, BTreeMap<&'static str, Tensor>> = BTreeMap::new();
        for t in tensors {
            let suffix = SUFFIXES
                .iter()
                .find(|s| t.path.ends_with(*s))
                .ok_or_else(|| Error::UnknownPath(t.path.clone()))?;
            let layer = t.path[..t.path.len() - suffix.len()].to_string();
            grouped.entry(layer).or_default().insert(suffix, t);
        }
        let mut out = Self::new();
        for (layer, mut parts) in grouped {
            let mut take = |suffix: &'static str| {
                parts
                    .remove(suffix)
                    .ok_or_else(|| Error::MissingTensor(format!("{layer}{suffix}")))
            };
            let root = take(".root")?;
            if root.dims.len() != 2 {
                return Err(Error::ShapeMismatch {
                    path: root.path,
                    expected: vec![0, 0],
                    found: root.dims,
                });
            }
            let (c_out, c_in) = (root.dims[0], root.dims[1]);
            let vector = |t: Tensor, n: usize| -> Result<Vec<f64>> {
                if t.dims != [n] {
                    return Err(Error::ShapeMismatch {
                        path: t.path,
                        expected: vec![n],
                        found: t.dims,
                    });
                }
                Ok(t.data.iter().map(|&x| f64::from(x)).collect())
            };
            let bn = BatchNormParams {
                gamma: vector(take(".bn.gamma")?, c_out)?,
                beta: vector(take(".bn.beta")?, c_out)?,
                mean: vector(take(".bn.mean")?, c_out)?,
                var: vector(take(".bn.var")?, c_out)?,
                eps: vector(take(".bn.eps")?, 1)?[0],
            };
            let root_m = Matrix::from_vec(c_out, c_in, root.data.iter().map(|&x| f64::from(x)).collect());
            let weights = match take(".control") {
                Ok(control) => {
                    let k = KERNEL_SIZE;
                    if control.dims != [k, k, c_out, c_in] {
                        return Err(Error::ShapeMismatch {
                            path: control.path,
                            expected: vec![k, k, c_out, c_in],
                            found: control.dims,
                        });
                    }
                    let mut kernel = SplineKernel::zeros(c_in, c_out);
                    for (m, chunk) in kernel.control.iter_mut().zip(control.data.chunks_exact(c_out * c_in.max(1))) {
                        *m = Matrix::from_vec(c_out, c_in, chunk.iter().map(|&x| f64::from(x)).collect());
                    }
                    kernel.root = root_m;
                    LayerWeights::Conv { kernel, bn }
                }
                Err(_) => LayerWeights::Linear { root: root_m, bn },
            };
            out.insert(layer, weights);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.to_tensors();
        let table_len: usize = tensors
            .iter()
            .map(|t| 2 + t.path.len() + 1 + 4 * t.dims.len() + 8)
            .sum();
        let mut offset = (12 + table_len) as u64;
        let mut out = Vec::with_capacity(offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.path.len() as u16).to_le_bytes());
            out.extend_from_slice(t.path.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.data.len() as u64;
        }
        for t in &tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::CorruptWeights(what.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| corrupt("truncated header"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != VERSION {
            return Err(Error::CorruptWeights(format!("unsupported version {version}")));
        }
        let count = cur.u32().ok_or_else(|| corrupt("truncated header"))?;
        let mut seen = HashSet::new();
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = cur.u16().ok_or_else(|| corrupt("truncated table"))? as usize;
            let path = std::str::from_utf8(cur.take(len).ok_or_else(|| corrupt("truncated table"))?)
                .map_err(|_| corrupt("path is not utf-8"))?
                .to_string();
            let rank = cur.take(1).ok_or_else(|| corrupt("truncated table"))?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32().ok_or_else(|| corrupt("truncated table"))? as usize);
            }
            let offset = cur.u64().ok_or_else(|| corrupt("truncated table"))? as usize;
            let n: usize = dims.iter().product();
            let data = offset
                .checked_add(4 * n)
                .and_then(|end| bytes.get(offset..end))
                .ok_or_else(|| Error::CorruptWeights(format!("data of `{path}` out of bounds")))?;
            if !seen.insert(path.clone()) {
                return Err(Error::DuplicatePath(path));
            }
            let data = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { path, dims, data });
        }
        Self::from_tensors(tensors)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, weights.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    ModelWeights::from_bytes(&fs::read(path)?)
}
