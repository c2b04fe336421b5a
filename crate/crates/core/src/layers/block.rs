//! Position concatenation, root-only linear maps and residual blocks.

use super::level::LevelGraph;
use super::lut::{conv_forward, LutConvLayer};
use super::matrix::{relu, Features, Matrix};
use super::spline::BatchNormParams;
use crate::error::{Error, Result};

/// Appends the normalized `(x, y)` of every node to its feature.
pub fn concat_position(features: &Features, graph: &LevelGraph) -> Features {
    let mut out = Features::new(features.channels() + 2);
    let mut row = Vec::with_capacity(features.channels() + 2);
    for i in 0..graph.len() {
        row.clear();
        concat_row(features.row(i), graph, i, &mut row);
        out.push_row(&row);
    }
    out
}

/// `[x, x_hat, y_hat]` for node `i`.
pub fn concat_row(x: &[f64], graph: &LevelGraph, i: usize, out: &mut Vec<f64>) {
    let (nx, ny) = graph.normalized_xy(i);
    out.extend_from_slice(x);
    out.push(nx);
    out.push(ny);
}

/// Neighbor-free affine map `W' x + b` with batch norm folded in; the skip
/// connection of a residual block whose channel count changes.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    name: String,
    root: Matrix,
    bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, root: &Matrix, bn: &BatchNormParams) -> Result<Self> {
        let name = name.into();
        if bn.channels() != root.rows() {
            return Err(Error::ChannelMismatch {
                layer: name,
                expected: root.rows(),
                actual: bn.channels(),
            });
        }
        let mut root = root.clone();
        root.scale_rows(&bn.scale());
        Ok(Self {
            name,
            root,
            bias: bn.shift(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn c_in(&self) -> usize {
        self.root.cols()
    }

    pub fn c_out(&self) -> usize {
        self.root.rows()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.root.matvec_into(x, out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }

    pub fn forward(&self, features: &Features) -> Features {
        let mut out = Features::zeros(features.len(), self.c_out());
        for i in 0..features.len() {
            self.apply_into(features.row(i), out.row_mut(i));
        }
        out
    }
}

/// `ReLU(conv_last(... ReLU(conv_1(concat_position(in)))) + skip(in))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub convs: Vec<LutConvLayer>,
    /// `None` is the identity skip.
    pub skip: Option<LinearLayer>,
}

impl ResidualBlock {
    pub fn c_in(&self) -> usize {
        self.convs[0].c_in() - 2
    }

    pub fn c_out(&self) -> usize {
        self.convs.last().map(LutConvLayer::c_out).unwrap_or(0)
    }
}

pub fn residual_block(block: &ResidualBlock, graph: &LevelGraph, features: &Features) -> Result<Features> {
    if block.convs.is_empty() {
        return Err(Error::InvalidConfig("residual block without convolutions".into()));
    }
    if features.channels() != block.c_in() {
        return Err(Error::ChannelMismatch {
            layer: block.convs[0].name().to_string(),
            expected: block.c_in(),
            actual: features.channels(),
        });
    }
    let last = block.convs.len() - 1;
    let mut h = concat_position(features, graph);
    for (k, conv) in block.convs.iter().enumerate() {
        h = conv_forward(conv, graph, &h)?;
        if k < last {
            h = h.map(relu);
        }
    }
    let skip = match &block.skip {
        Some(lin) => lin.forward(features),
        None => features.clone(),
    };
    if skip.channels() != h.channels() {
        return Err(Error::ChannelMismatch {
            layer: block.convs[last].name().to_string(),
            expected: h.channels(),
            actual: skip.channels(),
        });
    }
    let mut out = Features::new(h.channels());
    let mut row = vec![0.0; h.channels()];
    for i in 0..h.len() {
        for ((o, a), b) in row.iter_mut().zip(h.row(i)).zip(skip.row(i)) {
            *o = relu(a + b);
        }
        out.push_row(&row);
    }
    Ok(out)
}
