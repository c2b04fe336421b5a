//! Degree-1 B-spline kernels over a `k x k` control grid in `[0, 1]^2`.

use super::matrix::Matrix;

/// Control points per dimension.
pub const KERNEL_SIZE: usize = 5;

/// Spline convolution weights before deployment.
///
/// `control[ix * k + iy]` is the `(c_out x c_in)` matrix at knot
/// `(ix / (k-1), iy / (k-1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineKernel {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub control: Vec<Matrix>,
    pub root: Matrix,
}

impl SplineKernel {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            k: KERNEL_SIZE,
            control: vec![Matrix::zeros(c_out, c_in); KERNEL_SIZE * KERNEL_SIZE],
            root: Matrix::zeros(c_out, c_in),
        }
    }

    pub fn control_at(&self, ix: usize, iy: usize) -> &Matrix {
        &self.control[ix * self.k + iy]
    }

    pub fn control_at_mut(&mut self, ix: usize, iy: usize) -> &mut Matrix {
        &mut self.control[ix * self.k + iy]
    }
}

/// Edge attribute `e` in `[0, 1]^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeAttribute(pub [f64; 2]);

impl EdgeAttribute {
    /// `e = d / (2r) + 1/2` per axis for the signed source-minus-destination
    /// offset `d`, clamped to `[0, 1]`.
    pub fn from_offset(dx: f64, dy: f64, scale: LayerScale) -> Self {
        let ex = dx / (2.0 * scale.rx) + 0.5;
        let ey = dy / (2.0 * scale.ry) + 0.5;
        EdgeAttribute([ex.clamp(0.0, 1.0), ey.clamp(0.0, 1.0)])
    }
}

/// Per-axis reach `r` of a layer, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerScale {
    pub rx: f64,
    pub ry: f64,
}

/// Bilinear interpolation of the control matrices at `e`.
pub fn spline_weight(kernel: &SplineKernel, e: EdgeAttribute) -> Matrix {
    let last = (kernel.k - 1) as f64;
    let (ix, fx) = knot_span(e.0[0].clamp(0.0, 1.0) * last, kernel.k);
    let (iy, fy) = knot_span(e.0[1].clamp(0.0, 1.0) * last, kernel.k);
    let mut out = Matrix::zeros(kernel.c_out, kernel.c_in);
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let w = wx * wy;
            if w != 0.0 {
                out.add_scaled(w, kernel.control_at(ix + dx, iy + dy));
            }
        }
    }
    out
}

fn knot_span(u: f64, k: usize) -> (usize, f64) {
    let i = (u.floor() as usize).min(k - 2);
    (i, u - i as f64)
}

/// Batch-norm statistics and affine parameters, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormParams {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel multiplier `gamma / sqrt(var + eps)`.
    pub fn scale(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect()
    }

    /// Bias left after folding: `beta - gamma * mean / sqrt(var + eps)`.
    pub fn shift(&self) -> Vec<f64> {
        self.scale()
            .iter()
            .zip(self.beta.iter().zip(&self.mean))
            .map(|(s, (b, m))| b - s * m)
            .collect()
    }

    /// Normalizes a pre-activation vector in place.
    pub fn apply(&self, y: &mut [f64]) {
        for (c, v) in y.iter_mut().enumerate() {
            *v = self.gamma[c] * (*v - self.mean[c]) / (self.var[c] + self.eps).sqrt() + self.beta[c];
        }
    }
}
