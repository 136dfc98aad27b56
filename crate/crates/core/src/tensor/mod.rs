//! Minimal deterministic tensor engine.
//!
//! Rank-4 tensors in batch x channel x height x width layout, stored row-major
//! as `f64`. All public operations are pure functions of their inputs and
//! reject non-finite values instead of propagating them.

mod conv;
mod gradcheck;
mod io;
mod ops;

pub use conv::{conv2d, conv2d_backward, conv2d_backward_seq, conv2d_seq, depthwise_separable, ConvSpec};
pub use gradcheck::{finite_diff_grad, max_rel_error};
pub use io::{read_tensor, tensor_from_json, tensor_to_json, write_tensor, DTYPE_F32, DTYPE_F64, FSNT_MAGIC, FSNT_VERSION};
pub use ops::{
    add, concat_channels, gap, sigmoid, sigmoid_scalar, silu, silu_backward, softmax,
    split_channels, upsample_nearest, upsample_nearest_backward,
};

use crate::error::{Error, Result};

/// Rank-4 real tensor `(N, C, H, W)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from explicit data; the length must equal `N*C*H*W`.
    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape)
    }

    /// Fill from a function of `(n, c, i, j)`.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, h, w] = shape;
        let mut idx = 0;
        for bn in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        t.data[idx] = f(bn, ch, i, j);
                        idx += 1;
                    }
                }
            }
        }
        t
    }

    /// Identity convolution kernel `(C, C, k, k)`: center tap 1 on the
    /// diagonal, zero elsewhere. `k` must be odd.
    pub fn identity_kernel(channels: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "identity kernel needs odd size");
        let center = k / 2;
        Tensor::from_fn([channels, channels, k, k], |o, i, kh, kw| {
            if o == i && kh == center && kw == center {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Elements in one spatial plane (`H*W`).
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + i) * self.shape[3] + j
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(n, c, i, j)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, i: usize, j: usize) -> &mut f64 {
        let idx = self.index(n, c, i, j);
        &mut self.data[idx]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// One `(n, c)` spatial plane as a contiguous slice.
    pub fn plane_slice(&self, n: usize, c: usize) -> &[f64] {
        let plane = self.plane();
        let start = (n * self.shape[1] + c) * plane;
        &self.data[start..start + plane]
    }

    pub fn plane_slice_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let plane = self.plane();
        let start = (n * self.shape[1] + c) * plane;
        &mut self.data[start..start + plane]
    }

    /// Error if any element is NaN or infinite.
    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Value(format!("{op}: non-finite value in tensor")))
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// In-place `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add_assign: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }
}

/// Fill a tensor with samples from `U(-bound, bound)` using the supplied RNG.
pub fn fill_uniform(t: &mut Tensor, bound: f64, rng: &mut impl rand::Rng) {
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}
