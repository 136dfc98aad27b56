//! Pointwise and structural tensor operations: pooling, softmax, channel
//! split/concat, nearest upsampling, SiLU, elementwise add.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Global average pooling: spatial mean per `(batch, channel)`, returned as an
/// `(N, C, 1, 1)` tensor.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    if x.plane() == 0 {
        return Err(Error::Geometry("gap: empty spatial extent".into()));
    }
    let inv = 1.0 / x.plane() as f64;
    let mut out = Tensor::zeros([x.batch(), x.channels(), 1, 1]);
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            let mut acc = 0.0;
            for v in x.plane_slice(n, c) {
                acc += *v;
            }
            *out.at_mut(n, c, 0, 0) = acc * inv;
        }
    }
    out.ensure_finite("gap")?;
    Ok(out)
}

/// Max-subtracted softmax over a flat vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Value("softmax: empty input".into()));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Value("softmax: NaN input".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Split along the channel axis into `parts` equal contiguous blocks.
pub fn split_channels(x: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    if parts == 0 || x.channels() % parts != 0 {
        return Err(Error::Divisibility {
            channels: x.channels(),
            parts,
        });
    }
    let block = x.channels() / parts;
    let plane = x.plane();
    let mut out = Vec::with_capacity(parts);
    for p in 0..parts {
        let mut t = Tensor::zeros([x.batch(), block, x.height(), x.width()]);
        for n in 0..x.batch() {
            let src_start = (n * x.channels() + p * block) * plane;
            let dst_start = n * block * plane;
            t.data_mut()[dst_start..dst_start + block * plane]
                .copy_from_slice(&x.data()[src_start..src_start + block * plane]);
        }
        out.push(t);
    }
    Ok(out)
}

/// Concatenate along the channel axis; exact inverse of [`split_channels`].
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("concat_channels: empty input list".into()))?;
    let (n, h, w) = (first.batch(), first.height(), first.width());
    let mut channels = 0;
    for t in parts {
        if t.batch() != n || t.height() != h || t.width() != w {
            return Err(Error::Dimension(format!(
                "concat_channels: shape {:?} incompatible with {:?}",
                t.shape(),
                first.shape()
            )));
        }
        channels += t.channels();
    }
    let plane = h * w;
    let mut out = Tensor::zeros([n, channels, h, w]);
    for bn in 0..n {
        let mut c_off = 0;
        for t in parts {
            let len = t.channels() * plane;
            let src = &t.data()[bn * len..(bn + 1) * len];
            let dst_start = (bn * channels + c_off) * plane;
            out.data_mut()[dst_start..dst_start + len].copy_from_slice(src);
            c_off += t.channels();
        }
    }
    Ok(out)
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let (h, w) = (x.height(), x.width());
    let mut out = Tensor::zeros([x.batch(), x.channels(), h * factor, w * factor]);
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            let src = x.plane_slice(n, c);
            let dst = out.plane_slice_mut(n, c);
            for oi in 0..h * factor {
                let si = oi / factor;
                for oj in 0..w * factor {
                    dst[oi * w * factor + oj] = src[si * w + oj / factor];
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`upsample_nearest`]: each input cell collects the sum of the
/// gradients over its replicated block.
pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let (oh, ow) = (grad_out.height(), grad_out.width());
    if oh % factor != 0 || ow % factor != 0 {
        return Err(Error::Dimension(format!(
            "upsample backward: {}x{} not divisible by factor {}",
            oh, ow, factor
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = Tensor::zeros([grad_out.batch(), grad_out.channels(), h, w]);
    for n in 0..grad_out.batch() {
        for c in 0..grad_out.channels() {
            let src = grad_out.plane_slice(n, c);
            let dst = out.plane_slice_mut(n, c);
            for oi in 0..oh {
                for oj in 0..ow {
                    dst[(oi / factor) * w + oj / factor] += src[oi * ow + oj];
                }
            }
        }
    }
    Ok(out)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// `silu(x) = x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid_scalar(v))
}

/// Gradient of SiLU at `x`, scaled by `grad_out`:
/// `d/dx [x*s(x)] = s(x) * (1 + x*(1 - s(x)))`.
pub fn silu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Dimension(format!(
            "silu_backward: {:?} vs {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let mut out = Tensor::zeros_like(x);
    for ((o, &v), &g) in out
        .data_mut()
        .iter_mut()
        .zip(x.data().iter())
        .zip(grad_out.data().iter())
    {
        let s = sigmoid_scalar(v);
        *o = g * s * (1.0 + v * (1.0 - s));
    }
    Ok(out)
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.add_assign(b)?;
    out.ensure_finite("add")?;
    Ok(out)
}
