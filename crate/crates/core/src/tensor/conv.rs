//! Direct-loop 2-D convolution: forward, backward, and the depthwise
//! separable composition.
//!
//! No im2col buffer; each output plane is filled by sweeping contiguous input
//! rows. The parallel build distributes whole `(batch, channel)` planes, and
//! every plane is computed with the same inner loop order as the sequential
//! build, so the two are bitwise identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            has_bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// Same-spatial-size padding for odd kernels at stride 1.
    pub fn same_padding(mut self) -> Self {
        debug_assert!(self.kernel.0 % 2 == 1 && self.kernel.1 % 2 == 1);
        self.padding = self.dilation * (self.kernel.0 - 1) / 2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel.0 == 0
            || self.kernel.1 == 0
            || self.stride == 0
            || self.dilation == 0
            || self.groups == 0
        {
            return Err(Error::Config(format!("conv spec has a zero field: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels ({}, {}) not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Output size along one axis: `floor((S + 2p - d(k-1) - 1)/stride) + 1`.
    pub fn out_size(&self, in_size: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = in_size + 2 * self.padding;
        if padded < span {
            return Err(Error::Geometry(format!(
                "kernel span {span} exceeds padded input {padded}"
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn out_shape(&self, x: &Tensor) -> Result<[usize; 4]> {
        Ok([
            x.batch(),
            self.out_channels,
            self.out_size(x.height(), self.kernel.0)?,
            self.out_size(x.width(), self.kernel.1)?,
        ])
    }

    /// Expected weight tensor shape `(out, in/groups, kh, kw)`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Learnable parameter count: `k_h*k_w*C_in*C_out/groups` plus bias.
    pub fn param_count(&self) -> usize {
        let w = self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels / self.groups;
        w + if self.has_bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulate count at a given output spatial size.
    pub fn mac_count(&self, out_h: usize, out_w: usize) -> usize {
        out_h * out_w * self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels
            / self.groups
    }
}

#[derive(Clone, Copy)]
struct Dims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: isize,
    dil: usize,
    icg: usize,
    ocg: usize,
}

impl Dims {
    fn build(spec: &ConvSpec, x: &Tensor) -> Result<Self> {
        spec.validate()?;
        if x.channels() != spec.in_channels {
            return Err(Error::Dimension(format!(
                "input has {} channels, spec expects {}",
                x.channels(),
                spec.in_channels
            )));
        }
        let oh = spec.out_size(x.height(), spec.kernel.0)?;
        let ow = spec.out_size(x.width(), spec.kernel.1)?;
        Ok(Dims {
            cin: spec.in_channels,
            h: x.height(),
            w: x.width(),
            cout: spec.out_channels,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            oh,
            ow,
            stride: spec.stride,
            pad: spec.padding as isize,
            dil: spec.dilation,
            icg: spec.in_channels / spec.groups,
            ocg: spec.out_channels / spec.groups,
        })
    }
}

fn check_weights(spec: &ConvSpec, weights: &Tensor, bias: &[f64]) -> Result<()> {
    if weights.shape() != spec.weight_shape() {
        return Err(Error::Dimension(format!(
            "weights shaped {:?}, spec expects {:?}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    let expect = if spec.has_bias { spec.out_channels } else { 0 };
    if bias.len() != expect {
        return Err(Error::Dimension(format!(
            "bias length {} (expected {})",
            bias.len(),
            expect
        )));
    }
    Ok(())
}

/// Inclusive output index range `[lo, hi]` whose mapped input index
/// `o*stride + offset` stays inside `[0, in_size)`. Empty when `lo > hi`.
#[inline]
fn valid_range(in_size: usize, out_size: usize, stride: usize, offset: isize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_num = in_size as isize - 1 - offset;
    if hi_num < 0 || lo >= out_size {
        return (1, 0);
    }
    ((lo), ((hi_num as usize) / stride).min(out_size - 1))
}

/// Accumulation order per output element is fixed (bias, then ic -> kh -> kw)
/// so plane-parallel and sequential execution agree bitwise.
fn forward_plane(
    d: &Dims,
    x: &Tensor,
    weights: &Tensor,
    bias: f64,
    n: usize,
    oc: usize,
    out_plane: &mut [f64],
) {
    out_plane.fill(bias);
    let g = oc / d.ocg;
    let wdata = weights.data();
    for icl in 0..d.icg {
        let ic = g * d.icg + icl;
        let xplane = x.plane_slice(n, ic);
        for kh in 0..d.kh {
            let roff = (kh * d.dil) as isize - d.pad;
            let (oh_lo, oh_hi) = valid_range(d.h, d.oh, d.stride, roff);
            if oh_lo > oh_hi {
                continue;
            }
            for kw in 0..d.kw {
                let coff = (kw * d.dil) as isize - d.pad;
                let (ow_lo, ow_hi) = valid_range(d.w, d.ow, d.stride, coff);
                if ow_lo > ow_hi {
                    continue;
                }
                let wv = wdata[((oc * d.icg + icl) * d.kh + kh) * d.kw + kw];
                for oh in oh_lo..=oh_hi {
                    let ih = ((oh * d.stride) as isize + roff) as usize;
                    let xrow = &xplane[ih * d.w..ih * d.w + d.w];
                    let orow = &mut out_plane[oh * d.ow..(oh + 1) * d.ow];
                    if d.stride == 1 {
                        let iw0 = (ow_lo as isize + coff) as usize;
                        let len = ow_hi - ow_lo + 1;
                        let xs = &xrow[iw0..iw0 + len];
                        for (o, xv) in orow[ow_lo..ow_lo + len].iter_mut().zip(xs) {
                            *o += wv * *xv;
                        }
                    } else {
                        for ow in ow_lo..=ow_hi {
                            let iw = ((ow * d.stride) as isize + coff) as usize;
                            orow[ow] += wv * xrow[iw];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_dispatch(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    bias: &[f64],
    parallel: bool,
) -> Result<Tensor> {
    let d = Dims::build(spec, x)?;
    check_weights(spec, weights, bias)?;
    let mut out = Tensor::zeros([x.batch(), d.cout, d.oh, d.ow]);
    let plane = d.oh * d.ow;
    let cout = d.cout;
    let fill = |idx: usize, chunk: &mut [f64]| {
        let n = idx / cout;
        let oc = idx % cout;
        let b = if spec.has_bias { bias[oc] } else { 0.0 };
        forward_plane(&d, x, weights, b, n, oc, chunk);
    };
    if parallel {
        for_each_chunk_mut(out.data_mut(), plane, fill);
    } else {
        out.data_mut()
            .chunks_mut(plane)
            .enumerate()
            .for_each(|(i, c)| fill(i, c));
    }
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// 2-D convolution with stride, padding, dilation, and grouping.
pub fn conv2d(x: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    conv2d_dispatch(x, spec, weights, bias, true)
}

/// Sequential forward path, kept callable for benchmarks and the
/// parallel-equivalence tests.
pub fn conv2d_seq(x: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &[f64]) -> Result<Tensor> {
    conv2d_dispatch(x, spec, weights, bias, false)
}

fn grad_x_plane(
    d: &Dims,
    weights: &Tensor,
    grad_out: &Tensor,
    n: usize,
    ic: usize,
    gx_plane: &mut [f64],
) {
    gx_plane.fill(0.0);
    let g = ic / d.icg;
    let icl = ic % d.icg;
    let wdata = weights.data();
    for ocl in 0..d.ocg {
        let oc = g * d.ocg + ocl;
        let gyplane = grad_out.plane_slice(n, oc);
        for kh in 0..d.kh {
            let roff = (kh * d.dil) as isize - d.pad;
            let (oh_lo, oh_hi) = valid_range(d.h, d.oh, d.stride, roff);
            if oh_lo > oh_hi {
                continue;
            }
            for kw in 0..d.kw {
                let coff = (kw * d.dil) as isize - d.pad;
                let (ow_lo, ow_hi) = valid_range(d.w, d.ow, d.stride, coff);
                if ow_lo > ow_hi {
                    continue;
                }
                let wv = wdata[((oc * d.icg + icl) * d.kh + kh) * d.kw + kw];
                for oh in oh_lo..=oh_hi {
                    let ih = ((oh * d.stride) as isize + roff) as usize;
                    let gxrow = &mut gx_plane[ih * d.w..ih * d.w + d.w];
                    let gyrow = &gyplane[oh * d.ow..(oh + 1) * d.ow];
                    if d.stride == 1 {
                        let iw0 = (ow_lo as isize + coff) as usize;
                        let len = ow_hi - ow_lo + 1;
                        for (gx, gy) in gxrow[iw0..iw0 + len]
                            .iter_mut()
                            .zip(&gyrow[ow_lo..ow_lo + len])
                        {
                            *gx += wv * *gy;
                        }
                    } else {
                        for ow in ow_lo..=ow_hi {
                            let iw = ((ow * d.stride) as isize + coff) as usize;
                            gxrow[iw] += wv * gyrow[ow];
                        }
                    }
                }
            }
        }
    }
}

fn grad_w_chunk(
    d: &Dims,
    x: &Tensor,
    grad_out: &Tensor,
    batch: usize,
    oc: usize,
    gw_chunk: &mut [f64],
) {
    let g = oc / d.ocg;
    for icl in 0..d.icg {
        let ic = g * d.icg + icl;
        for kh in 0..d.kh {
            let roff = (kh * d.dil) as isize - d.pad;
            let (oh_lo, oh_hi) = valid_range(d.h, d.oh, d.stride, roff);
            for kw in 0..d.kw {
                let coff = (kw * d.dil) as isize - d.pad;
                let (ow_lo, ow_hi) = valid_range(d.w, d.ow, d.stride, coff);
                let mut acc = 0.0;
                if oh_lo <= oh_hi && ow_lo <= ow_hi {
                    for n in 0..batch {
                        let xplane = x.plane_slice(n, ic);
                        let gyplane = grad_out.plane_slice(n, oc);
                        for oh in oh_lo..=oh_hi {
                            let ih = ((oh * d.stride) as isize + roff) as usize;
                            let xrow = &xplane[ih * d.w..ih * d.w + d.w];
                            let gyrow = &gyplane[oh * d.ow..(oh + 1) * d.ow];
                            if d.stride == 1 {
                                let iw0 = (ow_lo as isize + coff) as usize;
                                let len = ow_hi - ow_lo + 1;
                                for (gy, xv) in
                                    gyrow[ow_lo..ow_lo + len].iter().zip(&xrow[iw0..iw0 + len])
                                {
                                    acc += *gy * *xv;
                                }
                            } else {
                                for ow in ow_lo..=ow_hi {
                                    let iw = ((ow * d.stride) as isize + coff) as usize;
                                    acc += gyrow[ow] * xrow[iw];
                                }
                            }
                        }
                    }
                }
                gw_chunk[(icl * d.kh + kh) * d.kw + kw] = acc;
            }
        }
    }
}

fn conv2d_backward_dispatch(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    grad_out: &Tensor,
    parallel: bool,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let d = Dims::build(spec, x)?;
    let expect = [x.batch(), d.cout, d.oh, d.ow];
    if grad_out.shape() != expect {
        return Err(Error::Dimension(format!(
            "grad_out shaped {:?}, expected {:?}",
            grad_out.shape(),
            expect
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::Dimension(format!(
            "weights shaped {:?}, spec expects {:?}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    let batch = x.batch();

    let mut grad_x = Tensor::zeros(x.shape());
    let in_plane = d.h * d.w;
    let cin = d.cin;
    let fill_x = |idx: usize, chunk: &mut [f64]| {
        grad_x_plane(&d, weights, grad_out, idx / cin, idx % cin, chunk);
    };

    let mut grad_w = Tensor::zeros(spec.weight_shape());
    let w_chunk = d.icg * d.kh * d.kw;
    let fill_w = |oc: usize, chunk: &mut [f64]| {
        grad_w_chunk(&d, x, grad_out, batch, oc, chunk);
    };

    if parallel {
        for_each_chunk_mut(grad_x.data_mut(), in_plane, fill_x);
        for_each_chunk_mut(grad_w.data_mut(), w_chunk, fill_w);
    } else {
        grad_x
            .data_mut()
            .chunks_mut(in_plane)
            .enumerate()
            .for_each(|(i, c)| fill_x(i, c));
        grad_w
            .data_mut()
            .chunks_mut(w_chunk)
            .enumerate()
            .for_each(|(i, c)| fill_w(i, c));
    }

    let mut grad_b = Vec::new();
    if spec.has_bias {
        grad_b = vec![0.0; d.cout];
        for oc in 0..d.cout {
            let mut acc = 0.0;
            for n in 0..batch {
                for v in grad_out.plane_slice(n, oc) {
                    acc += *v;
                }
            }
            grad_b[oc] = acc;
        }
    }

    grad_x.ensure_finite("conv2d_backward")?;
    grad_w.ensure_finite("conv2d_backward")?;
    Ok((grad_x, grad_w, grad_b))
}

/// Analytic gradients of [`conv2d`] with respect to input, weights, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    conv2d_backward_dispatch(x, spec, weights, grad_out, true)
}

/// Sequential backward path for benchmarks and equivalence tests.
pub fn conv2d_backward_seq(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    conv2d_backward_dispatch(x, spec, weights, grad_out, false)
}

/// Depthwise 3x3-style stage (`groups == channels`) followed by a pointwise
/// 1x1 stage. Exactly the two-convolution composition, in one call.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_separable(
    x: &Tensor,
    dw_spec: &ConvSpec,
    dw_weights: &Tensor,
    dw_bias: &[f64],
    pw_spec: &ConvSpec,
    pw_weights: &Tensor,
    pw_bias: &[f64],
) -> Result<Tensor> {
    if dw_spec.groups != dw_spec.in_channels {
        return Err(Error::Config(format!(
            "depthwise stage needs groups == in_channels, got groups {} for {} channels",
            dw_spec.groups, dw_spec.in_channels
        )));
    }
    if pw_spec.kernel != (1, 1) {
        return Err(Error::Config(format!(
            "pointwise stage needs a 1x1 kernel, got {:?}",
            pw_spec.kernel
        )));
    }
    let mid = conv2d(x, dw_spec, dw_weights, dw_bias)?;
    conv2d(&mid, pw_spec, pw_weights, pw_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fill_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn no_bias(spec: ConvSpec) -> ConvSpec {
        spec.bias(false)
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let spec = ConvSpec::new(1, 1, 1);
        let y = conv2d(&x, &spec, &w, &[0.0]).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn identity_kernel_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = Tensor::zeros([2, 3, 5, 4]);
        fill_uniform(&mut x, 1.0, &mut rng);
        let w = Tensor::identity_kernel(3, 3);
        let spec = no_bias(ConvSpec::new(3, 3, 3).padding(1));
        let y = conv2d(&x, &spec, &w, &[]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dilated_sum_of_nine_ones() {
        let x = Tensor::filled([1, 1, 5, 5], 1.0);
        let w = Tensor::filled([1, 1, 3, 3], 1.0);
        let spec = no_bias(ConvSpec::new(1, 1, 3).dilation(2));
        let y = conv2d(&x, &spec, &w, &[]).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn output_size_formula_and_geometry_error() {
        let spec = ConvSpec::new(1, 1, 3).stride(2).padding(1);
        assert_eq!(spec.out_size(5, 3).unwrap(), 3);
        let bad = ConvSpec::new(1, 1, 7);
        assert!(matches!(bad.out_size(5, 7), Err(Error::Geometry(_))));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros([1, 2, 3, 3]);
        let w = Tensor::zeros([1, 1, 1, 1]);
        let spec = ConvSpec::new(1, 1, 1);
        assert!(matches!(
            conv2d(&x, &spec, &w, &[0.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn grouped_conv_keeps_groups_separate() {
        // 2 groups of 1 channel each; each output channel sees only its group.
        let x = Tensor::from_vec([1, 2, 1, 1], vec![5.0, 7.0]).unwrap();
        let w = Tensor::from_vec([2, 1, 1, 1], vec![2.0, 3.0]).unwrap();
        let spec = no_bias(ConvSpec::new(2, 2, 1).groups(2));
        let y = conv2d(&x, &spec, &w, &[]).unwrap();
        assert_eq!(y.data(), &[10.0, 21.0]);
    }

    #[test]
    fn backward_scalar_product_rule() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let go = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = ConvSpec::new(1, 1, 1);
        let (gx, gw, gb) = conv2d_backward(&x, &spec, &w, &go).unwrap();
        assert_eq!(gx.data(), &[3.0]);
        assert_eq!(gw.data(), &[2.0]);
        assert_eq!(gb, vec![1.0]);
    }

    #[test]
    fn backward_zero_grad_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Tensor::zeros([1, 2, 4, 4]);
        let mut w = Tensor::zeros([3, 2, 3, 3]);
        fill_uniform(&mut x, 1.0, &mut rng);
        fill_uniform(&mut w, 1.0, &mut rng);
        let spec = ConvSpec::new(2, 3, 3).padding(1);
        let go = Tensor::zeros([1, 3, 4, 4]);
        let (gx, gw, gb) = conv2d_backward(&x, &spec, &w, &go).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parallel_and_sequential_paths_match_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = Tensor::zeros([2, 4, 7, 6]);
        let mut w = Tensor::zeros([6, 2, 3, 3]);
        fill_uniform(&mut x, 1.0, &mut rng);
        fill_uniform(&mut w, 1.0, &mut rng);
        let bias: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let spec = ConvSpec::new(4, 6, 3).stride(2).padding(1).groups(2);
        let a = conv2d(&x, &spec, &w, &bias).unwrap();
        let b = conv2d_seq(&x, &spec, &w, &bias).unwrap();
        assert_eq!(a, b);
        let go = Tensor::filled(a.shape(), 0.25);
        let (gx0, gw0, gb0) = conv2d_backward(&x, &spec, &w, &go).unwrap();
        let (gx1, gw1, gb1) = conv2d_backward_seq(&x, &spec, &w, &go).unwrap();
        assert_eq!(gx0, gx1);
        assert_eq!(gw0, gw1);
        assert_eq!(gb0, gb1);
    }

    #[test]
    fn depthwise_identity_then_pointwise_swap() {
        let x = Tensor::from_fn([1, 2, 2, 2], |_, c, i, j| (c * 10 + i * 2 + j) as f64);
        let dw_spec = no_bias(ConvSpec::new(2, 2, 3).padding(1).groups(2));
        let dw_w = Tensor::from_fn([2, 1, 3, 3], |_, _, i, j| if i == 1 && j == 1 { 1.0 } else { 0.0 });
        let pw_spec = no_bias(ConvSpec::new(2, 2, 1));
        // pointwise [[0,1],[1,0]] swaps channels
        let pw_w = Tensor::from_vec([2, 2, 1, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = depthwise_separable(&x, &dw_spec, &dw_w, &[], &pw_spec, &pw_w, &[]).unwrap();
        assert_eq!(y.plane_slice(0, 0), x.plane_slice(0, 1));
        assert_eq!(y.plane_slice(0, 1), x.plane_slice(0, 0));
    }

    #[test]
    fn depthwise_separable_equals_two_stage_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = Tensor::zeros([2, 3, 5, 5]);
        let mut dw_w = Tensor::zeros([3, 1, 3, 3]);
        let mut pw_w = Tensor::zeros([4, 3, 1, 1]);
        fill_uniform(&mut x, 1.0, &mut rng);
        fill_uniform(&mut dw_w, 1.0, &mut rng);
        fill_uniform(&mut pw_w, 1.0, &mut rng);
        let dw_b = vec![0.1, -0.2, 0.3];
        let pw_b = vec![0.5, 0.0, -0.5, 0.25];
        let dw_spec = ConvSpec::new(3, 3, 3).padding(1).groups(3);
        let pw_spec = ConvSpec::new(3, 4, 1);
        let fused =
            depthwise_separable(&x, &dw_spec, &dw_w, &dw_b, &pw_spec, &pw_w, &pw_b).unwrap();
        let mid = conv2d(&x, &dw_spec, &dw_w, &dw_b).unwrap();
        let two_stage = conv2d(&mid, &pw_spec, &pw_w, &pw_b).unwrap();
        assert_eq!(fused, two_stage);
    }

    #[test]
    fn depthwise_separable_rejects_bad_stages() {
        let x = Tensor::zeros([1, 2, 3, 3]);
        let dw_bad = ConvSpec::new(2, 2, 3).padding(1); // groups = 1
        let pw = ConvSpec::new(2, 2, 1);
        let w = Tensor::zeros([2, 2, 3, 3]);
        let pw_w = Tensor::zeros([2, 2, 1, 1]);
        assert!(matches!(
            depthwise_separable(&x, &dw_bad, &w, &[0.0; 2], &pw, &pw_w, &[0.0; 2]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn param_count_formula() {
        // 3x3 conv 16->32 with bias: 3*3*16*32 + 32 = 4640
        assert_eq!(ConvSpec::new(16, 32, 3).param_count(), 4640);
        // 1x1 conv 64->64 with bias: 64*64 + 64 = 4160
        assert_eq!(ConvSpec::new(64, 64, 1).param_count(), 4160);
    }
}
