//! Four-branch split-attention bottleneck.
//!
//! The block adjusts channels with a 1x1 CBS, splits them into four equal
//! groups, routes each group through a heterogeneous branch (progressive
//! dilation, depthwise-separable, channel gating, identity), then fuses the
//! branch outputs with per-channel softmax weights computed from pooled
//! statistics, and finishes with a second 1x1 CBS.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{Cbs, CbsCache, Conv2dLayer, GradStore, ParamStore};
use crate::tensor::{
    add, concat_channels, gap, sigmoid, silu, silu_backward, softmax, split_channels, ConvSpec,
    Tensor,
};

/// Static configuration of the bottleneck.
#[derive(Debug, Clone)]
pub struct MsDdspConfig {
    /// Total channel count C; each branch handles C/4.
    pub channels: usize,
    /// Dilation schedule of branch 1's staged 3x3 convolutions.
    pub dilations: Vec<usize>,
    /// Squeeze ratio of branch 3's gating bottleneck.
    pub squeeze_ratio: usize,
}

impl MsDdspConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            dilations: vec![1, 2, 3],
            squeeze_ratio: 4,
        }
    }

    pub fn branch_channels(&self) -> usize {
        self.channels / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Divisibility {
                channels: self.channels,
                parts: 4,
            });
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "dilation schedule must be non-empty positive, got {:?}",
                self.dilations
            )));
        }
        if self.squeeze_ratio == 0 || self.branch_channels() % self.squeeze_ratio != 0 {
            return Err(Error::Config(format!(
                "squeeze ratio {} must divide branch width {}",
                self.squeeze_ratio,
                self.branch_channels()
            )));
        }
        Ok(())
    }
}

/// Which branches contribute; a disabled branch's output is replaced by
/// zeros (the ablation-grid mechanism).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchMask {
    pub enabled: [bool; 4],
}

impl Default for BranchMask {
    fn default() -> Self {
        Self::all()
    }
}

impl BranchMask {
    pub fn all() -> Self {
        Self {
            enabled: [true; 4],
        }
    }

    /// Full set minus one branch (1-based index, matching the branch names).
    pub fn without(branch: usize) -> Result<Self> {
        if !(1..=4).contains(&branch) {
            return Err(Error::Config(format!("branch index {branch} out of 1..=4")));
        }
        let mut enabled = [true; 4];
        enabled[branch - 1] = false;
        Ok(Self { enabled })
    }

    /// Compact tag such as "1111" or "1011" (branch order 1..4).
    pub fn tag(&self) -> String {
        self.enabled
            .iter()
            .map(|&e| if e { '1' } else { '0' })
            .collect()
    }
}

/// Pooled statistics S and softmax weights beta per branch, each shaped
/// (N, C/4, 1, 1).
pub struct BranchWeights {
    pub stats: [Tensor; 4],
    pub beta: [Tensor; 4],
}

/// Mean beta per branch over batch and channels — the radar-plot summary.
pub fn branch_weight_summary(w: &BranchWeights) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (dst, b) in out.iter_mut().zip(&w.beta) {
        *dst = b.sum() / b.numel() as f64;
    }
    out
}

/// JSON row for the branch-weight dump.
#[derive(Serialize)]
pub struct BranchWeightRecord {
    pub input: String,
    pub mean_beta: [f64; 4],
}

/// Combined receptive field of stacked k x k convolutions with the given
/// dilation schedule: RF grows by dilation * (k - 1) per stage.
pub fn receptive_field(dilations: &[usize], kernel: usize) -> usize {
    1 + dilations.iter().map(|d| d * (kernel - 1)).sum::<usize>()
}

pub struct Branch1Cache {
    /// Input to each stage, in order.
    pub inputs: Vec<Tensor>,
}

/// Branch 1: staged receptive-field expansion. Each stage averages its input
/// with a dilated 3x3 convolution of it: h <- 0.5 * (h + conv_d(h)), so
/// identity kernels compose to the identity while the receptive field still
/// grows by 2 * dilation per stage.
pub fn branch1_multiscale(
    ps: &ParamStore,
    stages: &[Conv2dLayer],
    x1: &Tensor,
) -> Result<(Tensor, Branch1Cache)> {
    let mut h = x1.clone();
    let mut inputs = Vec::with_capacity(stages.len());
    for stage in stages {
        inputs.push(h.clone());
        let c = stage.forward(ps, &h)?;
        if c.shape() != h.shape() {
            return Err(Error::Geometry(format!(
                "branch1 stage {} changed shape {:?} -> {:?}; stages must preserve size",
                stage.name,
                h.shape(),
                c.shape()
            )));
        }
        h = add(&h, &c)?.scale(0.5);
    }
    Ok((h, Branch1Cache { inputs }))
}

pub fn branch1_backward(
    ps: &ParamStore,
    stages: &[Conv2dLayer],
    cache: &Branch1Cache,
    grad_out: &Tensor,
    gs: &mut GradStore,
) -> Result<Tensor> {
    let mut g = grad_out.clone();
    for (stage, input) in stages.iter().zip(&cache.inputs).rev() {
        let half = g.scale(0.5);
        let g_conv = stage.backward(ps, input, &half, gs)?;
        g = add(&half, &g_conv)?;
    }
    Ok(g)
}

pub struct Branch2Cache {
    pub x: Tensor,
    pub mid: Tensor,
}

/// Branch 2: spatial-channel decorrelation as depthwise 3x3 then pointwise
/// 1x1 — exactly the depthwise-separable composition.
pub fn branch2_decorrelate(
    ps: &ParamStore,
    dw: &Conv2dLayer,
    pw: &Conv2dLayer,
    x2: &Tensor,
) -> Result<(Tensor, Branch2Cache)> {
    if dw.spec.groups != dw.spec.in_channels {
        return Err(Error::Config(format!(
            "branch2 depthwise stage needs groups == channels, got {}",
            dw.spec.groups
        )));
    }
    let mid = dw.forward(ps, x2)?;
    let y = pw.forward(ps, &mid)?;
    Ok((
        y,
        Branch2Cache {
            x: x2.clone(),
            mid,
        },
    ))
}

pub fn branch2_backward(
    ps: &ParamStore,
    dw: &Conv2dLayer,
    pw: &Conv2dLayer,
    cache: &Branch2Cache,
    grad_out: &Tensor,
    gs: &mut GradStore,
) -> Result<Tensor> {
    let g_mid = pw.backward(ps, &cache.mid, grad_out, gs)?;
    dw.backward(ps, &cache.x, &g_mid, gs)
}

pub struct Branch3Cache {
    pub x: Tensor,
    /// Pooled statistics, squeeze output, its SiLU, the expand output, and
    /// the sigmoid gate, in forward order.
    pub pooled: Tensor,
    pub squeezed: Tensor,
    pub activated: Tensor,
    pub expanded: Tensor,
    pub gate: Tensor,
}

/// Branch 3: squeeze-excite style per-channel gating — pool, bottleneck
/// down, SiLU, expand, sigmoid, rescale.
pub fn branch3_channel_weight(
    ps: &ParamStore,
    down: &Conv2dLayer,
    up: &Conv2dLayer,
    x3: &Tensor,
) -> Result<(Tensor, Branch3Cache)> {
    let pooled = gap(x3)?;
    let squeezed = down.forward(ps, &pooled)?;
    let activated = silu(&squeezed);
    let expanded = up.forward(ps, &activated)?;
    let gate = sigmoid(&expanded);
    let mut y = Tensor::zeros(x3.shape());
    for n in 0..x3.batch() {
        for c in 0..x3.channels() {
            let g = gate.at(n, c, 0, 0);
            let src = x3.plane_slice(n, c);
            let dst = y.plane_slice_mut(n, c);
            for (d, v) in dst.iter_mut().zip(src) {
                *d = g * v;
            }
        }
    }
    Ok((
        y,
        Branch3Cache {
            x: x3.clone(),
            pooled,
            squeezed,
            activated,
            expanded,
            gate,
        },
    ))
}

pub fn branch3_backward(
    ps: &ParamStore,
    down: &Conv2dLayer,
    up: &Conv2dLayer,
    cache: &Branch3Cache,
    grad_out: &Tensor,
    gs: &mut GradStore,
) -> Result<Tensor> {
    let x3 = &cache.x;
    if grad_out.shape() != x3.shape() {
        return Err(Error::Dimension(format!(
            "branch3 grad shape {:?} does not match input {:?}",
            grad_out.shape(),
            x3.shape()
        )));
    }
    let plane = x3.plane() as f64;
    let mut grad_x = Tensor::zeros(x3.shape());
    let mut grad_gate = Tensor::zeros(cache.gate.shape());
    for n in 0..x3.batch() {
        for c in 0..x3.channels() {
            let g = cache.gate.at(n, c, 0, 0);
            let xs = x3.plane_slice(n, c);
            let gout = grad_out.plane_slice(n, c);
            let gx = grad_x.plane_slice_mut(n, c);
            let mut acc = 0.0;
            for ((dst, go), v) in gx.iter_mut().zip(gout).zip(xs) {
                *dst = g * go;
                acc += go * v;
            }
            *grad_gate.at_mut(n, c, 0, 0) = acc;
        }
    }
    // Through the sigmoid: dg/du = g * (1 - g).
    let mut grad_expanded = Tensor::zeros(cache.expanded.shape());
    for (dst, (gg, g)) in grad_expanded
        .data_mut()
        .iter_mut()
        .zip(grad_gate.data().iter().zip(cache.gate.data()))
    {
        *dst = gg * g * (1.0 - g);
    }
    let grad_activated = up.backward(ps, &cache.activated, &grad_expanded, gs)?;
    let grad_squeezed = silu_backward(&cache.squeezed, &grad_activated)?;
    let grad_pooled = down.backward(ps, &cache.pooled, &grad_squeezed, gs)?;
    // Through the pooling: each spatial position shares grad / (H*W).
    for n in 0..x3.batch() {
        for c in 0..x3.channels() {
            let gp = grad_pooled.at(n, c, 0, 0) / plane;
            for v in grad_x.plane_slice_mut(n, c) {
                *v += gp;
            }
        }
    }
    Ok(grad_x)
}

/// Branch 4: high-fidelity detail preservation — the bitwise identity.
pub fn branch4_identity(x4: &Tensor) -> Tensor {
    x4.clone()
}

/// Softmax-weighted merge of the four branch outputs (per batch element and
/// per aligned channel index), concatenated back to full width.
pub fn attention_fuse(branches: &[Tensor; 4]) -> Result<(Tensor, BranchWeights)> {
    let shape = branches[0].shape();
    for b in branches.iter().skip(1) {
        if b.shape() != shape {
            return Err(Error::Dimension(format!(
                "branch shapes differ: {:?} vs {:?}",
                shape,
                b.shape()
            )));
        }
    }
    let stats = [
        gap(&branches[0])?,
        gap(&branches[1])?,
        gap(&branches[2])?,
        gap(&branches[3])?,
    ];
    let mut beta = [
        Tensor::zeros(stats[0].shape()),
        Tensor::zeros(stats[0].shape()),
        Tensor::zeros(stats[0].shape()),
        Tensor::zeros(stats[0].shape()),
    ];
    let (n_batch, channels) = (shape[0], shape[1]);
    for n in 0..n_batch {
        for c in 0..channels {
            let row = [
                stats[0].at(n, c, 0, 0),
                stats[1].at(n, c, 0, 0),
                stats[2].at(n, c, 0, 0),
                stats[3].at(n, c, 0, 0),
            ];
            let w = softmax(&row)?;
            for (k, b) in beta.iter_mut().enumerate() {
                *b.at_mut(n, c, 0, 0) = w[k];
            }
        }
    }
    let mut weighted = Vec::with_capacity(4);
    for (x, b) in branches.iter().zip(&beta) {
        let mut y = Tensor::zeros(shape);
        for n in 0..n_batch {
            for c in 0..channels {
                let w = b.at(n, c, 0, 0);
                let src = x.plane_slice(n, c);
                let dst = y.plane_slice_mut(n, c);
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = w * v;
                }
            }
        }
        weighted.push(y);
    }
    let fused = concat_channels(&weighted)?;
    Ok((fused, BranchWeights { stats, beta }))
}

/// Gradient of [`attention_fuse`] with respect to each branch input.
///
/// With t_m = <grad_m, x_m> per (batch, channel) and tau = sum_m beta_m t_m,
/// the chain through the pooled-statistic softmax gives
/// dL/dx_n = beta_n * grad_n + beta_n * (t_n - tau) / (H*W).
pub fn attention_fuse_backward(
    branches: &[Tensor; 4],
    weights: &BranchWeights,
    grad_fused: &Tensor,
) -> Result<[Tensor; 4]> {
    let shape = branches[0].shape();
    let expected = [shape[0], shape[1] * 4, shape[2], shape[3]];
    if grad_fused.shape() != expected {
        return Err(Error::Dimension(format!(
            "fused grad shape {:?} does not match {:?}",
            grad_fused.shape(),
            expected
        )));
    }
    let grads = split_channels(grad_fused, 4)?;
    let (n_batch, channels) = (shape[0], shape[1]);
    let plane = (shape[2] * shape[3]) as f64;
    // t_m per (batch, channel).
    let mut t = vec![[0.0; 4]; n_batch * channels];
    for m in 0..4 {
        for n in 0..n_batch {
            for c in 0..channels {
                let dot: f64 = grads[m]
                    .plane_slice(n, c)
                    .iter()
                    .zip(branches[m].plane_slice(n, c))
                    .map(|(g, x)| g * x)
                    .sum();
                t[n * channels + c][m] = dot;
            }
        }
    }
    let mut out = [
        Tensor::zeros(shape),
        Tensor::zeros(shape),
        Tensor::zeros(shape),
        Tensor::zeros(shape),
    ];
    for n in 0..n_batch {
        for c in 0..channels {
            let ts = &t[n * channels + c];
            let betas = [
                weights.beta[0].at(n, c, 0, 0),
                weights.beta[1].at(n, c, 0, 0),
                weights.beta[2].at(n, c, 0, 0),
                weights.beta[3].at(n, c, 0, 0),
            ];
            let tau: f64 = betas.iter().zip(ts).map(|(b, t)| b * t).sum();
            for m in 0..4 {
                let bias = betas[m] * (ts[m] - tau) / plane;
                let gsrc = grads[m].plane_slice(n, c);
                let dst = out[m].plane_slice_mut(n, c);
                for (d, g) in dst.iter_mut().zip(gsrc) {
                    *d = betas[m] * g + bias;
                }
            }
        }
    }
    Ok(out)
}

/// The full bottleneck block.
pub struct MsDdsp {
    pub cfg: MsDdspConfig,
    pub in_cbs: Cbs,
    pub b1_stages: Vec<Conv2dLayer>,
    pub b2_dw: Conv2dLayer,
    pub b2_pw: Conv2dLayer,
    pub b3_down: Conv2dLayer,
    pub b3_up: Conv2dLayer,
    pub out_cbs: Cbs,
}

pub struct MsDdspCache {
    pub in_cache: CbsCache,
    pub adjusted: Tensor,
    pub b1: Option<Branch1Cache>,
    pub b2: Option<Branch2Cache>,
    pub b3: Option<Branch3Cache>,
    /// Post-mask branch outputs, as fed to the fuse.
    pub branch_outputs: [Tensor; 4],
    pub weights: BranchWeights,
    pub fused: Tensor,
    pub out_cache: CbsCache,
    pub mask: BranchMask,
}

impl MsDdsp {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: MsDdspConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let c4 = cfg.branch_channels();
        let in_cbs = Cbs::new(ps, &format!("{name}.in"), ConvSpec::new(c, c, 1))?;
        let mut b1_stages = Vec::with_capacity(cfg.dilations.len());
        for (k, &d) in cfg.dilations.iter().enumerate() {
            b1_stages.push(Conv2dLayer::new(
                ps,
                &format!("{name}.b1.s{k}"),
                ConvSpec::new(c4, c4, 3).dilation(d).padding(d),
            )?);
        }
        let b2_dw = Conv2dLayer::new(
            ps,
            &format!("{name}.b2.dw"),
            ConvSpec::new(c4, c4, 3).groups(c4).padding(1),
        )?;
        let b2_pw = Conv2dLayer::new(ps, &format!("{name}.b2.pw"), ConvSpec::new(c4, c4, 1))?;
        let squeezed = c4 / cfg.squeeze_ratio;
        let b3_down = Conv2dLayer::new(
            ps,
            &format!("{name}.b3.down"),
            ConvSpec::new(c4, squeezed, 1),
        )?;
        let b3_up = Conv2dLayer::new(ps, &format!("{name}.b3.up"), ConvSpec::new(squeezed, c4, 1))?;
        let out_cbs = Cbs::new(ps, &format!("{name}.out"), ConvSpec::new(c, c, 1))?;
        // The fusion weights average 1/4 per branch near-symmetric init, so
        // the merged signal reaches the output stage ~4x weaker than the
        // block input; starting the output norm gain at 4 restores unit
        // scale (a normalizing layer would do this adaptively).
        ps.get_mut(out_cbs.norm.scale).data_mut().fill(4.0);
        Ok(Self {
            cfg,
            in_cbs,
            b1_stages,
            b2_dw,
            b2_pw,
            b3_down,
            b3_up,
            out_cbs,
        })
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        mask: BranchMask,
    ) -> Result<(Tensor, MsDdspCache)> {
        if x.channels() != self.cfg.channels {
            return Err(Error::Dimension(format!(
                "bottleneck expects {} channels, got {}",
                self.cfg.channels,
                x.channels()
            )));
        }
        let (adjusted, in_cache) = self.in_cbs.forward(ps, x)?;
        let xs = split_channels(&adjusted, 4)?;
        let (y1, b1) = if mask.enabled[0] {
            let (y, c) = branch1_multiscale(ps, &self.b1_stages, &xs[0])?;
            (y, Some(c))
        } else {
            (Tensor::zeros_like(&xs[0]), None)
        };
        let (y2, b2) = if mask.enabled[1] {
            let (y, c) = branch2_decorrelate(ps, &self.b2_dw, &self.b2_pw, &xs[1])?;
            (y, Some(c))
        } else {
            (Tensor::zeros_like(&xs[1]), None)
        };
        let (y3, b3) = if mask.enabled[2] {
            let (y, c) = branch3_channel_weight(ps, &self.b3_down, &self.b3_up, &xs[2])?;
            (y, Some(c))
        } else {
            (Tensor::zeros_like(&xs[2]), None)
        };
        let y4 = if mask.enabled[3] {
            branch4_identity(&xs[3])
        } else {
            Tensor::zeros_like(&xs[3])
        };
        let branch_outputs = [y1, y2, y3, y4];
        let (fused, weights) = attention_fuse(&branch_outputs)?;
        let (y, out_cache) = self.out_cbs.forward(ps, &fused)?;
        Ok((
            y,
            MsDdspCache {
                in_cache,
                adjusted,
                b1,
                b2,
                b3,
                branch_outputs,
                weights,
                fused,
                out_cache,
                mask,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &MsDdspCache,
        grad_out: &Tensor,
        gs: &mut GradStore,
    ) -> Result<Tensor> {
        let grad_fused = self.out_cbs.backward(ps, &cache.out_cache, grad_out, gs)?;
        let grads = attention_fuse_backward(&cache.branch_outputs, &cache.weights, &grad_fused)?;
        let [g1, g2, g3, g4] = grads;
        let gx1 = match &cache.b1 {
            Some(c) => branch1_backward(ps, &self.b1_stages, c, &g1, gs)?,
            None => Tensor::zeros_like(&g1),
        };
        let gx2 = match &cache.b2 {
            Some(c) => branch2_backward(ps, &self.b2_dw, &self.b2_pw, c, &g2, gs)?,
            None => Tensor::zeros_like(&g2),
        };
        let gx3 = match &cache.b3 {
            Some(c) => branch3_backward(ps, &self.b3_down, &self.b3_up, c, &g3, gs)?,
            None => Tensor::zeros_like(&g3),
        };
        let gx4 = if cache.mask.enabled[3] {
            g4
        } else {
            Tensor::zeros_like(&g4)
        };
        let grad_adjusted = concat_channels(&[gx1, gx2, gx3, gx4])?;
        self.in_cbs.backward(ps, &cache.in_cache, &grad_adjusted, gs)
    }

    pub fn param_count(&self) -> usize {
        let mut total = self.in_cbs.param_count() + self.out_cbs.param_count();
        for s in &self.b1_stages {
            total += s.param_count();
        }
        total += self.b2_dw.param_count() + self.b2_pw.param_count();
        total += self.b3_down.param_count() + self.b3_up.param_count();
        total
    }
}
