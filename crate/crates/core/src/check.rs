//! Named gradient-check scopes: every differentiable operator and module
//! is swept against the central-difference oracle across many seeds.
//!
//! Each scope builds a small randomized instance, computes the analytic
//! gradient of a probe-weighted scalar (`L = sum(probe .* y)`), and
//! compares it element by element with central differences. Relative
//! errors use a unit absolute floor, matching
//! [`crate::tensor::max_rel_error`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{
    attention_fuse, attention_fuse_backward, branch3_backward, branch3_channel_weight, BranchMask,
    Cbs, ChannelAffine, Conv2dLayer, GradStore, MsDdsp, MsDdspConfig, NeckConfig, NeckModule,
    NeckVariant, ParamId, ParamStore, PyramidFeatures,
};
use crate::tensor::{
    conv2d, conv2d_backward, fill_uniform, finite_diff_grad, gap, max_rel_error, silu,
    silu_backward, upsample_nearest, upsample_nearest_backward, ConvSpec, Tensor,
};

/// Central-difference step.
pub const GRADCHECK_EPSILON: f64 = 1e-5;
/// Worst acceptable relative error (unit absolute floor).
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Seed count used by the acceptance gate.
pub const DEFAULT_GRADCHECK_SEEDS: u64 = 20;

/// Every checkable scope, in report order.
pub const SCOPES: [&str; 16] = [
    "conv2d",
    "conv2d-strided",
    "conv2d-dilated",
    "conv2d-grouped",
    "depthwise-separable",
    "gap",
    "silu",
    "upsample-nearest",
    "channel-affine",
    "cbs-block",
    "softmax-fuse",
    "se-gate",
    "msddsp-block",
    "neck-topdown",
    "neck-panet",
    "neck-epa",
];

#[derive(Debug, Clone, Serialize)]
pub struct ScopeReport {
    pub name: String,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub scopes: Vec<ScopeReport>,
    pub passed: bool,
}

fn rand_tensor(shape: [usize; 4], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    fill_uniform(&mut t, bound, rng);
    t
}

fn probe_loss(y: &Tensor, probe: &Tensor) -> Result<f64> {
    if y.shape() != probe.shape() {
        return Err(Error::Dimension(format!(
            "probe shape {:?} does not match output {:?}",
            probe.shape(),
            y.shape()
        )));
    }
    Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
}

/// Scalar twin of [`max_rel_error`].
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central-difference check of sampled parameter elements against the
/// analytic gradients accumulated in `gs`.
fn param_fd_worst<F>(
    ps: &mut ParamStore,
    samples: &[(ParamId, usize)],
    gs: &GradStore,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    for &(id, idx) in samples {
        let orig = ps.get(id).data()[idx];
        ps.get_mut(id).data_mut()[idx] = orig + GRADCHECK_EPSILON;
        let fp = f(ps)?;
        ps.get_mut(id).data_mut()[idx] = orig - GRADCHECK_EPSILON;
        let fm = f(ps)?;
        ps.get_mut(id).data_mut()[idx] = orig;
        let fd = (fp - fm) / (2.0 * GRADCHECK_EPSILON);
        worst = worst.max(rel_err(gs.get(id).data()[idx], fd));
    }
    Ok(worst)
}

/// Every `stride`-th parameter tensor, element 0.
fn sample_params(ps: &ParamStore, stride: usize) -> Vec<(ParamId, usize)> {
    ps.ids()
        .enumerate()
        .filter(|(k, _)| k % stride == 0)
        .map(|(_, id)| (id, 0))
        .collect()
}

/// Input, weight, and bias gradients of a single convolution.
fn conv_scope(spec: ConvSpec, in_shape: [usize; 4], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(in_shape, 1.0, &mut rng);
    let w = rand_tensor(spec.weight_shape(), 0.5, &mut rng);
    let bias_t = rand_tensor([1, 1, 1, spec.out_channels], 0.5, &mut rng);
    let bias = bias_t.data().to_vec();
    let probe = rand_tensor(spec.out_shape(&x)?, 1.0, &mut rng);
    let (gx, gw, gb) = conv2d_backward(&x, &spec, &w, &probe)?;
    let mut worst = max_rel_error(
        &gx,
        &finite_diff_grad(
            |t| probe_loss(&conv2d(t, &spec, &w, &bias)?, &probe),
            &x,
            GRADCHECK_EPSILON,
        )?,
    );
    worst = worst.max(max_rel_error(
        &gw,
        &finite_diff_grad(
            |t| probe_loss(&conv2d(&x, &spec, t, &bias)?, &probe),
            &w,
            GRADCHECK_EPSILON,
        )?,
    ));
    if spec.has_bias {
        let gb_t = Tensor::from_vec([1, 1, 1, spec.out_channels], gb)?;
        worst = worst.max(max_rel_error(
            &gb_t,
            &finite_diff_grad(
                |t| probe_loss(&conv2d(&x, &spec, &w, t.data())?, &probe),
                &bias_t,
                GRADCHECK_EPSILON,
            )?,
        ));
    }
    Ok(worst)
}

/// Depthwise stage chained into a pointwise stage.
fn dwsep_scope(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dw = ConvSpec::new(4, 4, 3).groups(4).padding(1).bias(false);
    let pw = ConvSpec::new(4, 4, 1).bias(false);
    let x = rand_tensor([1, 4, 5, 5], 1.0, &mut rng);
    let dw_w = rand_tensor(dw.weight_shape(), 0.5, &mut rng);
    let pw_w = rand_tensor(pw.weight_shape(), 0.5, &mut rng);
    let probe = rand_tensor([1, 4, 5, 5], 1.0, &mut rng);
    let mid = conv2d(&x, &dw, &dw_w, &[])?;
    let (g_mid, g_pw_w, _) = conv2d_backward(&mid, &pw, &pw_w, &probe)?;
    let (gx, g_dw_w, _) = conv2d_backward(&x, &dw, &dw_w, &g_mid)?;
    let f = |xx: &Tensor, dww: &Tensor, pww: &Tensor| -> Result<f64> {
        let m = conv2d(xx, &dw, dww, &[])?;
        probe_loss(&conv2d(&m, &pw, pww, &[])?, &probe)
    };
    let mut worst = max_rel_error(
        &gx,
        &finite_diff_grad(|t| f(t, &dw_w, &pw_w), &x, GRADCHECK_EPSILON)?,
    );
    worst = worst.max(max_rel_error(
        &g_dw_w,
        &finite_diff_grad(|t| f(&x, t, &pw_w), &dw_w, GRADCHECK_EPSILON)?,
    ));
    worst = worst.max(max_rel_error(
        &g_pw_w,
        &finite_diff_grad(|t| f(&x, &dw_w, t), &pw_w, GRADCHECK_EPSILON)?,
    ));
    Ok(worst)
}

fn gap_scope(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor([2, 5, 4, 3], 1.0, &mut rng);
    let probe = rand_tensor([2, 5, 1, 1], 1.0, &mut rng);
    let [n_batch, channels, h, w] = x.shape();
    let mut gx = Tensor::zeros_like(&x);
    for n in 0..n_batch {
        for c in 0..channels {
            let g = probe.at(n, c, 0, 0) / (h * w) as f64;
            gx.plane_slice_mut(n, c).fill(g);
        }
    }
    let fd = finite_diff_grad(
        |t| probe_loss(&gap(t)?, &probe),
        &x,
        GRADCHECK_EPSILON,
    )?;
    Ok(max_rel_error(&gx, &fd))
}

fn silu_scope(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor([2, 3, 4, 4], 3.0, &mut rng);
    let probe = rand_tensor([2, 3, 4, 4], 1.0, &mut rng);
    let gx = silu_backward(&x, &probe)?;
    let fd = finite_diff_grad(
        |t| probe_loss(&silu(t), &probe),
        &x,
        GRADCHECK_EPSILON,
    )?;
    Ok(max_rel_error(&gx, &fd))
}

fn upsample_scope(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor([1, 3, 3, 4], 1.0, &mut rng);
    let probe = rand_tensor([1, 3, 6, 8], 1.0, &mut rng);
    let gx = upsample_nearest_backward(&probe, 2)?;
    let fd = finite_diff_grad(
        |t| probe_loss(&upsample_nearest(t, 2)?, &probe),
        &x,
        GRADCHECK_EPSILON,
    )?;
    Ok(max_rel_error(&gx, &fd))
}

fn affine_scope(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new(seed.wrapping_add(101));
    let layer = ChannelAffine::new(&mut ps, "aff", 3)?;
    let x = rand_tensor([2, 3, 3, 3], 1.0, &mut rng);
    let probe = rand_tensor([2, 3, 3, 3], 1.0, &mut rng);
    let mut gs = GradStore::zeros_like(&ps);
    let gx = layer.backward(&ps, &x, &probe, &mut gs)?;
    let mut worst = max_rel_error(
        &gx,
        &finite_diff_grad(
            |t| probe_loss(&layer.forward(&ps, t)?, &probe),
            &x,
            GRADCHECK_EPSILON,
        )?,
    );
    let samples = sample_params(&ps, 1);
    worst = worst.max(param_fd_worst(&mut ps, &samples, &gs, |p| {
        probe_loss(&layer.forward(p, &x)?, &probe)
    })?);
    Ok(worst)
}

fn cbs_scope(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new(seed.wrapping_add(202));
    let block = Cbs::new(&mut ps, "cbs", ConvSpec::new(3, 4, 3).padding(1))?;
    let x = rand_tensor([1, 3, 4, 4], 1.0, &mut rng);
    let probe = rand_tensor([1, 4, 4, 4], 1.0, &mut rng);
    let (_, cache) = block.forward(&ps, &x)?;
    let mut gs = GradStore::zeros_like(&ps);
    let gx = block.backward(&ps, &cache, &probe, &mut gs)?;
    let mut worst = max_rel_error(
        &gx,
        &finite_diff_grad(
            |t| probe_loss(&block.forward(&ps, t)?.0, &probe),
            &x,
            GRADCHECK_EPSILON,
        )?,
    );
    let samples = sample_params(&ps, 1);
    worst = worst.max(param_fd_worst(&mut ps, &samples, &gs, |p| {
        probe_loss(&block.forward(p, &x)?.0, &probe)
    })?);
    Ok(worst)
}

/// The pooled-statistic softmax fusion, checked per branch input.
fn fuse_scope(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 6, 3, 3];
    let branches = [
        rand_tensor(shape, 1.0, &mut rng),
        rand_tensor(shape, 1.0, &mut rng),
        rand_tensor(shape, 1.0, &mut rng),
        rand_tensor(shape, 1.0, &mut rng),
    ];
    let probe = rand_tensor([1, 24, 3, 3], 1.0, &mut rng);
    let (_, weights) = attention_fuse(&branches)?;
    let grads = attention_fuse_backward(&branches, &weights, &probe)?;
    let mut worst: f64 = 0.0;
    for k in 0..4 {
        let fd = finite_diff_grad(
            |t| {
                let mut alt = branches.clone();
                alt[k] = t.clone();
                probe_loss(&attention_fuse(&alt)?.0, &probe)
            },
            &branches[k],
            GRADCHECK_EPSILON,
        )?;
        worst = worst.max(max_rel_error(&grads[k], &fd));
    }
    Ok(worst)
}

/// The squeeze-excite channel gate.
fn se_scope(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new(seed.wrapping_add(303));
    let down = Conv2dLayer::new(&mut ps, "se.down", ConvSpec::new(4, 2, 1))?;
    let up = Conv2dLayer::new(&mut ps, "se.up", ConvSpec::new(2, 4, 1))?;
    let x = rand_tensor([1, 4, 3, 3], 1.0, &mut rng);
    let probe = rand_tensor([1, 4, 3, 3], 1.0, &mut rng);
    let (_, cache) = branch3_channel_weight(&ps, &down, &up, &x)?;
    let mut gs = GradStore::zeros_like(&ps);
    let gx = branch3_backward(&ps, &down, &up, &cache, &probe, &mut gs)?;
    let mut worst = max_rel_error(
        &gx,
        &finite_diff_grad(
            |t| probe_loss(&branch3_channel_weight(&ps, &down, &up, t)?.0, &probe),
            &x,
            GRADCHECK_EPSILON,
        )?,
    );
    let samples = sample_params(&ps, 1);
    worst = worst.max(param_fd_worst(&mut ps, &samples, &gs, |p| {
        probe_loss(&branch3_channel_weight(p, &down, &up, &x)?.0, &probe)
    })?);
    Ok(worst)
}

/// The whole decoupled bottleneck block: input gradient plus sampled
/// parameter gradients.
fn msddsp_scope(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new(seed.wrapping_add(404));
    let block = MsDdsp::new(&mut ps, "blk", MsDdspConfig::new(16))?;
    let x = rand_tensor([1, 16, 4, 4], 1.0, &mut rng);
    let probe = rand_tensor([1, 16, 4, 4], 1.0, &mut rng);
    let (_, cache) = block.forward(&ps, &x, BranchMask::all())?;
    let mut gs = GradStore::zeros_like(&ps);
    let gx = block.backward(&ps, &cache, &probe, &mut gs)?;
    let mut worst = max_rel_error(
        &gx,
        &finite_diff_grad(
            |t| probe_loss(&block.forward(&ps, t, BranchMask::all())?.0, &probe),
            &x,
            GRADCHECK_EPSILON,
        )?,
    );
    let samples = sample_params(&ps, 5);
    worst = worst.max(param_fd_worst(&mut ps, &samples, &gs, |p| {
        probe_loss(&block.forward(p, &x, BranchMask::all())?.0, &probe)
    })?);
    Ok(worst)
}

/// A full neck: gradients with respect to every input level plus sampled
/// parameters. The probe covers all output levels at once.
fn neck_scope(variant: NeckVariant, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new(seed.wrapping_add(505));
    let widths = [(2, 4), (3, 8), (4, 12), (5, 16)];
    let cfg = NeckConfig::new(variant, 8);
    let neck = NeckModule::new(&mut ps, "neck", &cfg, &widths)?;
    let mut inputs: BTreeMap<usize, Tensor> = BTreeMap::new();
    for (level, w) in widths {
        let side = 1 << (5 - level);
        inputs.insert(level, rand_tensor([1, w, side, side], 1.0, &mut rng));
    }
    let (out, cache) = neck.forward(&ps, &PyramidFeatures::new(inputs.clone())?)?;
    let probes: BTreeMap<usize, Tensor> = out
        .iter()
        .map(|(level, t)| (level, rand_tensor(t.shape(), 1.0, &mut rng)))
        .collect();
    let loss_of = |p: &ParamStore, levels: &BTreeMap<usize, Tensor>| -> Result<f64> {
        let (o, _) = neck.forward(p, &PyramidFeatures::new(levels.clone())?)?;
        let mut total = 0.0;
        for (level, t) in o.iter() {
            total += probe_loss(t, &probes[&level])?;
        }
        Ok(total)
    };
    let mut gs = GradStore::zeros_like(&ps);
    let grad_c = neck.backward(&ps, &cache, &probes, &mut gs)?;
    let mut worst: f64 = 0.0;
    for (&level, x) in &inputs {
        let analytic = match grad_c.get(&level) {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(x),
        };
        let fd = finite_diff_grad(
            |t| {
                let mut alt = inputs.clone();
                alt.insert(level, t.clone());
                loss_of(&ps, &alt)
            },
            x,
            GRADCHECK_EPSILON,
        )?;
        worst = worst.max(max_rel_error(&analytic, &fd));
    }
    let samples = sample_params(&ps, 5);
    worst = worst.max(param_fd_worst(&mut ps, &samples, &gs, |p| {
        loss_of(p, &inputs)
    })?);
    Ok(worst)
}

/// Worst relative error for one scope across `seeds` seeds.
pub fn run_scope(name: &str, seeds: u64) -> Result<ScopeReport> {
    if seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let err = match name {
            "conv2d" => conv_scope(ConvSpec::new(3, 4, 3).padding(1), [2, 3, 6, 5], seed)?,
            "conv2d-strided" => {
                conv_scope(ConvSpec::new(3, 2, 3).stride(2).padding(1), [1, 3, 7, 6], seed)?
            }
            "conv2d-dilated" => {
                conv_scope(ConvSpec::new(2, 2, 3).dilation(2).padding(2), [1, 2, 7, 7], seed)?
            }
            "conv2d-grouped" => {
                conv_scope(ConvSpec::new(4, 4, 3).groups(2).padding(1), [1, 4, 5, 5], seed)?
            }
            "depthwise-separable" => dwsep_scope(seed)?,
            "gap" => gap_scope(seed)?,
            "silu" => silu_scope(seed)?,
            "upsample-nearest" => upsample_scope(seed)?,
            "channel-affine" => affine_scope(seed)?,
            "cbs-block" => cbs_scope(seed)?,
            "softmax-fuse" => fuse_scope(seed)?,
            "se-gate" => se_scope(seed)?,
            "msddsp-block" => msddsp_scope(seed)?,
            "neck-topdown" => neck_scope(NeckVariant::TopdownFpn, seed)?,
            "neck-panet" => neck_scope(NeckVariant::Panet, seed)?,
            "neck-epa" => neck_scope(NeckVariant::EpaFpn, seed)?,
            other => {
                return Err(Error::Config(format!("unknown gradcheck scope {other:?}")));
            }
        };
        worst = worst.max(err);
    }
    Ok(ScopeReport {
        name: name.to_string(),
        seeds,
        max_rel_err: worst,
        passed: worst <= GRADCHECK_TOLERANCE,
    })
}

/// Run every scope; the report passes only if all scopes pass.
pub fn run_all(seeds: u64) -> Result<GradCheckReport> {
    let scopes: Vec<ScopeReport> = SCOPES
        .iter()
        .map(|name| run_scope(name, seeds))
        .collect::<Result<_>>()?;
    let passed = scopes.iter().all(|s| s.passed);
    Ok(GradCheckReport {
        epsilon: GRADCHECK_EPSILON,
        tolerance: GRADCHECK_TOLERANCE,
        scopes,
        passed,
    })
}
