//! Underwater optical degradation.
//!
//! The degraded image is a sum of three components: the direct signal
//! attenuated by `e^{-eta * d}` per channel, a forward-scattered copy (a
//! Gaussian-blurred version of the attenuated signal with a small mixing
//! weight), and veiling light `b_inf * (1 - e^{-eta * d})`, plus seeded
//! zero-mean Gaussian sensor noise. Red attenuates fastest with the default
//! coefficients, which is what gives underwater footage its blue-green cast.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Water and sensor parameters for [`degrade`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpticalParams {
    /// Per-channel attenuation coefficient (1/m), RGB order.
    pub eta: [f64; 3],
    /// Scene distance (m).
    pub d: f64,
    /// Veiling light color, per-channel in `[0, 1]`.
    pub b_inf: [f64; 3],
    /// Forward-scatter blur std (pixels).
    pub fs_sigma: f64,
    /// Forward-scatter mixing weight.
    pub fs_weight: f64,
    /// Sensor noise std.
    pub noise_sigma: f64,
}

impl Default for OpticalParams {
    fn default() -> Self {
        Self {
            eta: [0.6, 0.20, 0.08],
            d: 2.0,
            b_inf: [0.08, 0.35, 0.45],
            fs_sigma: 1.5,
            fs_weight: 0.1,
            noise_sigma: 0.01,
        }
    }
}

impl OpticalParams {
    pub fn validate(&self) -> Result<()> {
        if self.eta.iter().any(|&e| e < 0.0) {
            return Err(Error::Config(format!(
                "attenuation must be non-negative, got {:?}",
                self.eta
            )));
        }
        if self.d < 0.0 {
            return Err(Error::Config(format!("distance must be >= 0, got {}", self.d)));
        }
        if self.b_inf.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
            return Err(Error::Config(format!(
                "veiling light must be in [0, 1], got {:?}",
                self.b_inf
            )));
        }
        if self.fs_sigma < 0.0 || self.fs_weight < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config(
                "scatter and noise parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Per-channel direct transmission `e^{-eta * d}`.
    pub fn transmission(&self) -> [f64; 3] {
        self.eta.map(|e| (-e * self.d).exp())
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 * sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Separable Gaussian blur with replicated edges; `sigma <= 0` is identity.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Tensor {
    let taps = gaussian_kernel(sigma);
    if taps.len() == 1 {
        return x.clone();
    }
    let radius = (taps.len() / 2) as i64;
    let [n, c, h, w] = x.shape();
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut rows = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in taps.iter().enumerate() {
                        let jj = clamp(j as i64 + k as i64 - radius, w);
                        acc += t * x.at(ni, ci, i, jj);
                    }
                    *rows.at_mut(ni, ci, i, j) = acc;
                }
            }
        }
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in taps.iter().enumerate() {
                        let ii = clamp(i as i64 + k as i64 - radius, h);
                        acc += t * rows.at(ni, ci, ii, j);
                    }
                    *out.at_mut(ni, ci, i, j) = acc;
                }
            }
        }
    }
    out
}

/// Apply the three-component degradation model to a clean `[1, 3, H, W]`
/// image in `[0, 1]`; deterministic per seed, output clamped to `[0, 1]`.
pub fn degrade(clean: &Tensor, p: &OpticalParams, seed: u64) -> Result<Tensor> {
    p.validate()?;
    let [n, c, _h, _w] = clean.shape();
    if c != 3 {
        return Err(Error::Dimension(format!(
            "degrade wants 3 channels, got {c}"
        )));
    }
    if clean.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Value("clean image values must lie in [0, 1]".into()));
    }
    let t = p.transmission();
    let mut attenuated = Tensor::zeros_like(clean);
    for ni in 0..n {
        for ci in 0..c {
            let src = clean.plane_slice(ni, ci);
            let dst = attenuated.plane_slice_mut(ni, ci);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s * t[ci];
            }
        }
    }
    let mut out = attenuated.clone();
    if p.fs_weight > 0.0 {
        let blurred = gaussian_blur(&attenuated, p.fs_sigma);
        for (o, b) in out.data_mut().iter_mut().zip(blurred.iter()) {
            *o += p.fs_weight * b;
        }
    }
    for ni in 0..n {
        for ci in 0..c {
            let veil = p.b_inf[ci] * (1.0 - t[ci]);
            for v in out.plane_slice_mut(ni, ci) {
                *v += veil;
            }
        }
    }
    if p.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, p.noise_sigma)
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out.ensure_finite("degrade")?;
    Ok(out)
}
