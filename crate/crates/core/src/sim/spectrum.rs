//! Radial power-spectrum analysis via a direct discrete Fourier transform.
//!
//! Row-column decomposition keeps the cost at O(N^3), which is fine at the
//! enforced N <= 128 and avoids an FFT dependency. Bin `k` collects
//! `|X[u,v]|^2 / N^2` for all frequencies whose radius rounds to `k`;
//! radii past the axis Nyquist (the corner frequencies) fold into the last
//! bin, so the bins partition the plane and Parseval holds exactly.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_SPECTRUM_SIDE: usize = 128;

/// Radial energy profile of a square single-channel image.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumProfile {
    pub side: usize,
    /// Energy per radial bin, DC first, Nyquist last.
    pub energy: Vec<f64>,
    /// Number of frequency samples contributing to each bin.
    pub counts: Vec<usize>,
}

impl SpectrumProfile {
    pub fn total_energy(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// Summed energy over bins with index in `[lo_frac, hi_frac]` of the
    /// Nyquist bin (inclusive).
    pub fn band_energy(&self, lo_frac: f64, hi_frac: f64) -> f64 {
        let top = (self.energy.len() - 1) as f64;
        let lo = (lo_frac * top).ceil() as usize;
        let hi = (hi_frac * top).floor() as usize;
        self.energy[lo..=hi.min(self.energy.len() - 1)].iter().sum()
    }

    /// High-frequency band: the top third of radii.
    pub fn high_band_energy(&self) -> f64 {
        self.band_energy(2.0 / 3.0, 1.0)
    }
}

/// Magnitude-squared 2-D DFT of `x`, radially binned. Input must be a
/// square `[1, 1, N, N]` tensor with `N <= 128`.
pub fn power_spectrum(x: &Tensor) -> Result<SpectrumProfile> {
    let [n, c, h, w] = x.shape();
    if n != 1 || c != 1 {
        return Err(Error::Dimension(format!(
            "power_spectrum wants [1, 1, N, N], got {:?}",
            x.shape()
        )));
    }
    if h != w {
        return Err(Error::Geometry(format!("image must be square, got {h}x{w}")));
    }
    if h == 0 || h > MAX_SPECTRUM_SIDE {
        return Err(Error::Geometry(format!(
            "side must be in 1..={MAX_SPECTRUM_SIDE}, got {h}"
        )));
    }
    let side = h;
    let twiddle: Vec<(f64, f64)> = (0..side)
        .map(|k| {
            let angle = -2.0 * std::f64::consts::PI * k as f64 / side as f64;
            (angle.cos(), angle.sin())
        })
        .collect();
    // DFT along rows, then along columns of the intermediate.
    let mut rows_re = vec![0.0; side * side];
    let mut rows_im = vec![0.0; side * side];
    for i in 0..side {
        let row = x.plane_slice(0, 0);
        for u in 0..side {
            let mut re = 0.0;
            let mut im = 0.0;
            for j in 0..side {
                let (tc, ts) = twiddle[(u * j) % side];
                let v = row[i * side + j];
                re += v * tc;
                im += v * ts;
            }
            rows_re[i * side + u] = re;
            rows_im[i * side + u] = im;
        }
    }
    let nyquist = side / 2;
    let mut energy = vec![0.0; nyquist + 1];
    let mut counts = vec![0usize; nyquist + 1];
    let norm = (side * side) as f64;
    for v in 0..side {
        for u in 0..side {
            let mut re = 0.0;
            let mut im = 0.0;
            for i in 0..side {
                let (tc, ts) = twiddle[(v * i) % side];
                let (rr, ri) = (rows_re[i * side + u], rows_im[i * side + u]);
                re += rr * tc - ri * ts;
                im += rr * ts + ri * tc;
            }
            let fu = u.min(side - u) as f64;
            let fv = v.min(side - v) as f64;
            let bin = ((fu * fu + fv * fv).sqrt().round() as usize).min(nyquist);
            energy[bin] += (re * re + im * im) / norm;
            counts[bin] += 1;
        }
    }
    Ok(SpectrumProfile {
        side,
        energy,
        counts,
    })
}

/// Relative Parseval residual: `|sum x^2 - sum_bins| / max(sum x^2, floor)`.
pub fn parseval_residual(x: &Tensor, profile: &SpectrumProfile) -> f64 {
    let spatial: f64 = x.iter().map(|&v| v * v).sum();
    (spatial - profile.total_energy()).abs() / spatial.max(1e-12)
}
