//! Binary masks over latent-frequency bins.
//!
//! Training masks threshold correlated Gaussian bin scores `s = K u` at a
//! random level `eta`, where `K` is a row-normalised radial basis kernel on a
//! (log-)frequency axis. Every score has unit marginal variance, so every bin
//! is kept with probability exactly one half.

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::latent_dft::{LatentSpectrum, SpectrumMeta};

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMask {
    keep: Vec<bool>,
    bands_hz: Option<Vec<(f64, f64)>>,
}

impl FrequencyMask {
    pub fn from_keep(keep: Vec<bool>) -> Self {
        FrequencyMask {
            keep,
            bands_hz: None,
        }
    }

    pub fn all(n_bins: usize) -> Self {
        Self::from_keep(vec![true; n_bins])
    }

    pub fn none(n_bins: usize) -> Self {
        Self::from_keep(vec![false; n_bins])
    }

    pub fn from_bins(n_bins: usize, bins: &[usize]) -> Result<Self> {
        let mut keep = vec![false; n_bins];
        for &b in bins {
            if b >= n_bins {
                return Err(crate::Error::Index(format!("bin {b} >= {n_bins}")));
            }
            keep[b] = true;
        }
        Ok(Self::from_keep(keep))
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn bands_hz(&self) -> Option<&[(f64, f64)]> {
        self.bands_hz.as_deref()
    }

    pub fn kept_bins(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&k| self.keep[k]).collect()
    }

    /// Fraction of kept bins.
    pub fn density(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }

    pub fn overlaps(&self, other: &FrequencyMask) -> bool {
        self.keep.iter().zip(&other.keep).any(|(a, b)| *a && *b)
    }

    /// Lengths of maximal runs of consecutive kept bins.
    pub fn kept_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut cur = 0;
        for &k in &self.keep {
            if k {
                cur += 1;
            } else if cur > 0 {
                runs.push(cur);
                cur = 0;
            }
        }
        if cur > 0 {
            runs.push(cur);
        }
        runs
    }
}

/// Shape parameters of the bin-score kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma: f64,
    pub power: f64,
    pub eps: f64,
    pub log_axis: bool,
    pub correlate: bool,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            sigma: 0.5,
            power: 2.0,
            eps: 1e-6,
            log_axis: true,
            correlate: true,
        }
    }
}

/// Dense `F x F` kernel; scores are `s = K u` with `u ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct MaskKernel {
    matrix: Vec<f64>,
    n: usize,
    params: KernelParams,
}

impl MaskKernel {
    pub fn build(bin_freqs_hz: &[f64], params: KernelParams) -> Result<Self> {
        if !(params.sigma > 0.0) || !(params.eps > 0.0) || !(params.power > 0.0) {
            return Err(config_err!("kernel needs sigma > 0, eps > 0, power > 0"));
        }
        if bin_freqs_hz.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(config_err!("bin frequencies must be strictly increasing"));
        }
        let n = bin_freqs_hz.len();
        let mut matrix = vec![0.0; n * n];
        if !params.correlate {
            for i in 0..n {
                matrix[i * n + i] = 1.0;
            }
            return Ok(MaskKernel { matrix, n, params });
        }
        let axis: Vec<f64> = bin_freqs_hz
            .iter()
            .map(|&f| {
                if params.log_axis {
                    (f + params.eps).ln()
                } else {
                    f
                }
            })
            .collect();
        let denom = 2.0 * params.sigma.powf(params.power);
        for i in 0..n {
            let row = &mut matrix[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] = (-(axis[i] - axis[j]).abs().powf(params.power) / denom).exp();
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(MaskKernel { matrix, n, params })
    }

    pub fn for_meta(meta: &SpectrumMeta, params: KernelParams) -> Result<Self> {
        Self::build(&meta.bin_frequencies(), params)
    }

    pub fn n_bins(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    /// `K u` for a caller-provided `u`.
    pub fn scores(&self, u: &[f64]) -> Vec<f64> {
        if !self.params.correlate {
            return u.to_vec();
        }
        self.matrix
            .chunks(self.n)
            .map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Draws training masks from a kernel.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    kernel: MaskKernel,
    /// Symmetric clamp on the threshold; `None` samples it unclamped.
    pub threshold_clamp: Option<f64>,
}

impl MaskSampler {
    pub fn new(kernel: MaskKernel) -> Self {
        MaskSampler {
            kernel,
            threshold_clamp: Some(6.0),
        }
    }

    pub fn kernel(&self) -> &MaskKernel {
        &self.kernel
    }

    /// Draws `eta ~ N(0, 1)`, then `u ~ N(0, I)`, and keeps bins with
    /// `(K u)_k > eta`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FrequencyMask {
        let mut eta: f64 = rng.sample(StandardNormal);
        if let Some(c) = self.threshold_clamp {
            eta = eta.clamp(-c, c);
        }
        self.sample_with_threshold(eta, rng)
    }

    pub fn sample_with_threshold<R: Rng + ?Sized>(&self, eta: f64, rng: &mut R) -> FrequencyMask {
        let u: Vec<f64> = (0..self.kernel.n).map(|_| rng.sample(StandardNormal)).collect();
        let s = self.kernel.scores(&u);
        FrequencyMask::from_keep(s.iter().map(|&v| v > eta).collect())
    }
}

/// Union of the bins of each band. Bands are clipped to `[0, Nyquist]` and
/// must not overlap.
pub fn user_mask(bands_hz: &[(f64, f64)], meta: &SpectrumMeta) -> Result<FrequencyMask> {
    let nyq = meta.nyquist_hz();
    let mut clipped: Vec<(f64, f64)> = Vec::new();
    for &(lo, hi) in bands_hz {
        if !(lo >= 0.0) || !(hi > lo) {
            return Err(config_err!("band needs 0 <= lo < hi, got [{lo}, {hi})"));
        }
        if lo >= nyq && lo > 0.0 && meta.band_to_bins(lo, hi)?.is_empty() {
            continue;
        }
        clipped.push((lo, hi.min(nyq)));
    }
    let mut sorted = clipped.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(config_err!(
                "bands [{}, {}) and [{}, {}) overlap",
                w[0].0,
                w[0].1,
                w[1].0,
                w[1].1
            ));
        }
    }
    let mut keep = vec![false; meta.n_bins()];
    for &(lo, hi) in &clipped {
        for k in meta.band_to_bins(lo, hi)? {
            keep[k] = true;
        }
    }
    Ok(FrequencyMask {
        keep,
        bands_hz: Some(clipped),
    })
}

/// Zeroes masked bins in every channel.
pub fn apply_mask(spec: &LatentSpectrum, mask: &FrequencyMask) -> Result<LatentSpectrum> {
    let f = spec.n_bins();
    if mask.len() != f {
        return Err(dim_err!("mask has {} bins, spectrum has {f}", mask.len()));
    }
    let mut out = spec.clone();
    for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
        if !mask.keep[i % f] {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    Ok(out)
}

/// On-disk mask description: either bands in Hz or explicit bin indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSpec {
    Bands { bands_hz: Vec<[f64; 2]> },
    Bins { bins: Vec<usize> },
}

impl MaskSpec {
    pub fn resolve(&self, meta: &SpectrumMeta) -> Result<FrequencyMask> {
        match self {
            MaskSpec::Bands { bands_hz } => {
                let bands: Vec<(f64, f64)> = bands_hz.iter().map(|b| (b[0], b[1])).collect();
                user_mask(&bands, meta)
            }
            MaskSpec::Bins { bins } => FrequencyMask::from_bins(meta.n_bins(), bins),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn all() -> Self {
        MaskSpec::Bands {
            bands_hz: vec![[0.0, f64::MAX]],
        }
    }

    pub fn none() -> Self {
        MaskSpec::Bins { bins: vec![] }
    }
}
