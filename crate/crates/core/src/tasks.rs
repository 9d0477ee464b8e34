//! Conditional generation, blending, band isolation and frequency sweeps.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{blend_sample, ode_sample, Conditioned, SamplerConfig};
use crate::error::{config_err, Result};
use crate::latent_dft::{LatentSequence, SpectrumMeta};
use crate::mask::FrequencyMask;
use crate::metrics::{bandpass, descriptor, DescriptorKind};
use crate::net::Model;
use crate::rng::derive;
use crate::synth::PatternRecord;
use crate::tensor::Tensor;

/// Number of evaluation bands and the lowest band's upper edge.
pub const EVAL_BANDS: usize = 4;
pub const EVAL_FLOOR_HZ: f64 = 0.5;
pub const SWEEP_WINDOW_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingOptions {
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub n_variations: usize,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            sampler: SamplerConfig::default(),
            seed: 0,
            n_variations: 1,
        }
    }
}

/// Latent of `y` restricted to the frequencies kept by `mask`.
pub fn masked_latent(model: &Model, y: &Tensor, mask: &FrequencyMask) -> Result<LatentSequence> {
    model.masked_latent(y, mask.keep())
}

pub fn spectrum_meta(model: &Model, y: &Tensor) -> Result<SpectrumMeta> {
    model.config.spectrum_meta(y.cols())
}

fn variations<F>(opts: &SamplingOptions, f: F) -> Result<Vec<Tensor>>
where
    F: Fn(u64) -> Result<Tensor> + Sync + Send,
{
    (0..opts.n_variations as u64)
        .into_par_iter()
        .map(f)
        .collect()
}

/// Variation `i` is sampled from stream `i` of `opts.seed`.
pub fn conditional_generate(
    model: &Model,
    y: &Tensor,
    mask: &FrequencyMask,
    opts: &SamplingOptions,
) -> Result<Vec<Tensor>> {
    let z = masked_latent(model, y, mask)?;
    let schedule = opts.sampler.schedule()?;
    let den = Conditioned { model, latent: &z };
    variations(opts, |i| {
        ode_sample(&den, y.shape(), &schedule, opts.sampler.heun, &mut derive(opts.seed, i))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendOutput {
    pub clips: Vec<Tensor>,
    /// Set when the two masks share a bin.
    pub overlapping: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn blend(
    model: &Model,
    y1: &Tensor,
    y2: &Tensor,
    mask1: &FrequencyMask,
    mask2: &FrequencyMask,
    alpha: f64,
    beta: f64,
    opts: &SamplingOptions,
) -> Result<BlendOutput> {
    let z1 = masked_latent(model, y1, mask1)?;
    let z2 = masked_latent(model, y2, mask2)?;
    let schedule = opts.sampler.schedule()?;
    let d1 = Conditioned { model, latent: &z1 };
    let d2 = Conditioned { model, latent: &z2 };
    let clips = variations(opts, |i| {
        blend_sample(&d1, &d2, y1.shape(), &schedule, alpha, beta, opts.sampler.heun, &mut derive(opts.seed, i))
    })?;
    Ok(BlendOutput {
        clips,
        overlapping: mask1.overlaps(mask2),
    })
}

/// Blends the full latent of `y` (weight `alpha`) with its band-limited
/// latent (weight `beta`).
pub fn isolate(
    model: &Model,
    y: &Tensor,
    band: &FrequencyMask,
    alpha: f64,
    beta: f64,
    opts: &SamplingOptions,
) -> Result<Vec<Tensor>> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(config_err!("isolation weights must be non-negative, got {alpha}, {beta}"));
    }
    if alpha == 0.0 && beta == 0.0 {
        return Err(config_err!("isolation weights are both zero"));
    }
    let full = FrequencyMask::all(band.len());
    Ok(blend(model, y, y, &full, band, alpha, beta, opts)?.clips)
}

/// Share of the mean-removed descriptor energy that falls inside `band_hz`.
pub fn in_band_fraction(x: &Tensor, band_hz: (f64, f64), kind: DescriptorKind, frame_rate_hz: f64) -> Result<f64> {
    let d = descriptor(x, kind, frame_rate_hz).values;
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let c: Vec<f64> = d.iter().map(|v| v - mean).collect();
    let total: f64 = c.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let b = bandpass(&c, frame_rate_hz, band_hz)?;
    Ok(b.iter().map(|v| v * v).sum::<f64>() / total)
}

/// Normalized zero-lag matched-filter response of `observed` to `template`,
/// both mean-removed. `None` when either is flat.
pub fn matched_response(template: &[f64], observed: &[f64]) -> Option<f64> {
    crate::metrics::pearson(template, observed)
}

/// How much of `pattern` survives in `generation`.
pub fn preservation(pattern: &PatternRecord, generation: &Tensor, frame_rate_hz: f64) -> f64 {
    let alone = pattern.render(generation.rows(), generation.cols(), frame_rate_hz);
    matched_response(&pattern.envelope(&alone), &pattern.envelope(generation)).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub center_hz: f64,
    pub lo_bin: usize,
    /// Inclusive.
    pub hi_bin: usize,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub labels: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Center frequency of the highest smoothed value for attribute `j`.
    pub fn peak_hz(&self, j: usize) -> f64 {
        let best = self
            .rows
            .iter()
            .max_by(|a, b| a.smoothed[j].total_cmp(&b.smoothed[j]))
            .expect("sweep has rows");
        best.center_hz
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "center_hz,lo_bin,hi_bin")?;
        for l in &self.labels {
            write!(f, ",{l}_raw")?;
        }
        for l in &self.labels {
            write!(f, ",{l}_smoothed")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{},{},{}", r.center_hz, r.lo_bin, r.hi_bin)?;
            for v in r.raw.iter().chain(&r.smoothed) {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}

pub fn pattern_label(p: &PatternRecord) -> String {
    let kind = match p.kind {
        crate::synth::PatternKind::Envelope => "envelope",
        crate::synth::PatternKind::Pulse => "pulse",
        crate::synth::PatternKind::Trill => "trill",
    };
    format!("{kind}_{:.2}hz", p.rate_hz)
}

/// Gaussian smoothing with edge renormalization; `std <= 0` copies.
pub fn gaussian_smooth(values: &[f64], std: f64) -> Vec<f64> {
    if std <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * std).ceil() as isize;
    let n = values.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for j in (i - radius).max(0)..=(i + radius).min(n - 1) {
                let w = (-((j - i) as f64).powi(2) / (2.0 * std * std)).exp();
                acc += w * values[j as usize];
                wsum += w;
            }
            acc / wsum
        })
        .collect()
}

/// Window start bins: every `stride` bins, plus a final window flush with
/// the top bin.
pub fn sweep_windows(n_bins: usize, window_bins: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if window_bins == 0 || stride == 0 {
        return Err(config_err!("window and stride must be positive"));
    }
    if window_bins >= n_bins {
        return Ok(vec![(0, n_bins - 1)]);
    }
    let last = n_bins - window_bins;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    Ok(starts.into_iter().map(|s| (s, s + window_bins - 1)).collect())
}

/// Generates once per window position (per variation) with only that window
/// kept, and scores each pattern's preservation.
pub fn sweep(
    model: &Model,
    y: &Tensor,
    patterns: &[PatternRecord],
    window_bins: usize,
    stride: usize,
    smoothing_std: f64,
    opts: &SamplingOptions,
) -> Result<SweepResult> {
    let meta = spectrum_meta(model, y)?;
    let f_r = model.config.frame_rate_hz;
    let windows = sweep_windows(meta.n_bins(), window_bins, stride)?;
    let raw: Vec<(f64, Vec<f64>)> = windows
        .iter()
        .map(|&(lo, hi)| {
            let bins: Vec<usize> = (lo..=hi).collect();
            let mask = FrequencyMask::from_bins(meta.n_bins(), &bins)?;
            let gens = conditional_generate(model, y, &mask, opts)?;
            let scores = patterns
                .iter()
                .map(|p| gens.iter().map(|g| preservation(p, g, f_r)).sum::<f64>() / gens.len() as f64)
                .collect();
            let center = 0.5 * (meta.bin_frequency(lo)? + meta.bin_frequency(hi)?);
            Ok((center, scores))
        })
        .collect::<Result<_>>()?;
    let mut smoothed_cols = Vec::new();
    for j in 0..patterns.len() {
        let col: Vec<f64> = raw.iter().map(|r| r.1[j]).collect();
        smoothed_cols.push(gaussian_smooth(&col, smoothing_std));
    }
    let rows = raw
        .into_iter()
        .zip(&windows)
        .enumerate()
        .map(|(i, ((center, scores), &(lo, hi)))| SweepRow {
            center_hz: center,
            lo_bin: lo,
            hi_bin: hi,
            raw: scores,
            smoothed: smoothed_cols.iter().map(|c| c[i]).collect(),
        })
        .collect();
    Ok(SweepResult {
        labels: patterns.iter().map(pattern_label).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::rng::seeded;
    use crate::synth::PatternKind;

    fn small_model() -> Model {
        let cfg = ModelConfig {
            channels: 3,
            latent_channels: 2,
            frame_rate_hz: 16.0,
            pad_factor: 2,
            encoder_hidden: 6,
            encoder_layers: 3,
            decoder_hidden: 6,
            decoder_blocks: 2,
            kernel_size: 3,
            noise_features: 4,
            embed_channels: 2,
        };
        let mut m = Model::init(cfg, 0.5, &mut seeded(1)).unwrap();
        // a nonzero output layer so the latent matters
        let w = m.denoiser.output.weight.data_mut();
        for (i, v) in w.iter_mut().enumerate() {
            *v = ((i * 7 % 5) as f64 - 2.0) * 0.05;
        }
        m
    }

    fn clip() -> Tensor {
        Tensor::from_fn2(3, 24, |c, t| (0.4 * t as f64 + c as f64).sin())
    }

    fn opts(n: usize) -> SamplingOptions {
        SamplingOptions {
            sampler: SamplerConfig {
                steps: 4,
                ..Default::default()
            },
            seed: 9,
            n_variations: n,
        }
    }

    #[test]
    fn degenerate_blends_match_generation() {
        let m = small_model();
        let y = clip();
        let f = spectrum_meta(&m, &y).unwrap().n_bins();
        let mask = FrequencyMask::from_bins(f, &[0, 1, 2, 5]).unwrap();
        let other = FrequencyMask::from_bins(f, &[7, 8]).unwrap();
        let y2 = Tensor::from_fn2(3, 24, |c, t| (0.9 * t as f64 - c as f64).cos());
        let gen = conditional_generate(&m, &y, &mask, &opts(2)).unwrap();
        let b = blend(&m, &y, &y, &mask, &mask, 0.5, 0.5, &opts(2)).unwrap();
        assert_eq!(b.clips, gen);
        assert!(b.overlapping);
        let one = blend(&m, &y, &y2, &mask, &other, 1.0, 0.0, &opts(2)).unwrap();
        assert_eq!(one.clips, gen);
        assert!(!one.overlapping);
        let full = conditional_generate(&m, &y, &FrequencyMask::all(f), &opts(2)).unwrap();
        assert_eq!(isolate(&m, &y, &mask, 1.0, 0.0, &opts(2)).unwrap(), full);
    }

    #[test]
    fn variation_depends_only_on_seed_and_index() {
        let m = small_model();
        let y = clip();
        let f = spectrum_meta(&m, &y).unwrap().n_bins();
        let mask = FrequencyMask::all(f);
        let three = conditional_generate(&m, &y, &mask, &opts(3)).unwrap();
        let one = conditional_generate(&m, &y, &mask, &opts(1)).unwrap();
        assert_eq!(three[0], one[0]);
        assert_ne!(three[0], three[1]);
    }

    #[test]
    fn bad_requests() {
        let m = small_model();
        let y = clip();
        let f = spectrum_meta(&m, &y).unwrap().n_bins();
        let wrong = FrequencyMask::all(f + 1);
        assert!(matches!(
            conditional_generate(&m, &y, &wrong, &opts(1)),
            Err(crate::Error::Dimension(_))
        ));
        let band = FrequencyMask::all(f);
        assert!(matches!(isolate(&m, &y, &band, 0.0, 0.0, &opts(1)), Err(crate::Error::Config(_))));
    }

    #[test]
    fn windows_cover_the_spectrum() {
        assert_eq!(sweep_windows(25, 10, 10).unwrap(), vec![(0, 9), (10, 19), (15, 24)]);
        assert_eq!(sweep_windows(8, 10, 3).unwrap(), vec![(0, 7)]);
        assert!(sweep_windows(8, 0, 1).is_err());
    }

    #[test]
    fn full_window_sweep_equals_all_ones_preservation() {
        let m = small_model();
        let y = clip();
        let p = PatternRecord {
            kind: PatternKind::Trill,
            rate_hz: 2.0,
            channel_span: (0, 1),
            amplitude: 1.0,
            phase: 0.0,
        };
        let f = spectrum_meta(&m, &y).unwrap().n_bins();
        let r = sweep(&m, &y, &[p.clone()], 1000, 5, 1.0, &opts(1)).unwrap();
        assert_eq!(r.rows.len(), 1);
        let gen = conditional_generate(&m, &y, &FrequencyMask::all(f), &opts(1)).unwrap();
        assert_eq!(r.rows[0].raw[0], preservation(&p, &gen[0], 16.0));
    }

    #[test]
    fn preservation_of_clean_pattern() {
        let p = PatternRecord {
            kind: PatternKind::Envelope,
            rate_hz: 0.5,
            channel_span: (2, 4),
            amplitude: 1.3,
            phase: 0.4,
        };
        let x = p.render(8, 128, 16.0);
        assert!((preservation(&p, &x, 16.0) - 1.0).abs() < 1e-12);
        let flat = Tensor::zeros(&[8, 128]);
        assert_eq!(preservation(&p, &flat, 16.0), 0.0);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let s = gaussian_smooth(&[2.0; 9], 1.5);
        assert!(s.iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert_eq!(gaussian_smooth(&[1.0, 3.0], 0.0), vec![1.0, 3.0]);
    }

    #[test]
    fn in_band_fraction_of_pure_tone() {
        let x = Tensor::from_fn2(1, 64, |_, t| 2.0 + (2.0 * std::f64::consts::PI * 4.0 * t as f64 / 32.0).sin());
        let inside = in_band_fraction(&x, (2.0, 6.0), DescriptorKind::Loudness, 32.0).unwrap();
        assert!(inside > 0.9, "{inside}");
    }
}
