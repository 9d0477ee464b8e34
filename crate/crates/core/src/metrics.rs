//! Descriptor signals and bandpassed adherence.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{dim_err, Error, Result};
use crate::latent_dft::{BandpassOperator, SpectrumMeta};
use crate::tape::RowOperator;
use crate::tensor::Tensor;

pub const LOUDNESS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Loudness,
    Onset,
}

impl DescriptorKind {
    pub fn name(self) -> &'static str {
        match self {
            DescriptorKind::Loudness => "loudness",
            DescriptorKind::Onset => "onset",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSignal {
    pub values: Vec<f64>,
    pub kind: DescriptorKind,
    pub frame_rate_hz: f64,
}

/// `log(eps + sum_c x[c, t]^2)` per frame.
pub fn loudness_descriptor(x: &Tensor, frame_rate_hz: f64) -> DescriptorSignal {
    let (c, t) = (x.rows(), x.cols());
    let values = (0..t)
        .map(|j| (LOUDNESS_EPS + (0..c).map(|i| x.at2(i, j).powi(2)).sum::<f64>()).ln())
        .collect();
    DescriptorSignal {
        values,
        kind: DescriptorKind::Loudness,
        frame_rate_hz,
    }
}

/// Half-wave rectified first difference of per-channel magnitudes, summed
/// over channels. The first frame is 0.
pub fn onset_descriptor(x: &Tensor, frame_rate_hz: f64) -> DescriptorSignal {
    let (c, t) = (x.rows(), x.cols());
    let mut values = vec![0.0; t];
    for (j, v) in values.iter_mut().enumerate().skip(1) {
        *v = (0..c)
            .map(|i| (x.at2(i, j).abs() - x.at2(i, j - 1).abs()).max(0.0))
            .sum();
    }
    DescriptorSignal {
        values,
        kind: DescriptorKind::Onset,
        frame_rate_hz,
    }
}

pub fn descriptor(x: &Tensor, kind: DescriptorKind, frame_rate_hz: f64) -> DescriptorSignal {
    match kind {
        DescriptorKind::Loudness => loudness_descriptor(x, frame_rate_hz),
        DescriptorKind::Onset => onset_descriptor(x, frame_rate_hz),
    }
}

/// Keeps DFT bins in `[lo, hi)` (the Nyquist bin joins when `hi` reaches it)
/// and zeroes the rest.
pub fn bandpass(values: &[f64], frame_rate_hz: f64, band_hz: (f64, f64)) -> Result<Vec<f64>> {
    let meta = SpectrumMeta::new(values.len(), 1, frame_rate_hz)?;
    let bins = meta.band_to_bins(band_hz.0, band_hz.1)?;
    let mut keep = vec![false; meta.n_bins()];
    for b in bins {
        keep[b] = true;
    }
    let op = BandpassOperator::new(&meta, keep)?;
    let mut out = vec![0.0; values.len()];
    op.apply(values, &mut out);
    Ok(out)
}

/// Centered energy below this fraction of the input's counts as zero variance.
const DEGENERATE_RATIO: f64 = 1e-20;

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Pearson correlation; `None` when either side has (numerically) zero
/// variance relative to `scale`.
pub fn pearson_scaled(a: &[f64], b: &[f64], scale_a: f64, scale_b: f64) -> Option<f64> {
    let (ca, cb) = (centered(a), centered(b));
    let (ea, eb) = (energy(&ca), energy(&cb));
    if ea <= DEGENERATE_RATIO * scale_a || eb <= DEGENERATE_RATIO * scale_b || ea == 0.0 || eb == 0.0 {
        return None;
    }
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Some((dot / (ea * eb).sqrt()).clamp(-1.0, 1.0))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson_scaled(a, b, 0.0, 0.0)
}

/// Autocorrelation of the mean-removed signal at lags `1..=n/2`.
pub fn beat_spectrum(v: &[f64]) -> Vec<f64> {
    let c = centered(v);
    let n = c.len();
    (1..=n / 2)
        .map(|lag| (0..n - lag).map(|t| c[t] * c[t + lag]).sum())
        .collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ea, eb) = (energy(a), energy(b));
    if ea == 0.0 || eb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (ea * eb).sqrt()).clamp(-1.0, 1.0))
}

/// Agreement between reference and generation inside `band_hz`: Pearson
/// correlation of bandpassed loudness, or cosine similarity of the beat
/// spectra of bandpassed onset envelopes. `None` marks an undefined value.
pub fn band_adherence(
    reference: &Tensor,
    generation: &Tensor,
    band_hz: (f64, f64),
    kind: DescriptorKind,
    frame_rate_hz: f64,
) -> Result<Option<f64>> {
    if reference.shape() != generation.shape() {
        return Err(dim_err!(
            "reference {:?} and generation {:?} differ",
            reference.shape(),
            generation.shape()
        ));
    }
    let dr = descriptor(reference, kind, frame_rate_hz);
    let dg = descriptor(generation, kind, frame_rate_hz);
    descriptor_adherence(&dr.values, &dg.values, band_hz, kind, frame_rate_hz)
}

pub fn descriptor_adherence(
    reference: &[f64],
    generation: &[f64],
    band_hz: (f64, f64),
    kind: DescriptorKind,
    frame_rate_hz: f64,
) -> Result<Option<f64>> {
    if band_hz.0 > frame_rate_hz / 2.0 {
        return Err(Error::Domain(format!("band {band_hz:?} starts above Nyquist")));
    }
    let br = bandpass(reference, frame_rate_hz, band_hz)?;
    let bg = bandpass(generation, frame_rate_hz, band_hz)?;
    Ok(match kind {
        DescriptorKind::Loudness => {
            pearson_scaled(&br, &bg, energy(reference), energy(generation))
        }
        DescriptorKind::Onset => cosine_similarity(&beat_spectrum(&br), &beat_spectrum(&bg)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub band: String,
    pub metric: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub band: String,
    pub metric: String,
    pub n: usize,
    pub n_undefined: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

/// Mean and sample std per `(task, band, metric)` in first-appearance order.
/// Undefined values are counted but excluded.
pub fn aggregate(rows: &[ReportRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    let mut keys: Vec<(&str, &str, &str)> = Vec::new();
    for r in rows {
        let k = (r.task.as_str(), r.band.as_str(), r.metric.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    Ok(keys
        .into_iter()
        .map(|(task, band, metric)| {
            let group: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.task == task && r.band == band && r.metric == metric)
                .collect();
            let vals: Vec<f64> = group.iter().filter_map(|r| r.value).collect();
            let n = vals.len();
            let mean = if n > 0 { vals.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else if n == 1 {
                0.0
            } else {
                f64::NAN
            };
            SummaryRow {
                task: task.into(),
                band: band.into(),
                metric: metric.into(),
                n,
                n_undefined: group.len() - n,
                mean,
                std,
            }
        })
        .collect())
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

pub fn write_rows_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "task,band,metric,value")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.task, r.band, r.metric, fmt_value(r.value))?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "task,band,metric,n,n_undefined,mean,std")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{},{},{}", r.task, r.band, r.metric, r.n, r.n_undefined, r.mean, r.std)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for `mean(a - b) > 0`.
    pub p_greater: f64,
}

/// Paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(dim_err!("paired test needs two equal samples of size >= 2"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let (t, p) = if se == 0.0 {
        let t = if mean > 0.0 { f64::INFINITY } else if mean < 0.0 { f64::NEG_INFINITY } else { 0.0 };
        (t, if mean > 0.0 { 0.0 } else if mean < 0.0 { 1.0 } else { 0.5 })
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
        (t, 1.0 - dist.cdf(t))
    };
    Ok(PairedTest {
        n: d.len(),
        mean_diff: mean,
        t,
        p_greater: p,
    })
}
