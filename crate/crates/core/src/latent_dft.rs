//! Analysis and synthesis of latent time series along the time axis.
//!
//! A latent sequence `z` of `C'` channels and `T'` frames is zero-padded at
//! its end to `L * T'` frames and transformed channel by channel. Only the
//! half-spectrum (bins `0..F`, `F = floor(L*T'/2) + 1`) is stored; for real
//! input the remaining bins are complex conjugates, which is what keeps
//! synthesis real-valued.
//!
//! Frequency bands are half-open `[lo, hi)` in Hz so that partitions tile the
//! axis without sharing bins. A band whose upper edge reaches the Nyquist
//! frequency also claims the top bin.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::fft;
use crate::tape::RowOperator;
use crate::tensor::{Dtype, Tensor};

pub const DEFAULT_PAD_FACTOR: usize = 2;

/// Real `C' x T'` latent time series sampled at `frame_rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    values: Tensor,
    frame_rate_hz: f64,
}

impl LatentSequence {
    pub fn new(values: Tensor, frame_rate_hz: f64) -> Result<Self> {
        if values.rank() != 2 {
            return Err(dim_err!("latent sequence must be [channels, frames]"));
        }
        if values.cols() < 2 {
            return Err(config_err!("latent sequence needs at least 2 frames"));
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(config_err!("frame rate must be positive, got {frame_rate_hz}"));
        }
        if !values.all_finite() {
            return Err(Error::Numeric("latent sequence contains non-finite values".into()));
        }
        Ok(LatentSequence {
            values,
            frame_rate_hz,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }
}

/// Everything needed to place a bin on the frequency axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMeta {
    /// Unpadded length `T'`.
    pub frames: usize,
    /// Zero-padding factor `L`.
    pub pad: usize,
    pub frame_rate_hz: f64,
}

impl SpectrumMeta {
    pub fn new(frames: usize, pad: usize, frame_rate_hz: f64) -> Result<Self> {
        if frames < 2 {
            return Err(config_err!("need at least 2 frames"));
        }
        if pad < 1 {
            return Err(config_err!("pad factor must be >= 1"));
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(config_err!("frame rate must be positive"));
        }
        Ok(SpectrumMeta {
            frames,
            pad,
            frame_rate_hz,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.frames * self.pad
    }

    pub fn n_bins(&self) -> usize {
        self.padded_len() / 2 + 1
    }

    pub fn nyquist_hz(&self) -> f64 {
        self.frame_rate_hz / 2.0
    }

    /// `k * f_r / (L * T')`.
    pub fn bin_frequency(&self, k: usize) -> Result<f64> {
        if k >= self.n_bins() {
            return Err(Error::Index(format!(
                "bin {k} out of range for {} bins",
                self.n_bins()
            )));
        }
        Ok(self.freq_unchecked(k))
    }

    fn freq_unchecked(&self, k: usize) -> f64 {
        k as f64 * self.frame_rate_hz / self.padded_len() as f64
    }

    pub fn bin_frequencies(&self) -> Vec<f64> {
        (0..self.n_bins()).map(|k| self.freq_unchecked(k)).collect()
    }

    /// Bins whose frequency lies in `[lo_hz, hi_hz)`; an upper edge at or
    /// beyond Nyquist includes the top bin.
    pub fn band_to_bins(&self, lo_hz: f64, hi_hz: f64) -> Result<Vec<usize>> {
        if !(lo_hz >= 0.0) || !(hi_hz > lo_hz) {
            return Err(config_err!("band needs 0 <= lo < hi, got [{lo_hz}, {hi_hz})"));
        }
        let hi = if hi_hz >= self.nyquist_hz() {
            f64::INFINITY
        } else {
            hi_hz
        };
        Ok((0..self.n_bins())
            .filter(|&k| {
                let f = self.freq_unchecked(k);
                f >= lo_hz && f < hi
            })
            .collect())
    }

    /// `n_bands` bands: `[0, floor_hz)` followed by `n_bands - 1` bands of
    /// equal width on a log axis ending at Nyquist.
    pub fn log_band_partition(&self, n_bands: usize, floor_hz: f64) -> Result<Vec<(f64, f64)>> {
        if n_bands == 0 {
            return Err(config_err!("need at least one band"));
        }
        if n_bands > self.n_bins() {
            return Err(config_err!(
                "{n_bands} bands exceed the {} available bins",
                self.n_bins()
            ));
        }
        let nyq = self.nyquist_hz();
        if n_bands == 1 {
            return Ok(vec![(0.0, nyq)]);
        }
        if !(floor_hz > 0.0 && floor_hz < nyq) {
            return Err(config_err!("floor {floor_hz} Hz must lie in (0, {nyq})"));
        }
        let steps = (n_bands - 1) as f64;
        let ratio = (nyq / floor_hz).ln() / steps;
        let mut edges = vec![0.0, floor_hz];
        for i in 1..n_bands - 1 {
            edges.push(floor_hz * (ratio * i as f64).exp());
        }
        edges.push(nyq);
        Ok(edges.windows(2).map(|w| (w[0], w[1])).collect())
    }
}

/// Half-spectrum of a zero-padded latent sequence, `C' x F` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSpectrum {
    coeffs: Vec<Complex64>,
    channels: usize,
    meta: SpectrumMeta,
}

impl LatentSpectrum {
    pub fn new(coeffs: Vec<Complex64>, channels: usize, meta: SpectrumMeta) -> Result<Self> {
        if coeffs.len() != channels * meta.n_bins() {
            return Err(dim_err!(
                "{} coefficients for {} channels x {} bins",
                coeffs.len(),
                channels,
                meta.n_bins()
            ));
        }
        Ok(LatentSpectrum {
            coeffs,
            channels,
            meta,
        })
    }

    pub fn meta(&self) -> &SpectrumMeta {
        &self.meta
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_bins(&self) -> usize {
        self.meta.n_bins()
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let f = self.n_bins();
        &self.coeffs[c * f..(c + 1) * f]
    }

    /// Writes an LFT1 `[2, C', F]` tensor (real plane, then imaginary plane)
    /// and a JSON sidecar `<path>.json` holding the frequency metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut data = Vec::with_capacity(2 * self.coeffs.len());
        data.extend(self.coeffs.iter().map(|c| c.re));
        data.extend(self.coeffs.iter().map(|c| c.im));
        Tensor::new(vec![2, self.channels, self.n_bins()], data)?.save(path, Dtype::F64)?;
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta: SpectrumMeta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let t = Tensor::load(path)?;
        if t.rank() != 3 || t.shape()[0] != 2 {
            return Err(Error::Format("spectrum tensor must be [2, C', F]".into()));
        }
        let (channels, bins) = (t.shape()[1], t.shape()[2]);
        if bins != meta.n_bins() {
            return Err(Error::Format("spectrum bins disagree with sidecar".into()));
        }
        let n = channels * bins;
        let coeffs = (0..n)
            .map(|i| Complex64::new(t.data()[i], t.data()[n + i]))
            .collect();
        LatentSpectrum::new(coeffs, channels, meta)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Zero-pads every channel of `z` by `pad_factor` and returns its
/// half-spectrum.
pub fn analyze(z: &LatentSequence, pad_factor: usize) -> Result<LatentSpectrum> {
    if !z.values().all_finite() {
        return Err(Error::Numeric("non-finite latent values".into()));
    }
    let meta = SpectrumMeta::new(z.frames(), pad_factor, z.frame_rate_hz())?;
    let (n, f) = (meta.padded_len(), meta.n_bins());
    let mut coeffs = Vec::with_capacity(z.channels() * f);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..z.channels() {
        half_spectrum(z.values().row(c), &mut buf);
        coeffs.extend_from_slice(&buf[..f]);
    }
    LatentSpectrum::new(coeffs, z.channels(), meta)
}

/// Forward transform of `row` zero-padded to `buf.len()`.
fn half_spectrum(row: &[f64], buf: &mut [Complex64]) {
    for (i, b) in buf.iter_mut().enumerate() {
        *b = Complex64::new(row.get(i).copied().unwrap_or(0.0), 0.0);
    }
    fft::fft(buf);
}

/// Inverse transform of the Hermitian extension of `half` into `buf`.
fn hermitian_inverse(half: &[Complex64], buf: &mut [Complex64]) {
    let n = buf.len();
    buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
    for (k, &v) in half.iter().enumerate() {
        buf[k] = v;
        if k > 0 && n - k >= half.len() {
            buf[n - k] = v.conj();
        }
    }
    fft::ifft(buf);
    let s = 1.0 / n as f64;
    buf.iter_mut().for_each(|b| *b *= s);
}

/// Inverse of [`analyze`]: Hermitian extension, inverse transform and
/// truncation back to the original `T'` frames.
pub fn synthesize(spec: &LatentSpectrum) -> Result<LatentSequence> {
    let meta = spec.meta();
    let (n, t) = (meta.padded_len(), meta.frames);
    let mut out = Vec::with_capacity(spec.channels() * t);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..spec.channels() {
        hermitian_inverse(spec.channel(c), &mut buf);
        let norm = buf.iter().map(|v| v.re * v.re).sum::<f64>().sqrt();
        let residue = buf.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
        if residue > 1e-9 * norm {
            return Err(Error::SpectrumCorruption(format!(
                "channel {c}: imaginary residue {residue:e} against output norm {norm:e}"
            )));
        }
        out.extend(buf[..t].iter().map(|v| v.re));
    }
    LatentSequence::new(Tensor::new(vec![spec.channels(), t], out)?, meta.frame_rate_hz)
}

/// The map `z -> synthesize(mask(analyze(z)))` applied to one channel.
///
/// Masking bins symmetrically in the full spectrum is an orthogonal
/// projection on the padded sequence, and padding/truncation are adjoint to
/// each other, so the whole operator is self-adjoint.
#[derive(Debug, Clone)]
pub struct BandpassOperator {
    padded_len: usize,
    keep: Vec<bool>,
}

impl BandpassOperator {
    pub fn new(meta: &SpectrumMeta, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != meta.n_bins() {
            return Err(dim_err!(
                "mask has {} bins, spectrum has {}",
                keep.len(),
                meta.n_bins()
            ));
        }
        Ok(BandpassOperator {
            padded_len: meta.padded_len(),
            keep,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    fn run(&self, row: &[f64], out: &mut [f64]) {
        if self.is_identity() {
            out.copy_from_slice(row);
            return;
        }
        if self.keep.iter().all(|&k| !k) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.padded_len];
        half_spectrum(row, &mut buf);
        let mut half: Vec<Complex64> = buf[..self.keep.len()].to_vec();
        for (h, &k) in half.iter_mut().zip(&self.keep) {
            if !k {
                *h = Complex64::new(0.0, 0.0);
            }
        }
        hermitian_inverse(&half, &mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re;
        }
    }
}

impl RowOperator for BandpassOperator {
    fn apply(&self, row: &[f64], out: &mut [f64]) {
        self.run(row, out)
    }

    fn apply_adjoint(&self, row: &[f64], out: &mut [f64]) {
        self.run(row, out)
    }
}

/// Amplitude and phase of the real cosine carried by half-spectrum bin `k`
/// of an `n`-point transform.
pub fn real_sinusoid(coeff: Complex64, k: usize, n: usize) -> (f64, f64) {
    let edge = k == 0 || (n % 2 == 0 && k == n / 2);
    let amp = if edge { 1.0 } else { 2.0 } * coeff.norm() / n as f64;
    (amp, coeff.arg())
}

/// Evaluates `amp * cos(2*pi*k*t/n + phase)` for `t` in `0..n`.
pub fn cosine(amp: f64, phase: f64, k: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| amp * (2.0 * PI * (k * t % n) as f64 / n as f64 + phase).cos())
        .collect()
}
