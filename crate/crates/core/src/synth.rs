//! Synthetic multi-timescale clips with ground-truth pattern records.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::derive;
use crate::tensor::{Dtype, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    /// Slow sinusoidal amplitude over a channel band.
    Envelope,
    /// Periodic localized bumps over a channel band.
    Pulse,
    /// Alternation between two adjacent channel rows.
    Trill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRecord {
    pub kind: PatternKind,
    pub rate_hz: f64,
    /// Inclusive channel range.
    pub channel_span: (usize, usize),
    pub amplitude: f64,
    pub phase: f64,
}

impl PatternRecord {
    fn validate(&self, channels: usize, nyquist: f64) -> Result<()> {
        if !(self.rate_hz > 0.0) || self.rate_hz >= nyquist {
            return Err(config_err!(
                "pattern rate {} Hz must lie in (0, {nyquist})",
                self.rate_hz
            ));
        }
        let (lo, hi) = self.channel_span;
        if lo > hi || hi >= channels || (self.kind == PatternKind::Trill && hi != lo + 1) {
            return Err(config_err!("bad channel span {:?} for {:?}", self.channel_span, self.kind));
        }
        Ok(())
    }

    /// Contribution of this pattern alone, `[channels, frames]`.
    pub fn render(&self, channels: usize, frames: usize, frame_rate_hz: f64) -> Tensor {
        let mut out = Tensor::zeros(&[channels, frames]);
        let (lo, hi) = self.channel_span;
        let a = self.amplitude;
        let data = out.data_mut();
        for t in 0..frames {
            let arg = 2.0 * PI * self.rate_hz * t as f64 / frame_rate_hz + self.phase;
            match self.kind {
                PatternKind::Envelope => {
                    let v = a * (0.5 + 0.5 * arg.sin());
                    for c in lo..=hi {
                        data[c * frames + t] = v;
                    }
                }
                PatternKind::Pulse => {
                    let v = a * ((1.0 + arg.cos()) / 2.0).powi(3);
                    for c in lo..=hi {
                        data[c * frames + t] = v;
                    }
                }
                PatternKind::Trill => {
                    data[lo * frames + t] = a * (1.0 + arg.cos()) / 2.0;
                    data[hi * frames + t] = a * (1.0 - arg.cos()) / 2.0;
                }
            }
        }
        out
    }

    /// Temporal signature of the pattern read off a clip: the span average,
    /// or the row difference for a trill.
    pub fn envelope(&self, clip: &Tensor) -> Vec<f64> {
        let (lo, hi) = self.channel_span;
        match self.kind {
            PatternKind::Trill => clip.row(lo).iter().zip(clip.row(hi)).map(|(a, b)| a - b).collect(),
            _ => {
                let n = (hi - lo + 1) as f64;
                (0..clip.cols())
                    .map(|t| (lo..=hi).map(|c| clip.at2(c, t)).sum::<f64>() / n)
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub channels: usize,
    pub frames: usize,
    pub frame_rate_hz: f64,
    pub slow_hz: (f64, f64),
    pub mid_hz: (f64, f64),
    pub fast_hz: (f64, f64),
    pub n_slow: usize,
    pub n_mid: usize,
    pub n_fast: usize,
    pub amplitude: (f64, f64),
    pub noise_std: f64,
    /// Round rates to a whole number of cycles per clip.
    pub snap_rates: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            channels: 16,
            frames: 256,
            frame_rate_hz: 64.0,
            slow_hz: (0.2, 0.8),
            mid_hz: (1.5, 6.0),
            fast_hz: (9.0, 20.0),
            n_slow: 1,
            n_mid: 1,
            n_fast: 1,
            amplitude: (0.5, 1.5),
            noise_std: 0.05,
            snap_rates: true,
        }
    }
}

impl SynthConfig {
    pub fn nyquist_hz(&self) -> f64 {
        self.frame_rate_hz / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.frames < 2 || !(self.frame_rate_hz > 0.0) {
            return Err(config_err!("need at least 2 channels and 2 frames"));
        }
        let ny = self.nyquist_hz();
        for (name, (lo, hi), limit) in [
            ("slow", self.slow_hz, (0.0, 1.0)),
            ("mid", self.mid_hz, (1.0, 8.0)),
            ("fast", self.fast_hz, (8.0, f64::INFINITY)),
        ] {
            if !(lo > limit.0 && lo <= hi && hi <= limit.1) {
                return Err(config_err!("{name} pool {lo}..{hi} outside {limit:?}"));
            }
            if hi >= ny {
                return Err(config_err!("{name} pool reaches Nyquist {ny}"));
            }
        }
        let rows = self.n_slow * 2 + self.n_mid * 2 + self.n_fast * 2;
        if rows > self.channels {
            return Err(config_err!("{rows} channel rows needed, only {} available", self.channels));
        }
        if !(self.noise_std >= 0.0) {
            return Err(config_err!("noise std must be non-negative"));
        }
        Ok(())
    }

    fn snap(&self, rate: f64) -> f64 {
        if !self.snap_rates {
            return rate;
        }
        let step = self.frame_rate_hz / self.frames as f64;
        (rate / step).round().max(1.0) * step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyClip {
    pub signal: Tensor,
    pub patterns: Vec<PatternRecord>,
    pub frame_rate_hz: f64,
}

/// Sum of the given patterns plus white noise of std `noise_std`.
pub fn render_clip<R: Rng + ?Sized>(
    patterns: &[PatternRecord],
    config: &SynthConfig,
    rng: &mut R,
) -> Result<ToyClip> {
    let (c, t) = (config.channels, config.frames);
    let mut signal = Tensor::zeros(&[c, t]);
    for p in patterns {
        p.validate(c, config.nyquist_hz())?;
        let part = p.render(c, t, config.frame_rate_hz);
        for (s, v) in signal.data_mut().iter_mut().zip(part.data()) {
            *s += v;
        }
    }
    if config.noise_std > 0.0 {
        for s in signal.data_mut() {
            *s += config.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    Ok(ToyClip {
        signal,
        patterns: patterns.to_vec(),
        frame_rate_hz: config.frame_rate_hz,
    })
}

fn free_span<R: Rng + ?Sized>(used: &mut [bool], width: usize, rng: &mut R) -> Option<(usize, usize)> {
    let starts: Vec<usize> = (0..=used.len() - width)
        .filter(|&s| used[s..s + width].iter().all(|u| !u))
        .collect();
    if starts.is_empty() {
        return None;
    }
    let s = starts[rng.random_range(0..starts.len())];
    used[s..s + width].iter_mut().for_each(|u| *u = true);
    Some((s, s + width - 1))
}

/// One clip with `n_slow` envelopes, `n_mid` pulses and `n_fast` trills on
/// disjoint channel spans.
pub fn generate_clip<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<ToyClip> {
    config.validate()?;
    let mut used = vec![false; config.channels];
    let mut patterns = Vec::new();
    let plan = [
        (PatternKind::Envelope, config.n_slow, config.slow_hz),
        (PatternKind::Pulse, config.n_mid, config.mid_hz),
        (PatternKind::Trill, config.n_fast, config.fast_hz),
    ];
    for (kind, count, (lo, hi)) in plan {
        for _ in 0..count {
            let max_w = match kind {
                PatternKind::Trill => 2,
                _ => (config.channels / 4).max(2),
            };
            let width = if kind == PatternKind::Trill { 2 } else { rng.random_range(2..=max_w) };
            let span = free_span(&mut used, width, rng)
                .or_else(|| free_span(&mut used, 2, rng))
                .ok_or_else(|| config_err!("not enough free channels for {kind:?}"))?;
            let rate = config.snap(if hi > lo { rng.random_range(lo..=hi) } else { lo });
            let (alo, ahi) = config.amplitude;
            patterns.push(PatternRecord {
                kind,
                rate_hz: rate,
                channel_span: span,
                amplitude: if ahi > alo { rng.random_range(alo..=ahi) } else { alo },
                phase: rng.random_range(0.0..2.0 * PI),
            });
        }
    }
    render_clip(&patterns, config, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub count: u64,
}

/// Streaming mean and population std over every element.
pub fn dataset_stats<'a>(clips: impl IntoIterator<Item = &'a Tensor>) -> Result<Stats> {
    let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
    for clip in clips {
        for &x in clip.data() {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
    }
    if n == 0 {
        return Err(config_err!("statistics of an empty dataset"));
    }
    Ok(Stats {
        mean,
        std: (m2 / n as f64).sqrt(),
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub config: SynthConfig,
    pub seed: u64,
    pub n_clips: usize,
    /// Raw statistics removed by standardization.
    pub raw_mean: f64,
    pub raw_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    /// Standardized clips.
    pub clips: Vec<Tensor>,
    /// Records in raw units.
    pub patterns: Vec<Vec<PatternRecord>>,
}

impl Dataset {
    /// Clip `i` is drawn from stream `i` of `seed`, so the result does not
    /// depend on thread count.
    pub fn generate(config: &SynthConfig, n_clips: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_clips == 0 {
            return Err(config_err!("dataset needs at least one clip"));
        }
        let raw: Vec<ToyClip> = (0..n_clips)
            .into_par_iter()
            .map(|i| generate_clip(config, &mut derive(seed, i as u64)))
            .collect::<Result<_>>()?;
        let stats = dataset_stats(raw.iter().map(|c| &c.signal))?;
        if !(stats.std > 0.0) {
            return Err(config_err!("dataset has zero variance"));
        }
        let mut clips = Vec::with_capacity(n_clips);
        let mut patterns = Vec::with_capacity(n_clips);
        for c in raw {
            let mut s = c.signal;
            for v in s.data_mut() {
                *v = (*v - stats.mean) / stats.std;
            }
            clips.push(s);
            patterns.push(c.patterns);
        }
        Ok(Dataset {
            info: DatasetInfo {
                config: config.clone(),
                seed,
                n_clips,
                raw_mean: stats.mean,
                raw_std: stats.std,
            },
            clips,
            patterns,
        })
    }

    /// Maps a raw-unit signal into the standardized space.
    pub fn standardize(&self, raw: &Tensor) -> Tensor {
        let mut out = raw.clone();
        for v in out.data_mut() {
            *v = (*v - self.info.raw_mean) / self.info.raw_std;
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let (c, t) = (self.info.config.channels, self.info.config.frames);
        let mut data = Vec::with_capacity(self.clips.len() * c * t);
        for clip in &self.clips {
            data.extend_from_slice(clip.data());
        }
        Tensor::new(vec![self.clips.len(), c, t], data)?.save(dir.join("signals.lft"), Dtype::F32)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("patterns.jsonl"))?);
        for recs in &self.patterns {
            serde_json::to_writer(&mut f, recs)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        std::fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&self.info)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let info: DatasetInfo = serde_json::from_slice(&std::fs::read(dir.join("dataset.json"))?)?;
        let all = Tensor::load(dir.join("signals.lft"))?;
        let (c, t) = (info.config.channels, info.config.frames);
        if all.shape() != [info.n_clips, c, t] {
            return Err(Error::Format(format!("signals shape {:?}", all.shape())));
        }
        let clips = all
            .data()
            .chunks(c * t)
            .map(|d| Tensor::new(vec![c, t], d.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let f = std::io::BufReader::new(std::fs::File::open(dir.join("patterns.jsonl"))?);
        let mut patterns = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                patterns.push(serde_json::from_str(&line)?);
            }
        }
        if patterns.len() != info.n_clips {
            return Err(Error::Format(format!("{} pattern lines for {} clips", patterns.len(), info.n_clips)));
        }
        Ok(Dataset { info, clips, patterns })
    }
}

/// Fraction of the mean-removed signal's energy within `radius` DFT bins of
/// `rate_hz`, counting positive frequencies only.
pub fn energy_near_rate(signal: &[f64], frame_rate_hz: f64, rate_hz: f64, radius: usize) -> f64 {
    let n = signal.len();
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut spec: Vec<num_complex::Complex64> =
        signal.iter().map(|v| num_complex::Complex64::new(v - mean, 0.0)).collect();
    crate::fft::fft(&mut spec);
    let power: Vec<f64> = spec[..=n / 2].iter().map(|c| c.norm_sqr()).collect();
    let total: f64 = power[1..].iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let k = (rate_hz * n as f64 / frame_rate_hz).round() as usize;
    let lo = k.saturating_sub(radius).max(1);
    let hi = (k + radius).min(power.len() - 1);
    power[lo..=hi].iter().sum::<f64>() / total
}
