//! Noise schedules, forward noising, probability-flow samplers and training.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::latent_dft::{BandpassOperator, LatentSequence, SpectrumMeta};
use crate::mask::{KernelParams, MaskKernel, MaskSampler};
use crate::net::{bandpass_graph, denoiser_graph, encoder_graph, Model};
use crate::rng::normals;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const SIGMA_MAX: f64 = 80.0;
pub const SIGMA_MIN: f64 = 0.002;
pub const RHO: f64 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    pub rho: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl NoiseSchedule {
    /// `sigma_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho`,
    /// followed by a final 0. With `N = 1` the single step goes from
    /// `sigma_max` straight to 0.
    pub fn karras(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if n == 0 {
            return Err(config_err!("schedule needs at least one step"));
        }
        if !(sigma_min > 0.0 && sigma_max > sigma_min && rho > 0.0) {
            return Err(config_err!(
                "need 0 < sigma_min < sigma_max and rho > 0, got {sigma_min}, {sigma_max}, {rho}"
            ));
        }
        let a = sigma_max.powf(1.0 / rho);
        let b = sigma_min.powf(1.0 / rho);
        let mut sigmas: Vec<f64> = if n == 1 {
            vec![sigma_max]
        } else {
            (0..n)
                .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(rho))
                .collect()
        };
        sigmas[0] = sigma_max;
        sigmas.push(0.0);
        Ok(NoiseSchedule {
            sigmas,
            rho,
            sigma_min,
            sigma_max,
        })
    }

    pub fn default_steps(n: usize) -> Result<Self> {
        Self::karras(n, SIGMA_MIN, SIGMA_MAX, RHO)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub heun: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 32,
            heun: true,
            sigma_min: SIGMA_MIN,
            sigma_max: SIGMA_MAX,
            rho: RHO,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::karras(self.steps, self.sigma_min, self.sigma_max, self.rho)
    }
}

pub fn forward_noise<R: Rng + ?Sized>(x0: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("noise level must be non-negative, got {sigma}")));
    }
    let eps = normals(x0.len(), rng);
    add_scaled(x0, sigma, &eps)
}

fn add_scaled(x0: &Tensor, sigma: f64, eps: &[f64]) -> Result<Tensor> {
    let data = x0.data().iter().zip(eps).map(|(x, e)| x + sigma * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Log-normal noise level distribution, clipped to `(0, sigma_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaDistribution {
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_max: f64,
}

impl Default for SigmaDistribution {
    fn default() -> Self {
        SigmaDistribution {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_max: SIGMA_MAX,
        }
    }
}

impl SigmaDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n: f64 = rng.sample(rand_distr::StandardNormal);
        (self.p_mean + self.p_std * n).exp().min(self.sigma_max)
    }
}

/// Anything that maps a noisy state and a noise level to a clean estimate.
pub trait Denoiser: Sync {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor> + Sync,
{
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        self(x, sigma)
    }
}

/// A trained model conditioned on a fixed masked latent.
pub struct Conditioned<'a> {
    pub model: &'a Model,
    pub latent: &'a LatentSequence,
}

impl Denoiser for Conditioned<'_> {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        self.model.denoise(self.latent, x, sigma)
    }
}

fn derivative(den: &dyn Denoiser, x: &Tensor, sigma: f64) -> Result<Vec<f64>> {
    let x0 = den.denoise(x, sigma)?;
    if x0.shape() != x.shape() {
        return Err(dim_err!("denoiser returned {:?} for {:?}", x0.shape(), x.shape()));
    }
    Ok(x.data().iter().zip(x0.data()).map(|(a, b)| (a - b) / sigma).collect())
}

fn integrate<F>(mut x: Vec<f64>, shape: &[usize], schedule: &NoiseSchedule, heun: bool, mut deriv: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Vec<f64>>,
{
    let s = schedule.sigmas();
    for i in 0..schedule.steps() {
        let (cur, next) = (s[i], s[i + 1]);
        let xt = Tensor::new(shape.to_vec(), x)?;
        let d = deriv(&xt, cur)?;
        let dt = next - cur;
        let mut xn: Vec<f64> = xt.data().iter().zip(&d).map(|(a, b)| a + dt * b).collect();
        if heun && next > 0.0 {
            let xnt = Tensor::new(shape.to_vec(), xn)?;
            let d2 = deriv(&xnt, next)?;
            xn = xt
                .data()
                .iter()
                .zip(d.iter().zip(&d2))
                .map(|(a, (b, c))| a + dt * 0.5 * (b + c))
                .collect();
        }
        if let Some(bad) = xn.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: i,
                detail: format!("non-finite state at element {bad}, sigma {cur} -> {next}"),
            });
        }
        x = xn;
    }
    Tensor::new(shape.to_vec(), x)
}

fn initial_state<R: Rng + ?Sized>(shape: &[usize], schedule: &NoiseSchedule, rng: &mut R) -> Vec<f64> {
    let n = shape.iter().product();
    let s0 = schedule.sigmas()[0];
    normals(n, rng).into_iter().map(|e| s0 * e).collect()
}

/// Deterministic probability-flow sampling from `N(0, sigma_max^2)` noise.
pub fn ode_sample<R: Rng + ?Sized>(
    den: &dyn Denoiser,
    shape: &[usize],
    schedule: &NoiseSchedule,
    heun: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let x = initial_state(shape, schedule, rng);
    integrate(x, shape, schedule, heun, |x, s| derivative(den, x, s))
}

/// Sampling with `d = alpha d1 + beta d2`. A branch with zero weight is not
/// evaluated.
#[allow(clippy::too_many_arguments)]
pub fn blend_sample<R: Rng + ?Sized>(
    den1: &dyn Denoiser,
    den2: &dyn Denoiser,
    shape: &[usize],
    schedule: &NoiseSchedule,
    alpha: f64,
    beta: f64,
    heun: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if !(alpha.is_finite() && beta.is_finite()) {
        return Err(config_err!("blend weights must be finite"));
    }
    let x = initial_state(shape, schedule, rng);
    integrate(x, shape, schedule, heun, |x, s| {
        let d1 = if alpha != 0.0 { Some(derivative(den1, x, s)?) } else { None };
        let d2 = if beta != 0.0 { Some(derivative(den2, x, s)?) } else { None };
        Ok(match (d1, d2) {
            (Some(a), Some(b)) => a.iter().zip(&b).map(|(p, q)| alpha * p + beta * q).collect(),
            (Some(a), None) => a.iter().map(|p| alpha * p).collect(),
            (None, Some(b)) => b.iter().map(|q| beta * q).collect(),
            (None, None) => vec![0.0; x.len()],
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Fraction of `total_steps` after which the rate decays on a cosine.
    pub decay_start: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub sigma: SigmaDistribution,
    pub kernel: KernelParams,
    /// Clamp on the mask threshold draw; `None` disables it.
    pub threshold_clamp: Option<f64>,
    pub no_masking: bool,
    pub no_correlation: bool,
    pub no_log_scale: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            warmup_steps: 4000,
            total_steps: 50_000,
            decay_start: 0.5,
            grad_clip: 1.0,
            ema_decay: 0.999,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sigma: SigmaDistribution::default(),
            kernel: KernelParams::default(),
            threshold_clamp: Some(6.0),
            no_masking: false,
            no_correlation: false,
            no_log_scale: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(config_err!("batch size and total steps must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0) {
            return Err(config_err!("learning rate and grad clip must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err!("EMA decay must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.decay_start) {
            return Err(config_err!("decay_start must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Kernel parameters after applying the ablation flags.
    pub fn effective_kernel(&self) -> KernelParams {
        let mut k = self.kernel;
        if self.no_correlation {
            k.correlate = false;
        }
        if self.no_log_scale {
            k.log_axis = false;
        }
        k
    }

    /// Linear warmup, constant, then cosine decay to zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let start = (self.decay_start * self.total_steps as f64) as u64;
        let start = start.max(self.warmup_steps);
        if step < start || self.total_steps <= start {
            return base;
        }
        let p = ((step - start) as f64 / (self.total_steps - start) as f64).min(1.0);
        base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Noise, mask and noise level for one training example.
#[derive(Debug, Clone)]
pub struct ExampleDraw {
    pub sigma: f64,
    pub eps: Vec<f64>,
    pub keep: Option<Vec<bool>>,
}

/// Weighted loss `lambda(sigma) * mean((x0_hat - x0)^2)` and its gradient
/// with respect to every model parameter, in parameter order.
pub fn example_loss_and_grads(
    model: &Model,
    meta: &SpectrumMeta,
    x0: &Tensor,
    draw: &ExampleDraw,
    with_grads: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    model.check_clip(x0)?;
    let mut tape = Tape::new();
    let p = model.register(&mut tape, with_grads);
    let x = tape.constant(x0.clone());
    let z = encoder_graph(&mut tape, &p, x)?;
    let op = match &draw.keep {
        Some(k) => Some(Arc::new(BandpassOperator::new(meta, k.clone())?)),
        None => None,
    };
    let zm = bandpass_graph(&mut tape, z, op)?;
    let x_tau = tape.constant(add_scaled(x0, draw.sigma, &draw.eps)?);
    let out = denoiser_graph(&mut tape, &p, &model.config, &model.precond, zm, x_tau, draw.sigma)?;
    let diff = tape.sub(out, x)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    let w = model.precond.loss_weight(draw.sigma) / x0.len() as f64;
    let loss = tape.scale(total, w);
    let value = tape.value(loss).data()[0];
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = p
        .vars
        .iter()
        .zip(model.params())
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((value, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub mask_density: f64,
}

pub struct Trainer {
    pub model: Model,
    pub ema: Model,
    pub config: TrainConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    sampler: Option<MaskSampler>,
    meta: SpectrumMeta,
    rng: crate::rng::SeededRng,
    batch_rng: crate::rng::SeededRng,
    pub log: Vec<LogRow>,
}

/// Stream of the training seed that picks batch members.
const BATCH_STREAM: u64 = u64::MAX;

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, frames: usize) -> Result<Self> {
        config.validate()?;
        let meta = model.config.spectrum_meta(frames)?;
        let sampler = if config.no_masking {
            None
        } else {
            let kernel = MaskKernel::for_meta(&meta, config.effective_kernel())?;
            let mut s = MaskSampler::new(kernel);
            s.threshold_clamp = config.threshold_clamp;
            Some(s)
        };
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Trainer {
            ema: model.clone(),
            model,
            rng: crate::rng::seeded(config.seed),
            batch_rng: crate::rng::derive(config.seed, BATCH_STREAM),
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            sampler,
            meta,
            log: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn meta(&self) -> &SpectrumMeta {
        &self.meta
    }

    /// One optimizer step on `batch`; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &[&Tensor]) -> Result<f64> {
        if batch.is_empty() {
            return Err(config_err!("empty batch"));
        }
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.random()).collect();
        let draws: Vec<ExampleDraw> = batch
            .iter()
            .zip(&seeds)
            .map(|(x, &s)| {
                let mut r = crate::rng::seeded(s);
                let keep = self.sampler.as_ref().map(|sm| sm.sample(&mut r).keep().to_vec());
                let sigma = self.config.sigma.sample(&mut r);
                let eps = normals(x.len(), &mut r);
                ExampleDraw { sigma, eps, keep }
            })
            .collect();

        let model = &self.model;
        let meta = &self.meta;
        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
            .par_iter()
            .zip(draws.par_iter())
            .map(|(x, d)| example_loss_and_grads(model, meta, x, d, true))
            .collect();

        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Vec<f64>> = self.m.iter().map(|g| vec![0.0; g.len()]).collect();
        for (r, d) in results.into_iter().zip(&draws) {
            let (l, g) = r?;
            if !l.is_finite() {
                return Err(Error::TrainingAborted(format!(
                    "non-finite loss at step {}: sigma {}, mask density {}",
                    self.step,
                    d.sigma,
                    density(&d.keep)
                )));
            }
            loss += l / n;
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += b / n;
                }
            }
        }

        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::TrainingAborted(format!("non-finite gradient at step {}", self.step)));
        }
        let clip = if norm > self.config.grad_clip { self.config.grad_clip / norm } else { 1.0 };

        let lr = self.config.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let (b1, b2, eps) = (self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in self
            .model
            .params_mut()
            .into_iter()
            .zip(&grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }

        let decay = self.config.ema_decay.min((1.0 + self.step as f64) / (10.0 + self.step as f64));
        for (e, p) in self.ema.params_mut().into_iter().zip(self.model.params()) {
            for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }

        let mean_density = draws.iter().map(|d| density(&d.keep)).sum::<f64>() / n;
        self.log.push(LogRow {
            step: self.step,
            loss,
            lr,
            mask_density: mean_density,
        });
        self.step += 1;
        Ok(loss)
    }

    /// Runs `steps` optimizer steps on batches drawn uniformly, with
    /// replacement, from `clips`. `on_step` sees the trainer after each step.
    pub fn fit<F>(&mut self, clips: &[Tensor], steps: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        if clips.is_empty() {
            return Err(config_err!("no training clips"));
        }
        for _ in 0..steps {
            let batch: Vec<&Tensor> = (0..self.config.batch_size)
                .map(|_| &clips[self.batch_rng.random_range(0..clips.len())])
                .collect();
            self.train_step(&batch)?;
            on_step(self)?;
        }
        Ok(())
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,loss,lr,mask_density")?;
        for r in &self.log {
            writeln!(f, "{},{:e},{:e},{}", r.step, r.loss, r.lr, r.mask_density)?;
        }
        f.flush()?;
        Ok(())
    }
}

fn density(keep: &Option<Vec<bool>>) -> f64 {
    match keep {
        Some(k) if !k.is_empty() => k.iter().filter(|&&b| b).count() as f64 / k.len() as f64,
        _ => 1.0,
    }
}

/// Moving average over a trailing window of `w` values.
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Held-out weighted reconstruction loss at fixed draws, without gradients.
pub fn eval_loss(model: &Model, meta: &SpectrumMeta, clips: &[&Tensor], draws: &[ExampleDraw]) -> Result<f64> {
    let losses: Vec<Result<f64>> = clips
        .par_iter()
        .zip(draws.par_iter())
        .map(|(x, d)| example_loss_and_grads(model, meta, x, d, false).map(|r| r.0))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / clips.len() as f64)
}
