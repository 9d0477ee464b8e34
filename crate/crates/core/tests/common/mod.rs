#![allow(dead_code)]

use latentft::diffusion::{example_loss_and_grads, ode_sample, ExampleDraw, NoiseSchedule};
use latentft::rng::{normals, seeded};
use latentft::{MaskKernel, MaskSampler, Model, ModelConfig, SpectrumMeta, Tensor};

/// Worst finite-difference disagreement for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub rel_err: f64,
    pub grad_norm: f64,
}

/// Model with every weight randomised, output layer included. Noise is
/// scaled by fan-in so activations stay of order one at any width.
pub fn random_model(config: ModelConfig, seed: u64) -> Model {
    let mut m = Model::init(config, 0.8, &mut seeded(seed)).unwrap();
    let mut rng = seeded(seed + 1);
    for p in m.params_mut() {
        let fan_in = if p.shape().len() > 1 { p.len() / p.shape()[0] } else { 1 };
        let scale = 0.3 / (fan_in as f64).sqrt().max(1.0);
        let noise = normals(p.len(), &mut rng);
        for (v, e) in p.data_mut().iter_mut().zip(noise) {
            *v += scale * e;
        }
    }
    m
}

/// Compares tape gradients with fourth-order central differences for every
/// scalar parameter of the encoder and denoiser.
pub fn gradient_check(model: &mut Model, frames: usize, sigma: f64, seed: u64) -> Vec<GradReport> {
    let c = model.config.channels;
    let meta = model.config.spectrum_meta(frames).unwrap();
    let mut rng = seeded(seed);
    let x0 = Tensor::new(vec![c, frames], normals(c * frames, &mut rng)).unwrap();
    let keep: Vec<bool> = (0..meta.n_bins()).map(|k| k % 3 != 1).collect();
    let draw = ExampleDraw {
        sigma,
        eps: normals(c * frames, &mut rng),
        keep: Some(keep),
    };
    let (_, grads) = example_loss_and_grads(model, &meta, &x0, &draw, true).unwrap();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let h = 1e-3;
    let mut out = Vec::new();
    for (pi, name) in names.into_iter().enumerate() {
        let len = grads[pi].len();
        let mut worst = 0.0f64;
        for j in 0..len {
            let orig = model.params()[pi].data()[j];
            let mut at = |d: f64| {
                model.params_mut()[pi].data_mut()[j] = orig + d;
                example_loss_and_grads(model, &meta, &x0, &draw, false).unwrap().0
            };
            let num = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            model.params_mut()[pi].data_mut()[j] = orig;
            let ana = grads[pi][j];
            let err = (num - ana).abs() / (num.abs().max(ana.abs()).max(1e-6));
            worst = worst.max(err);
        }
        let grad_norm = grads[pi].iter().map(|g| g * g).sum::<f64>().sqrt();
        out.push(GradReport {
            name,
            rel_err: worst,
            grad_norm,
        });
    }
    out
}

/// Probability-flow sampling of `N(mu, s^2)` with its exact denoiser.
/// Returns the sample mean and variance over `n` trajectories.
pub fn gaussian_toy(mu: f64, s: f64, n: usize, steps: usize, seed: u64) -> (f64, f64) {
    let den = move |x: &Tensor, sigma: f64| -> latentft::Result<Tensor> {
        let w = s * s / (s * s + sigma * sigma);
        let data = x.data().iter().map(|v| w * v + (1.0 - w) * mu).collect();
        Tensor::new(x.shape().to_vec(), data)
    };
    let schedule = NoiseSchedule::default_steps(steps).unwrap();
    let out = ode_sample(&den, &[1, n], &schedule, true, &mut seeded(seed)).unwrap();
    let mean = out.data().iter().sum::<f64>() / n as f64;
    let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

/// Per-bin keep rates and mean kept-run length over `draws` masks.
pub fn mask_statistics(meta: &SpectrumMeta, params: latentft::KernelParams, draws: usize, seed: u64) -> (Vec<f64>, f64) {
    let sampler = MaskSampler::new(MaskKernel::for_meta(meta, params).unwrap());
    let mut rng = seeded(seed);
    let f = meta.n_bins();
    let mut kept = vec![0usize; f];
    let (mut runs, mut run_total) = (0usize, 0usize);
    for _ in 0..draws {
        let m = sampler.sample(&mut rng);
        for (k, &b) in m.keep().iter().enumerate() {
            kept[k] += usize::from(b);
        }
        let r = m.kept_runs();
        runs += r.len();
        run_total += r.iter().sum::<usize>();
    }
    let rates = kept.iter().map(|&k| k as f64 / draws as f64).collect();
    (rates, run_total as f64 / runs.max(1) as f64)
}
