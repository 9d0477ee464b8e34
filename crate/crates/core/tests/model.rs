mod common;

use common::{gaussian_toy, gradient_check, mask_statistics, random_model};
use latentft::diffusion::{example_loss_and_grads, ode_sample, ExampleDraw, NoiseSchedule};
use latentft::rng::{normals, seeded};
use latentft::{KernelParams, Model, ModelConfig, SpectrumMeta, Tensor};

fn tiny() -> ModelConfig {
    ModelConfig {
        channels: 3,
        latent_channels: 2,
        encoder_hidden: 5,
        encoder_layers: 2,
        decoder_hidden: 4,
        decoder_blocks: 2,
        noise_features: 4,
        embed_channels: 2,
        ..Default::default()
    }
}

#[test]
fn full_graph_gradients_match_differences() {
    let mut m = random_model(tiny(), 11);
    for r in gradient_check(&mut m, 12, 0.6, 3) {
        assert!(r.rel_err < 1e-4, "{}: {:e}", r.name, r.rel_err);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let m = random_model(tiny(), 2);
    let meta = m.config.spectrum_meta(16).unwrap();
    let mut rng = seeded(4);
    let x0 = Tensor::new(vec![3, 16], normals(48, &mut rng)).unwrap();
    let draw = ExampleDraw {
        sigma: 1.3,
        eps: normals(48, &mut rng),
        keep: None,
    };
    let (_, grads) = example_loss_and_grads(&m, &meta, &x0, &draw, true).unwrap();
    let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
    for (g, n) in grads.iter().zip(&names) {
        assert!(g.iter().any(|v| *v != 0.0), "{n} has an all-zero gradient");
    }
    // A freshly initialised, zeroed output layer still receives gradient.
    let fresh = Model::init(tiny(), 1.0, &mut seeded(0)).unwrap();
    let (_, grads) = example_loss_and_grads(&fresh, &meta, &x0, &draw, true).unwrap();
    assert!(grads.last().unwrap().iter().any(|v| *v != 0.0));
}

#[test]
fn gaussian_toy_is_reproduced() {
    let (mu, s, n) = (1.5, 0.7, 4000);
    let (mean, var) = gaussian_toy(mu, s, n, 32, 9);
    let se = s / (n as f64).sqrt();
    assert!((mean - mu).abs() < 3.0 * se, "mean {mean}");
    assert!((var / (s * s) - 1.0).abs() < 0.08, "var {var}");
}

#[test]
fn single_step_with_perfect_denoiser_returns_target() {
    let target = Tensor::new(vec![2, 5], (0..10).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
    let t2 = target.clone();
    let den = move |_: &Tensor, _: f64| -> latentft::Result<Tensor> { Ok(t2.clone()) };
    let schedule = NoiseSchedule::default_steps(1).unwrap();
    for seed in 0..5 {
        let out = ode_sample(&den, &[2, 5], &schedule, true, &mut seeded(seed)).unwrap();
        for (a, b) in out.data().iter().zip(target.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn correlated_masks_are_balanced_and_contiguous() {
    let meta = SpectrumMeta::new(128, 2, 64.0).unwrap();
    let (rates, run) = mask_statistics(&meta, KernelParams::default(), 20_000, 1);
    for (k, r) in rates.iter().enumerate() {
        assert!((r - 0.5).abs() < 0.025, "bin {k}: {r}");
    }
    let identity = KernelParams {
        correlate: false,
        ..Default::default()
    };
    let (_, run_id) = mask_statistics(&meta, identity, 20_000, 1);
    assert!(run >= 2.0 * run_id, "{run} vs {run_id}");
}
