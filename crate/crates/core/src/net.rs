//! Frame-wise MLP encoder and dilated-convolution denoiser.
//!
//! The denoiser is wrapped in the usual diffusion preconditioning:
//! `x0_hat = c_skip * x + c_out * F(c_in * x ++ z_masked ++ emb(c_noise))`.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::latent_dft::{BandpassOperator, LatentSequence, SpectrumMeta};
use crate::tape::{Tape, Var};
use crate::tensor::{Dtype, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preconditioning {
    pub sigma_data: f64,
}

impl Preconditioning {
    pub fn new(sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(config_err!("sigma_data must be positive, got {sigma_data}"));
        }
        Ok(Preconditioning { sigma_data })
    }

    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        0.25 * sigma.ln()
    }

    /// `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input channels `C`.
    pub channels: usize,
    /// Latent channels `C'`.
    pub latent_channels: usize,
    pub frame_rate_hz: f64,
    /// Zero-padding factor applied before the latent transform.
    pub pad_factor: usize,
    pub encoder_hidden: usize,
    /// Linear layers in the encoder, input and output layers included.
    pub encoder_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_blocks: usize,
    pub kernel_size: usize,
    /// Number of sinusoidal noise-level features (even).
    pub noise_features: usize,
    /// Channels the projected noise embedding contributes to the input.
    pub embed_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            latent_channels: 16,
            frame_rate_hz: 64.0,
            pad_factor: 2,
            encoder_hidden: 128,
            encoder_layers: 4,
            decoder_hidden: 64,
            decoder_blocks: 8,
            kernel_size: 3,
            noise_features: 16,
            embed_channels: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.latent_channels == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        if self.encoder_layers < 2 {
            return Err(config_err!("encoder needs at least 2 layers"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(config_err!("kernel size must be odd"));
        }
        if self.noise_features == 0 || self.noise_features % 2 != 0 {
            return Err(config_err!("noise_features must be a positive even number"));
        }
        if self.pad_factor == 0 || !(self.frame_rate_hz > 0.0) {
            return Err(config_err!("pad factor and frame rate must be positive"));
        }
        Ok(())
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << block.min(16)
    }

    /// Frames seen by one output frame of the denoiser.
    pub fn receptive_field_frames(&self) -> usize {
        let half = self.kernel_size - 1;
        1 + half * (1 + (0..self.decoder_blocks).map(|b| self.dilation(b)).sum::<usize>())
    }

    pub fn spectrum_meta(&self, frames: usize) -> Result<SpectrumMeta> {
        SpectrumMeta::new(frames, self.pad_factor, self.frame_rate_hz)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out, 1]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, k]`
    pub weight: Tensor,
    /// `[out, 1]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv: ConvLayer,
    pub mix: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub embed: Dense,
    pub input: ConvLayer,
    pub blocks: Vec<ResBlock>,
    pub output: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub denoiser: DenoiserParams,
    pub precond: Preconditioning,
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("shape product")
}

fn dense<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Dense {
    Dense {
        weight: he_uniform(&[out, inp], inp, rng),
        bias: Tensor::zeros(&[out, 1]),
    }
}

fn conv<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, rng: &mut R) -> ConvLayer {
    ConvLayer {
        weight: he_uniform(&[out, inp, k], inp * k, rng),
        bias: Tensor::zeros(&[out, 1]),
    }
}

impl Model {
    /// Fresh parameters. The decoder's output layer starts at zero, so an
    /// untrained model predicts `c_skip * x`.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, sigma_data: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let precond = Preconditioning::new(sigma_data)?;
        let c = &config;
        let mut layers = vec![dense(c.encoder_hidden, c.channels, rng)];
        for _ in 0..c.encoder_layers - 2 {
            layers.push(dense(c.encoder_hidden, c.encoder_hidden, rng));
        }
        layers.push(dense(c.latent_channels, c.encoder_hidden, rng));

        let h = c.decoder_hidden;
        let embed = dense(c.embed_channels, c.noise_features, rng);
        let input = conv(h, c.channels + c.latent_channels + c.embed_channels, c.kernel_size, rng);
        let blocks = (0..c.decoder_blocks)
            .map(|_| ResBlock {
                conv: conv(h, h, c.kernel_size, rng),
                mix: conv(h, h, 1, rng),
            })
            .collect();
        let output = ConvLayer {
            weight: Tensor::zeros(&[c.channels, h, 1]),
            bias: Tensor::zeros(&[c.channels, 1]),
        };
        Ok(Model {
            config,
            encoder: EncoderParams { layers },
            denoiser: DenoiserParams {
                embed,
                input,
                blocks,
                output,
            },
            precond,
        })
    }

    /// Parameters in a fixed order shared by every traversal.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        let d = &self.denoiser;
        out.push(("decoder.embed.weight".into(), &d.embed.weight));
        out.push(("decoder.embed.bias".into(), &d.embed.bias));
        out.push(("decoder.input.weight".into(), &d.input.weight));
        out.push(("decoder.input.bias".into(), &d.input.bias));
        for (i, b) in d.blocks.iter().enumerate() {
            out.push((format!("decoder.block{i}.conv.weight"), &b.conv.weight));
            out.push((format!("decoder.block{i}.conv.bias"), &b.conv.bias));
            out.push((format!("decoder.block{i}.mix.weight"), &b.mix.weight));
            out.push((format!("decoder.block{i}.mix.bias"), &b.mix.bias));
        }
        out.push(("decoder.output.weight".into(), &d.output.weight));
        out.push(("decoder.output.bias".into(), &d.output.bias));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in self.encoder.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        let d = &mut self.denoiser;
        out.push(&mut d.embed.weight);
        out.push(&mut d.embed.bias);
        out.push(&mut d.input.weight);
        out.push(&mut d.input.bias);
        for b in d.blocks.iter_mut() {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.mix.weight);
            out.push(&mut b.mix.bias);
        }
        out.push(&mut d.output.weight);
        out.push(&mut d.output.bias);
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .params()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars {
            vars,
            encoder_layers: self.encoder.layers.len(),
            decoder_blocks: self.denoiser.blocks.len(),
        }
    }

    pub fn check_clip(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.rows() != self.config.channels {
            return Err(dim_err!(
                "expected a [{}, T] clip, got {:?}",
                self.config.channels,
                x.shape()
            ));
        }
        Ok(())
    }

    pub fn encode(&self, x0: &Tensor) -> Result<LatentSequence> {
        self.check_clip(x0)?;
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let x = tape.constant(x0.clone());
        let z = encoder_graph(&mut tape, &p, x)?;
        LatentSequence::new(tape.value(z).clone(), self.config.frame_rate_hz)
    }

    /// `c_skip * x_tau + c_out * F(...)`, the clean-clip estimate.
    pub fn denoise(&self, z_masked: &LatentSequence, x_tau: &Tensor, sigma: f64) -> Result<Tensor> {
        if !(sigma > 0.0) {
            return Err(Error::Domain(format!("noise level must be positive, got {sigma}")));
        }
        self.check_clip(x_tau)?;
        if z_masked.channels() != self.config.latent_channels || z_masked.frames() != x_tau.cols() {
            return Err(dim_err!(
                "latent {}x{} does not match clip {:?}",
                z_masked.channels(),
                z_masked.frames(),
                x_tau.shape()
            ));
        }
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let z = tape.constant(z_masked.values().clone());
        let x = tape.constant(x_tau.clone());
        let out = denoiser_graph(&mut tape, &p, &self.config, &self.precond, z, x, sigma)?;
        Ok(tape.value(out).clone())
    }

    /// Encodes `x0` and keeps only the latent frequencies selected by `keep`.
    pub fn masked_latent(&self, x0: &Tensor, keep: &[bool]) -> Result<LatentSequence> {
        let z = self.encode(x0)?;
        let meta = self.config.spectrum_meta(z.frames())?;
        let op = BandpassOperator::new(&meta, keep.to_vec())?;
        let t = z.frames();
        let mut out = vec![0.0; z.values().len()];
        for (src, dst) in z.values().data().chunks(t).zip(out.chunks_mut(t)) {
            crate::tape::RowOperator::apply(&op, src, dst);
        }
        LatentSequence::new(Tensor::new(z.values().shape().to_vec(), out)?, z.frame_rate_hz())
    }

    pub fn save(&self, dir: impl AsRef<Path>, step: u64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (name, t) in self.named_params() {
            t.save(dir.join(format!("{name}.lft")), Dtype::F32)?;
            names.push(name);
        }
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            sigma_data: self.precond.sigma_data,
            frame_rate_hz: self.config.frame_rate_hz,
            pad_factor: self.config.pad_factor,
            step,
            params: names,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::init(manifest.config.clone(), manifest.sigma_data, &mut rng)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if names != manifest.params {
            return Err(Error::Format("checkpoint parameter list does not match config".into()));
        }
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = Tensor::load(dir.join(format!("{name}.lft")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("{name}: shape {:?}", t.shape())));
            }
            *slot = t;
        }
        Ok((model, manifest))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub sigma_data: f64,
    pub frame_rate_hz: f64,
    pub pad_factor: usize,
    pub step: u64,
    pub params: Vec<String>,
}

/// Tape handles for every parameter, in [`Model::named_params`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
    encoder_layers: usize,
    decoder_blocks: usize,
}

impl ParamVars {
    fn encoder(&self, layer: usize) -> (Var, Var) {
        (self.vars[2 * layer], self.vars[2 * layer + 1])
    }

    fn dec(&self, offset: usize) -> Var {
        self.vars[2 * self.encoder_layers + offset]
    }

    fn embed(&self) -> (Var, Var) {
        (self.dec(0), self.dec(1))
    }

    fn input(&self) -> (Var, Var) {
        (self.dec(2), self.dec(3))
    }

    fn block(&self, b: usize) -> (Var, Var, Var, Var) {
        let o = 4 + 4 * b;
        (self.dec(o), self.dec(o + 1), self.dec(o + 2), self.dec(o + 3))
    }

    fn output(&self) -> (Var, Var) {
        let o = 4 + 4 * self.decoder_blocks;
        (self.dec(o), self.dec(o + 1))
    }
}

/// Frame-wise MLP: every column of `x` goes through the same layers.
pub fn encoder_graph(tape: &mut Tape, p: &ParamVars, x: Var) -> Result<Var> {
    let n = p.encoder_layers;
    let (w, b) = p.encoder(0);
    let h = tape.matmul(w, x)?;
    let mut h = tape.add(h, b)?;
    for layer in 1..n - 1 {
        let (w, b) = p.encoder(layer);
        let a = tape.silu(h);
        let r = tape.matmul(w, a)?;
        let r = tape.add(r, b)?;
        h = tape.add(h, r)?;
    }
    let (w, b) = p.encoder(n - 1);
    let a = tape.silu(h);
    let out = tape.matmul(w, a)?;
    tape.add(out, b)
}

/// Sinusoidal features of `c_noise`, shape `[n, 1]`.
pub fn noise_features(c_noise: f64, n: usize) -> Tensor {
    let half = n / 2;
    let mut v = Vec::with_capacity(n);
    for j in 0..half {
        let w = std::f64::consts::PI * 2f64.powi(j as i32 - 1);
        v.push((w * c_noise).cos());
    }
    for j in 0..half {
        let w = std::f64::consts::PI * 2f64.powi(j as i32 - 1);
        v.push((w * c_noise).sin());
    }
    Tensor::new(vec![n, 1], v).expect("n features")
}

/// Preconditioned denoiser; returns the clean-clip estimate.
pub fn denoiser_graph(
    tape: &mut Tape,
    p: &ParamVars,
    config: &ModelConfig,
    precond: &Preconditioning,
    z_masked: Var,
    x_tau: Var,
    sigma: f64,
) -> Result<Var> {
    let frames = tape.value(x_tau).cols();
    let feats = tape.constant(noise_features(precond.c_noise(sigma), config.noise_features));
    let (ew, eb) = p.embed();
    let emb = tape.matmul(ew, feats)?;
    let emb = tape.add(emb, eb)?;
    let emb = tape.broadcast_cols(emb, frames)?;

    let x_in = tape.scale(x_tau, precond.c_in(sigma));
    let inp = tape.concat_rows(&[x_in, z_masked, emb])?;
    let (iw, ib) = p.input();
    let mut h = tape.conv1d(inp, iw, ib, 1)?;
    for b in 0..p.decoder_blocks {
        let (cw, cb, mw, mb) = p.block(b);
        let a = tape.silu(h);
        let r = tape.conv1d(a, cw, cb, config.dilation(b))?;
        let r = tape.silu(r);
        let r = tape.conv1d(r, mw, mb, 1)?;
        h = tape.add(h, r)?;
    }
    let a = tape.silu(h);
    let (ow, ob) = p.output();
    let f = tape.conv1d(a, ow, ob, 1)?;
    let f = tape.scale(f, precond.c_out(sigma));
    let skip = tape.scale(x_tau, precond.c_skip(sigma));
    tape.add(skip, f)
}

/// Applies a latent-frequency mask inside a graph.
pub fn bandpass_graph(tape: &mut Tape, z: Var, op: Option<Arc<BandpassOperator>>) -> Result<Var> {
    match op {
        Some(op) if !op.is_identity() => tape.row_map(z, op),
        _ => Ok(z),
    }
}
