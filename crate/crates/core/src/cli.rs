//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::diffusion::{SamplerConfig, TrainConfig, Trainer};
use crate::error::{config_err, Error, Result};
use crate::latent_dft::{analyze, LatentSequence, SpectrumMeta};
use crate::mask::{FrequencyMask, MaskSpec};
use crate::metrics::{aggregate, band_adherence, write_rows_csv, write_summary_csv, DescriptorKind, ReportRow};
use crate::net::{Model, ModelConfig};
use crate::synth::{Dataset, SynthConfig};
use crate::tasks::{self, SamplingOptions};
use crate::tensor::{Dtype, Tensor};

#[derive(Debug, Parser)]
#[command(name = "latentft", version, about = "Latent-frequency masked diffusion autoencoder")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    SynthData(SynthArgs),
    /// Train an encoder and denoiser on a dataset.
    Train(TrainArgs),
    /// Encode a clip to its latent sequence.
    Encode(EncodeArgs),
    /// Latent spectrum of a clip or latent sequence.
    Spectrum(SpectrumArgs),
    /// Print the bins a mask keeps, as CSV.
    MaskPreview(MaskPreviewArgs),
    /// Conditional generation from one masked reference.
    Generate(GenerateArgs),
    /// Blend two references under two masks.
    Blend(BlendArgs),
    /// Emphasize one band of a reference.
    Isolate(IsolateArgs),
    /// Slide a frequency window across the spectrum and score patterns.
    Sweep(SweepArgs),
    /// Band adherence for (reference, generation, band) triples.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    pub n_clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with a "synth" section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub frame_rate: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with optional "model" and "train" sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save an EMA checkpoint every K steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Train with the all-ones mask only.
    #[arg(long)]
    pub no_masking: bool,
    /// Sample mask bins independently.
    #[arg(long)]
    pub no_correlation: bool,
    /// Correlate mask bins on a linear frequency axis.
    #[arg(long)]
    pub no_log_scale: bool,
    #[arg(long)]
    pub latent_channels: Option<usize>,
    #[arg(long)]
    pub encoder_hidden: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_hidden: Option<usize>,
    #[arg(long)]
    pub decoder_blocks: Option<usize>,
    #[arg(long)]
    pub pad: Option<usize>,
}

/// A clip read from an LFT1 file; rank-3 files are indexed.
#[derive(Debug, Args, Clone)]
pub struct ClipArg {
    /// Clip file, `[C, T]` or `[N, C, T]`.
    #[arg(long)]
    pub input: PathBuf,
    /// Clip index within a rank-3 file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Debug, Args, Clone)]
pub struct MaskArg {
    /// Bands `lo:hi[,lo:hi...]` in Hz, or `all` / `none`.
    #[arg(long, alias = "bands")]
    pub mask: Option<String>,
    /// Explicit bin indices `k[,k...]`.
    #[arg(long)]
    pub bins: Option<String>,
    /// Mask JSON file.
    #[arg(long)]
    pub mask_file: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub variations: usize,
    /// Sampler steps.
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    /// First-order steps without the Heun correction.
    #[arg(long)]
    pub euler: bool,
}

impl SamplerArgs {
    fn options(&self) -> SamplingOptions {
        SamplingOptions {
            sampler: SamplerConfig {
                steps: self.steps,
                heun: !self.euler,
                ..Default::default()
            },
            seed: self.seed,
            n_variations: self.variations,
        }
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub clip: ClipArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    /// Checkpoint directory; the input is then a clip.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Clip (with `--model`) or latent sequence file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Frame rate of a latent input.
    #[arg(long)]
    pub frame_rate: Option<f64>,
    #[arg(long)]
    pub pad: Option<usize>,
    /// Output spectrum; a `.json` sidecar is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskPreviewArgs {
    #[command(flatten)]
    pub mask: MaskArg,
    /// Latent frames `T'`.
    #[arg(long)]
    pub frames: usize,
    #[arg(long, default_value_t = 2)]
    pub pad: usize,
    #[arg(long)]
    pub frame_rate: f64,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub clip: ClipArg,
    #[command(flatten)]
    pub mask: MaskArg,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BlendArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input_a: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index_a: usize,
    #[arg(long)]
    pub input_b: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index_b: usize,
    /// Bands for the first reference.
    #[arg(long)]
    pub bands_a: Option<String>,
    #[arg(long)]
    pub bins_a: Option<String>,
    #[arg(long)]
    pub bands_b: Option<String>,
    #[arg(long)]
    pub bins_b: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IsolateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub clip: ClipArg,
    #[command(flatten)]
    pub mask: MaskArg,
    /// Weight of the full latent.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Weight of the band-limited latent.
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory holding the clip and its pattern records.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = tasks::SWEEP_WINDOW_BINS)]
    pub window: usize,
    #[arg(long, default_value_t = tasks::SWEEP_WINDOW_BINS)]
    pub stride: usize,
    /// Gaussian smoothing std, in window positions.
    #[arg(long, default_value_t = 1.0)]
    pub smooth: f64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// JSON manifest of comparisons.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for `rows.csv` and `summary.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub checkpoint_hash: Option<String>,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Hash over the sorted file names and contents of a directory (not
/// recursive).
pub fn sha256_dir(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap_or_default().to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(std::fs::read(&p)?);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `all`, `none`, or `lo:hi[,lo:hi...]`.
pub fn parse_bands(s: &str) -> Result<MaskSpec> {
    let s = s.trim();
    match s {
        "all" => return Ok(MaskSpec::all()),
        "none" => return Ok(MaskSpec::none()),
        _ => {}
    }
    let mut bands = Vec::new();
    for part in s.split(',') {
        let (lo, hi) = part
            .split_once(':')
            .ok_or_else(|| config_err!("band '{part}' is not lo:hi"))?;
        let lo: f64 = lo.trim().parse().map_err(|_| config_err!("bad band edge '{lo}'"))?;
        let hi: f64 = hi.trim().parse().map_err(|_| config_err!("bad band edge '{hi}'"))?;
        bands.push([lo, hi]);
    }
    Ok(MaskSpec::Bands { bands_hz: bands })
}

pub fn parse_bins(s: &str) -> Result<MaskSpec> {
    let bins = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| config_err!("bad bin index '{p}'")))
        .collect::<Result<Vec<usize>>>()?;
    Ok(MaskSpec::Bins { bins })
}

fn mask_spec(bands: Option<&str>, bins: Option<&str>, file: Option<&Path>) -> Result<MaskSpec> {
    match (bands, bins, file) {
        (Some(b), None, None) => parse_bands(b),
        (None, Some(b), None) => parse_bins(b),
        (None, None, Some(f)) => MaskSpec::load(f),
        (None, None, None) => Err(config_err!("a mask is required (--mask, --bins or --mask-file)")),
        _ => Err(config_err!("give exactly one of --mask, --bins, --mask-file")),
    }
}

impl MaskArg {
    fn spec(&self) -> Result<MaskSpec> {
        mask_spec(self.mask.as_deref(), self.bins.as_deref(), self.mask_file.as_deref())
    }
}

pub fn load_clip(path: &Path, index: usize) -> Result<Tensor> {
    let t = Tensor::load(path)?;
    match t.rank() {
        2 => Ok(t),
        3 => {
            let (n, c, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            if index >= n {
                return Err(Error::Index(format!("clip {index} of {n}")));
            }
            Tensor::new(vec![c, w], t.data()[index * c * w..(index + 1) * c * w].to_vec())
        }
        r => Err(Error::Dimension(format!("clip file has rank {r}"))),
    }
}

fn read_config_section(path: Option<&Path>, section: &str) -> Result<Value> {
    let Some(p) = path else { return Ok(json!({})) };
    let v: Value = serde_json::from_slice(&std::fs::read(p)?)?;
    Ok(v.get(section).cloned().unwrap_or_else(|| json!({})))
}

/// Overlays the keys of `over` on the serialized defaults.
fn merge<T: Serialize + for<'de> Deserialize<'de>>(defaults: &T, over: Value) -> Result<T> {
    let mut base = serde_json::to_value(defaults)?;
    if let (Some(b), Value::Object(o)) = (base.as_object_mut(), over) {
        for (k, v) in o {
            if !b.contains_key(&k) {
                return Err(config_err!("unknown config key '{k}'"));
            }
            b.insert(k, v);
        }
    }
    Ok(serde_json::from_value(base)?)
}

struct Run {
    command: &'static str,
    args: Vec<String>,
    config: Value,
    seed: Option<u64>,
    checkpoint_hash: Option<String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    start: Instant,
}

impl Run {
    fn new(command: &'static str, args: &[String]) -> Self {
        Run {
            command,
            args: args.to_vec(),
            config: json!({}),
            seed: None,
            checkpoint_hash: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let h = if path.is_dir() { sha256_dir(path)? } else { sha256_file(path)? };
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    fn checkpoint(&mut self, dir: &Path) -> Result<()> {
        self.checkpoint_hash = Some(sha256_dir(dir)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn finish(self, manifest_path: &Path) -> Result<()> {
        let m = RunManifest {
            command: self.command.into(),
            args: self.args,
            config: self.config,
            seed: self.seed,
            checkpoint_hash: self.checkpoint_hash,
            input_hashes: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        std::fs::write(manifest_path, serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }
}

fn load_model(run: &mut Run, dir: &Path) -> Result<Model> {
    run.checkpoint(dir)?;
    Ok(Model::load(dir)?.0)
}

fn write_clips(run: &mut Run, dir: &Path, clips: &[Tensor]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, c) in clips.iter().enumerate() {
        let p = dir.join(format!("gen_{i:03}.lft"));
        c.save(&p, Dtype::F64)?;
        run.output(&p);
    }
    Ok(())
}

fn resolve_for(model: &Model, y: &Tensor, spec: &MaskSpec) -> Result<FrequencyMask> {
    spec.resolve(&tasks::spectrum_meta(model, y)?)
}

fn cmd_synth(a: &SynthArgs, run: &mut Run) -> Result<()> {
    let mut over = read_config_section(a.config.as_deref(), "synth")?;
    if let Value::Object(o) = &mut over {
        if let Some(v) = a.channels {
            o.insert("channels".into(), json!(v));
        }
        if let Some(v) = a.frames {
            o.insert("frames".into(), json!(v));
        }
        if let Some(v) = a.frame_rate {
            o.insert("frame_rate_hz".into(), json!(v));
        }
        if let Some(v) = a.noise_std {
            o.insert("noise_std".into(), json!(v));
        }
    }
    let cfg: SynthConfig = merge(&SynthConfig::default(), over)?;
    if let Some(c) = &a.config {
        run.input(c)?;
    }
    let ds = Dataset::generate(&cfg, a.n_clips, a.seed)?;
    ds.save(&a.out)?;
    eprintln!("wrote {} clips to {}", a.n_clips, a.out.display());
    run.config = serde_json::to_value(&cfg)?;
    run.seed = Some(a.seed);
    for f in ["signals.lft", "patterns.jsonl", "dataset.json"] {
        run.output(&a.out.join(f));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, run: &mut Run) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    run.input(&a.data.join("signals.lft"))?;
    if let Some(c) = &a.config {
        run.input(c)?;
    }
    let mut model_over = read_config_section(a.config.as_deref(), "model")?;
    let mut train_over = read_config_section(a.config.as_deref(), "train")?;
    if let Value::Object(o) = &mut model_over {
        o.entry("channels").or_insert(json!(ds.info.config.channels));
        o.entry("frame_rate_hz").or_insert(json!(ds.info.config.frame_rate_hz));
        for (k, v) in [
            ("latent_channels", a.latent_channels),
            ("encoder_hidden", a.encoder_hidden),
            ("encoder_layers", a.encoder_layers),
            ("decoder_hidden", a.decoder_hidden),
            ("decoder_blocks", a.decoder_blocks),
            ("pad_factor", a.pad),
        ] {
            if let Some(v) = v {
                o.insert(k.into(), json!(v));
            }
        }
    }
    if let Value::Object(o) = &mut train_over {
        if let Some(v) = a.steps {
            o.insert("total_steps".into(), json!(v));
        }
        if let Some(v) = a.batch_size {
            o.insert("batch_size".into(), json!(v));
        }
        if let Some(v) = a.lr {
            o.insert("learning_rate".into(), json!(v));
        }
        if let Some(v) = a.warmup {
            o.insert("warmup_steps".into(), json!(v));
        }
        if let Some(v) = a.seed {
            o.insert("seed".into(), json!(v));
        }
        for (k, on) in [
            ("no_masking", a.no_masking),
            ("no_correlation", a.no_correlation),
            ("no_log_scale", a.no_log_scale),
        ] {
            if on {
                o.insert(k.into(), json!(true));
            }
        }
    }
    let mcfg: ModelConfig = merge(&ModelConfig::default(), model_over)?;
    let tcfg: TrainConfig = merge(&TrainConfig::default(), train_over)?;
    let sigma_data = crate::synth::dataset_stats(&ds.clips)?.std;
    let model = Model::init(mcfg.clone(), sigma_data, &mut crate::rng::seeded(tcfg.seed))?;
    eprintln!("training {} parameters for {} steps", model.n_params(), tcfg.total_steps);
    let mut trainer = Trainer::new(model, tcfg.clone(), ds.info.config.frames)?;
    std::fs::create_dir_all(&a.out)?;
    let every = a.checkpoint_every;
    let out = a.out.clone();
    let total = tcfg.total_steps;
    trainer.fit(&ds.clips, total, |t| {
        let s = t.step();
        if every > 0 && s % every == 0 && s < total {
            t.ema.save(out.join("checkpoints").join(format!("step_{s:06}")), s)?;
        }
        if s % 100 == 0 || s == total {
            let last = t.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
            eprintln!("step {s}/{total} loss {last:.4}");
        }
        Ok(())
    })?;
    let ckpt = a.out.join("checkpoint");
    trainer.ema.save(&ckpt, trainer.step())?;
    let log = a.out.join("train_log.csv");
    trainer.write_log(&log)?;
    run.config = json!({ "model": mcfg, "train": tcfg, "sigma_data": sigma_data });
    run.seed = Some(tcfg.seed);
    run.output(&ckpt);
    run.output(&log);
    Ok(())
}

fn cmd_encode(a: &EncodeArgs, run: &mut Run) -> Result<()> {
    let model = load_model(run, &a.model)?;
    run.input(&a.clip.input)?;
    let y = load_clip(&a.clip.input, a.clip.index)?;
    let z = model.encode(&y)?;
    z.values().save(&a.out, Dtype::F64)?;
    run.output(&a.out);
    run.config = json!({ "index": a.clip.index, "frame_rate_hz": z.frame_rate_hz() });
    Ok(())
}

fn cmd_spectrum(a: &SpectrumArgs, run: &mut Run) -> Result<()> {
    run.input(&a.input)?;
    let (z, pad) = match &a.model {
        Some(dir) => {
            let model = load_model(run, dir)?;
            let y = load_clip(&a.input, a.index)?;
            (model.encode(&y)?, a.pad.unwrap_or(model.config.pad_factor))
        }
        None => {
            let f_r = a
                .frame_rate
                .ok_or_else(|| config_err!("--frame-rate is required for a latent input"))?;
            (LatentSequence::new(load_clip(&a.input, a.index)?, f_r)?, a.pad.unwrap_or(2))
        }
    };
    let spec = analyze(&z, pad)?;
    spec.save(&a.out)?;
    run.output(&a.out);
    run.config = json!({ "pad": pad, "frame_rate_hz": z.frame_rate_hz(), "index": a.index });
    Ok(())
}

fn mask_csv(mask: &FrequencyMask, meta: &SpectrumMeta) -> Result<String> {
    let mut s = String::from("bin,freq_hz,kept\n");
    for (k, &kept) in mask.keep().iter().enumerate() {
        s.push_str(&format!("{k},{},{}\n", meta.bin_frequency(k)?, u8::from(kept)));
    }
    Ok(s)
}

fn cmd_mask_preview(a: &MaskPreviewArgs, run: &mut Run) -> Result<()> {
    let meta = SpectrumMeta::new(a.frames, a.pad, a.frame_rate)?;
    let spec = a.mask.spec()?;
    let mask = spec.resolve(&meta)?;
    let csv = mask_csv(&mask, &meta)?;
    run.config = json!({ "mask": spec, "meta": meta });
    match &a.out {
        Some(p) => {
            std::fs::write(p, csv)?;
            run.output(p);
        }
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn cmd_generate(a: &GenerateArgs, run: &mut Run) -> Result<()> {
    let model = load_model(run, &a.model)?;
    run.input(&a.clip.input)?;
    let y = load_clip(&a.clip.input, a.clip.index)?;
    let spec = a.mask.spec()?;
    let mask = resolve_for(&model, &y, &spec)?;
    let opts = a.sampler.options();
    let clips = tasks::conditional_generate(&model, &y, &mask, &opts)?;
    write_clips(run, &a.out, &clips)?;
    run.seed = Some(opts.seed);
    run.config = json!({ "mask": spec, "kept_bins": mask.kept_bins(), "sampling": opts, "index": a.clip.index });
    Ok(())
}

fn cmd_blend(a: &BlendArgs, run: &mut Run) -> Result<()> {
    let model = load_model(run, &a.model)?;
    run.input(&a.input_a)?;
    run.input(&a.input_b)?;
    let y1 = load_clip(&a.input_a, a.index_a)?;
    let y2 = load_clip(&a.input_b, a.index_b)?;
    let s1 = mask_spec(a.bands_a.as_deref(), a.bins_a.as_deref(), None)?;
    let s2 = mask_spec(a.bands_b.as_deref(), a.bins_b.as_deref(), None)?;
    let m1 = resolve_for(&model, &y1, &s1)?;
    let m2 = resolve_for(&model, &y2, &s2)?;
    let opts = a.sampler.options();
    let out = tasks::blend(&model, &y1, &y2, &m1, &m2, a.alpha, a.beta, &opts)?;
    if out.overlapping {
        eprintln!("warning: the two masks share bins");
    }
    write_clips(run, &a.out, &out.clips)?;
    run.seed = Some(opts.seed);
    run.config = json!({
        "mask_a": s1, "mask_b": s2, "alpha": a.alpha, "beta": a.beta,
        "sampling": opts, "index_a": a.index_a, "index_b": a.index_b,
    });
    Ok(())
}

fn cmd_isolate(a: &IsolateArgs, run: &mut Run) -> Result<()> {
    let model = load_model(run, &a.model)?;
    run.input(&a.clip.input)?;
    let y = load_clip(&a.clip.input, a.clip.index)?;
    let spec = a.mask.spec()?;
    let band = resolve_for(&model, &y, &spec)?;
    let opts = a.sampler.options();
    let clips = tasks::isolate(&model, &y, &band, a.alpha, a.beta, &opts)?;
    write_clips(run, &a.out, &clips)?;
    run.seed = Some(opts.seed);
    run.config = json!({ "band": spec, "alpha": a.alpha, "beta": a.beta, "sampling": opts, "index": a.clip.index });
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, run: &mut Run) -> Result<()> {
    let model = load_model(run, &a.model)?;
    let ds = Dataset::load(&a.data)?;
    run.input(&a.data.join("signals.lft"))?;
    let y = ds
        .clips
        .get(a.index)
        .ok_or_else(|| Error::Index(format!("clip {} of {}", a.index, ds.clips.len())))?;
    let opts = a.sampler.options();
    let r = tasks::sweep(&model, y, &ds.patterns[a.index], a.window, a.stride, a.smooth, &opts)?;
    r.write_csv(&a.out)?;
    run.output(&a.out);
    run.seed = Some(opts.seed);
    run.config = json!({ "index": a.index, "window": a.window, "stride": a.stride, "smooth": a.smooth, "sampling": opts });
    Ok(())
}

/// One comparison in a metrics manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub reference: PathBuf,
    #[serde(default)]
    pub reference_index: usize,
    pub generation: PathBuf,
    #[serde(default)]
    pub generation_index: usize,
    pub band_hz: [f64; 2],
    #[serde(default = "default_task")]
    pub task: String,
    /// Band label; defaults to `lo-hi`.
    #[serde(default)]
    pub band: Option<String>,
}

fn default_task() -> String {
    "generate".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsManifest {
    pub frame_rate_hz: f64,
    pub entries: Vec<MetricsEntry>,
}

fn cmd_metrics(a: &MetricsArgs, run: &mut Run) -> Result<()> {
    run.input(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let m: MetricsManifest = serde_json::from_slice(&std::fs::read(&a.manifest)?)?;
    let mut rows = Vec::new();
    for e in &m.entries {
        let r = load_clip(&base.join(&e.reference), e.reference_index)?;
        let g = load_clip(&base.join(&e.generation), e.generation_index)?;
        let band = (e.band_hz[0], e.band_hz[1]);
        let label = e.band.clone().unwrap_or_else(|| format!("{}-{}", band.0, band.1));
        for kind in [DescriptorKind::Loudness, DescriptorKind::Onset] {
            rows.push(ReportRow {
                task: e.task.clone(),
                band: label.clone(),
                metric: kind.name().into(),
                value: band_adherence(&r, &g, band, kind, m.frame_rate_hz)?,
            });
        }
    }
    std::fs::create_dir_all(&a.out)?;
    let rows_path = a.out.join("rows.csv");
    let summary_path = a.out.join("summary.csv");
    write_rows_csv(&rows_path, &rows)?;
    write_summary_csv(&summary_path, &aggregate(&rows)?)?;
    run.output(&rows_path);
    run.output(&summary_path);
    run.config = serde_json::to_value(&m)?;
    Ok(())
}

fn manifest_path(command: &Command) -> Option<PathBuf> {
    let dir_or_sibling = |p: &Path, is_dir: bool| {
        if is_dir {
            p.join("run.json")
        } else {
            let mut s = p.as_os_str().to_owned();
            s.push(".run.json");
            PathBuf::from(s)
        }
    };
    Some(match command {
        Command::SynthData(a) => dir_or_sibling(&a.out, true),
        Command::Train(a) => dir_or_sibling(&a.out, true),
        Command::Encode(a) => dir_or_sibling(&a.out, false),
        Command::Spectrum(a) => dir_or_sibling(&a.out, false),
        Command::MaskPreview(a) => dir_or_sibling(a.out.as_ref()?, false),
        Command::Generate(a) => dir_or_sibling(&a.out, true),
        Command::Blend(a) => dir_or_sibling(&a.out, true),
        Command::Isolate(a) => dir_or_sibling(&a.out, true),
        Command::Sweep(a) => dir_or_sibling(&a.out, false),
        Command::Metrics(a) => dir_or_sibling(&a.out, true),
    })
}

fn execute(cli: &Cli, args: &[String]) -> Result<()> {
    let name = match &cli.command {
        Command::SynthData(_) => "synth-data",
        Command::Train(_) => "train",
        Command::Encode(_) => "encode",
        Command::Spectrum(_) => "spectrum",
        Command::MaskPreview(_) => "mask-preview",
        Command::Generate(_) => "generate",
        Command::Blend(_) => "blend",
        Command::Isolate(_) => "isolate",
        Command::Sweep(_) => "sweep",
        Command::Metrics(_) => "metrics",
    };
    let mut run = Run::new(name, args);
    match &cli.command {
        Command::SynthData(a) => cmd_synth(a, &mut run)?,
        Command::Train(a) => cmd_train(a, &mut run)?,
        Command::Encode(a) => cmd_encode(a, &mut run)?,
        Command::Spectrum(a) => cmd_spectrum(a, &mut run)?,
        Command::MaskPreview(a) => cmd_mask_preview(a, &mut run)?,
        Command::Generate(a) => cmd_generate(a, &mut run)?,
        Command::Blend(a) => cmd_blend(a, &mut run)?,
        Command::Isolate(a) => cmd_isolate(a, &mut run)?,
        Command::Sweep(a) => cmd_sweep(a, &mut run)?,
        Command::Metrics(a) => cmd_metrics(a, &mut run)?,
    }
    if let Some(p) = manifest_path(&cli.command) {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        run.finish(&p)?;
    }
    Ok(())
}

/// Help of the subcommand named in `args`, or of the whole program.
fn usage_help(args: &[String]) -> clap::Command {
    let mut root = Cli::command();
    let name = args
        .iter()
        .skip(1)
        .find_map(|a| root.find_subcommand(a).map(|c| c.get_name().to_string()));
    match name {
        Some(n) => root.find_subcommand_mut(&n).cloned().unwrap_or(root),
        None => root,
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            eprintln!();
            let _ = usage_help(&args).write_long_help(&mut std::io::stderr());
            return 1;
        }
    };
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return 1;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match pool.install(|| execute(&cli, &args[1..])) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
