//! Latent-frequency masked diffusion autoencoder.
//!
//! An encoder maps a `C x T` clip to a latent time series, the latent series
//! is analysed along time, and a binary mask over latent frequencies decides
//! which timescales condition a diffusion decoder. Training draws correlated
//! random masks; inference uses user masks for conditional generation,
//! blending and band isolation.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod latent_dft;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod synth;
pub mod tasks;
pub mod tape;
pub mod tensor;

pub use diffusion::{NoiseSchedule, SamplerConfig, TrainConfig, Trainer};
pub use error::{Error, Result};
pub use latent_dft::{LatentSequence, LatentSpectrum, SpectrumMeta};
pub use mask::{FrequencyMask, KernelParams, MaskKernel, MaskSampler};
pub use net::{Model, ModelConfig, Preconditioning};
pub use tape::{Tape, Var};
pub use tensor::{Dtype, Tensor};
