//! C ABI over `latentft`.
//!
//! Models are opaque handles. Every fallible call returns an [`LftStatus`];
//! on failure the message is kept per thread and read back with
//! [`lft_last_error_message`]. Clips are row-major `channels x frames`
//! arrays of `double`; masks are `n_bins` bytes, nonzero meaning kept.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use latentft::latent_dft::analyze;
use latentft::tasks::{self, SamplingOptions};
use latentft::{Error, FrequencyMask, LatentSequence, Model, SamplerConfig, SpectrumMeta, Tensor};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LftStatus {
    LftOk = 0,
    LftErrNullPointer = 1,
    LftErrInvalidArgument = 2,
    LftErrDimension = 3,
    LftErrDomain = 4,
    LftErrNumeric = 5,
    LftErrDivergence = 6,
    LftErrIo = 7,
    LftErrFormat = 8,
    LftErrConfig = 9,
    LftErrInternal = 10,
}

/// Opaque model handle.
pub struct LftModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> LftStatus {
    match e {
        Error::Dimension(_) | Error::Index(_) => LftStatus::LftErrDimension,
        Error::Domain(_) => LftStatus::LftErrDomain,
        Error::Numeric(_) | Error::TrainingAborted(_) => LftStatus::LftErrNumeric,
        Error::Divergence { .. } => LftStatus::LftErrDivergence,
        Error::Io(_) => LftStatus::LftErrIo,
        Error::Format(_) | Error::Json(_) | Error::SpectrumCorruption(_) => LftStatus::LftErrFormat,
        Error::Config(_) | Error::Contract(_) => LftStatus::LftErrConfig,
    }
}

struct Fail(LftStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LftStatus::LftOk,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            LftStatus::LftErrInternal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(LftStatus::LftErrNullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn model_ref<'a>(m: *const LftModel) -> Result<&'a Model, Fail> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

unsafe fn clip(p: *const f64, channels: usize, frames: usize) -> Result<Tensor, Fail> {
    let n = channels
        .checked_mul(frames)
        .ok_or_else(|| Fail(LftStatus::LftErrInvalidArgument, "clip size overflows".into()))?;
    Ok(Tensor::new(vec![channels, frames], slice(p, n, "clip")?.to_vec())?)
}

unsafe fn mask(p: *const u8, n_bins: usize) -> Result<FrequencyMask, Fail> {
    Ok(FrequencyMask::from_keep(slice(p, n_bins, "mask")?.iter().map(|&b| b != 0).collect()))
}

fn check_bins(model: &Model, y: &Tensor, n_bins: usize) -> Result<(), Fail> {
    let meta = tasks::spectrum_meta(model, y)?;
    if meta.n_bins() != n_bins {
        return Err(Fail(
            LftStatus::LftErrDimension,
            format!("mask has {n_bins} bins, spectrum has {}", meta.n_bins()),
        ));
    }
    Ok(())
}

fn options(steps: usize, seed: u64) -> SamplingOptions {
    SamplingOptions {
        sampler: SamplerConfig {
            steps,
            ..Default::default()
        },
        seed,
        n_variations: 1,
    }
}

fn write_out(out: &mut [f64], t: &Tensor) {
    out.copy_from_slice(t.data());
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lft_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lft_model_load(path: *const c_char, out: *mut *mut LftModel) -> LftStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(LftStatus::LftErrInvalidArgument, "path is not UTF-8".into()))?;
        let (model, _) = Model::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(LftModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`lft_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`lft_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn lft_model_free(model: *mut LftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Clip channels, latent channels and frame rate of a model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lft_model_info(
    model: *const LftModel,
    channels: *mut usize,
    latent_channels: *mut usize,
    frame_rate_hz: *mut f64,
) -> LftStatus {
    guard(|| {
        let m = model_ref(model)?;
        if channels.is_null() || latent_channels.is_null() || frame_rate_hz.is_null() {
            return Err(null("output"));
        }
        *channels = m.config.channels;
        *latent_channels = m.config.latent_channels;
        *frame_rate_hz = m.config.frame_rate_hz;
        Ok(())
    })
}

/// Number of spectrum bins for `frames` latent frames padded `pad` times.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lft_spectrum_n_bins(frames: usize, pad: usize, frame_rate_hz: f64, out: *mut usize) -> LftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = SpectrumMeta::new(frames, pad, frame_rate_hz)?.n_bins();
        Ok(())
    })
}

/// Sets `keep[k] = 1` for every bin whose frequency lies in `[lo_hz, hi_hz]`
/// and 0 elsewhere.
///
/// # Safety
/// `keep` must point to `n_bins` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lft_band_to_mask(
    frames: usize,
    pad: usize,
    frame_rate_hz: f64,
    lo_hz: f64,
    hi_hz: f64,
    keep: *mut u8,
    n_bins: usize,
) -> LftStatus {
    guard(|| {
        let meta = SpectrumMeta::new(frames, pad, frame_rate_hz)?;
        if meta.n_bins() != n_bins {
            return Err(Fail(LftStatus::LftErrDimension, format!("expected {} bins", meta.n_bins())));
        }
        let out = slice_mut(keep, n_bins, "keep")?;
        out.fill(0);
        for k in meta.band_to_bins(lo_hz, hi_hz)? {
            out[k] = 1;
        }
        Ok(())
    })
}

/// Half-spectrum of a `channels x frames` latent. Writes `channels *
/// n_bins` real and imaginary parts, channel-major.
///
/// # Safety
/// `latent` must hold `channels * frames` values; `re` and `im` must hold
/// `channels * n_bins`.
#[no_mangle]
pub unsafe extern "C" fn lft_analyze(
    latent: *const f64,
    channels: usize,
    frames: usize,
    pad: usize,
    frame_rate_hz: f64,
    re: *mut f64,
    im: *mut f64,
    n_bins: usize,
) -> LftStatus {
    guard(|| {
        let z = LatentSequence::new(clip(latent, channels, frames)?, frame_rate_hz)?;
        let spec = analyze(&z, pad)?;
        if spec.n_bins() != n_bins {
            return Err(Fail(LftStatus::LftErrDimension, format!("expected {} bins", spec.n_bins())));
        }
        let re = slice_mut(re, channels * n_bins, "re")?;
        let im = slice_mut(im, channels * n_bins, "im")?;
        for (i, c) in spec.coeffs().iter().enumerate() {
            re[i] = c.re;
            im[i] = c.im;
        }
        Ok(())
    })
}

/// Generates one clip conditioned on the masked latent of `clip`.
///
/// # Safety
/// `clip` and `out` must hold `channels * frames` values, `keep` `n_bins`.
#[no_mangle]
pub unsafe extern "C" fn lft_generate(
    model: *const LftModel,
    clip_in: *const f64,
    channels: usize,
    frames: usize,
    keep: *const u8,
    n_bins: usize,
    steps: usize,
    seed: u64,
    out: *mut f64,
) -> LftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let y = clip(clip_in, channels, frames)?;
        check_bins(m, &y, n_bins)?;
        let g = tasks::conditional_generate(m, &y, &mask(keep, n_bins)?, &options(steps, seed))?;
        write_out(slice_mut(out, channels * frames, "out")?, &g[0]);
        Ok(())
    })
}

/// Blends two references, each under its own mask.
///
/// # Safety
/// `clip_a`, `clip_b` and `out` must hold `channels * frames` values;
/// `keep_a` and `keep_b` `n_bins` bytes.
#[no_mangle]
pub unsafe extern "C" fn lft_blend(
    model: *const LftModel,
    clip_a: *const f64,
    clip_b: *const f64,
    channels: usize,
    frames: usize,
    keep_a: *const u8,
    keep_b: *const u8,
    n_bins: usize,
    alpha: f64,
    beta: f64,
    steps: usize,
    seed: u64,
    out: *mut f64,
) -> LftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let y1 = clip(clip_a, channels, frames)?;
        let y2 = clip(clip_b, channels, frames)?;
        check_bins(m, &y1, n_bins)?;
        let r = tasks::blend(
            m,
            &y1,
            &y2,
            &mask(keep_a, n_bins)?,
            &mask(keep_b, n_bins)?,
            alpha,
            beta,
            &options(steps, seed),
        )?;
        write_out(slice_mut(out, channels * frames, "out")?, &r.clips[0]);
        Ok(())
    })
}

/// Emphasizes the band `keep` of `clip`: weight `alpha` on the full latent
/// and `beta` on the band-limited one.
///
/// # Safety
/// `clip` and `out` must hold `channels * frames` values, `keep` `n_bins`.
#[no_mangle]
pub unsafe extern "C" fn lft_isolate(
    model: *const LftModel,
    clip_in: *const f64,
    channels: usize,
    frames: usize,
    keep: *const u8,
    n_bins: usize,
    alpha: f64,
    beta: f64,
    steps: usize,
    seed: u64,
    out: *mut f64,
) -> LftStatus {
    guard(|| {
        let m = model_ref(model)?;
        let y = clip(clip_in, channels, frames)?;
        check_bins(m, &y, n_bins)?;
        let g = tasks::isolate(m, &y, &mask(keep, n_bins)?, alpha, beta, &options(steps, seed))?;
        write_out(slice_mut(out, channels * frames, "out")?, &g[0]);
        Ok(())
    })
}
