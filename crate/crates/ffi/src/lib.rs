//! C ABI for the sortblock engine.
//!
//! Objects are opaque handles created by `*_new`/`*_read`/`*_run_*` and
//! released with the matching `*_free`. Every fallible function returns an
//! [`SbStatus`]; on failure the message is available from
//! [`sb_last_error_message`] on the same thread. Handles are not
//! thread-safe; use one per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sortblock::blob::LatentBlob;
use sortblock::cli::ExperimentConfig;
use sortblock::diffusion::{sample, SamplerRun};
use sortblock::dit::{DitConfig, PassThrough};
use sortblock::engine::{run_sortblock, PredictMode, SortblockConfig, Window};
use sortblock::metrics::compare_latents;
use sortblock::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Parse = 5,
    Runtime = 6,
    Panic = 7,
}

/// Toy network and sampler settings.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SbModelParams {
    pub num_blocks: u32,
    pub num_tokens: u32,
    pub channels: u32,
    pub mlp_ratio: u32,
    pub seed: u64,
    pub time_scale: f64,
    /// Number of DDIM steps over a 1000-step linear schedule.
    pub steps: u32,
}

/// Engine settings. When `window_high` and `window_low` are both zero the
/// window is the middle `window_fraction` of the step list.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SbSortblockParams {
    pub refresh_interval: u32,
    pub rho: f64,
    pub window_high: u32,
    pub window_low: u32,
    pub window_fraction: f64,
    /// 0 = linear prediction, 1 = direct copy.
    pub predict: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SbRunStats {
    pub block_evals: u64,
    pub baseline_evals: u64,
    pub ranked_steps: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SbCompareReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub relative_l2: f64,
}

/// A network, its noise schedule and step list.
pub struct SbSampler {
    config: ExperimentConfig,
    net: sortblock::dit::Network,
    schedule: sortblock::diffusion::NoiseSchedule,
    steps: Vec<usize>,
}

/// A final latent together with the seed and config hash that produced it.
pub struct SbLatent {
    blob: LatentBlob,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::Fit(_) => SbStatus::InvalidArgument,
            Error::Shape(_) => SbStatus::Shape,
            Error::Io { .. } => SbStatus::Io,
            Error::Parse { .. } | Error::Format(_) => SbStatus::Parse,
            _ => SbStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SbStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SbStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {message}"));
            SbStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(SbStatus::InvalidArgument, "path is not UTF-8".into()))
}

fn boxed<T>(out: *mut *mut T, value: T) {
    // SAFETY: callers check `out` for null before computing `value`.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn sb_model_params_default() -> SbModelParams {
    let d = DitConfig::default();
    SbModelParams {
        num_blocks: d.num_blocks as u32,
        num_tokens: d.num_tokens as u32,
        channels: d.channels as u32,
        mlp_ratio: d.mlp_ratio as u32,
        seed: d.seed,
        time_scale: d.time_scale,
        steps: 50,
    }
}

#[no_mangle]
pub extern "C" fn sb_sortblock_params_default() -> SbSortblockParams {
    let d = ExperimentConfig::default().sortblock;
    SbSortblockParams {
        refresh_interval: d.refresh_interval as u32,
        rho: d.rho,
        window_high: 0,
        window_low: 0,
        window_fraction: d.window_fraction,
        predict: 0,
    }
}

/// # Safety
/// `params` must point to a valid `SbModelParams`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_sampler_new(
    params: *const SbModelParams,
    out: *mut *mut SbSampler,
) -> SbStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ExperimentConfig {
            model: DitConfig {
                num_blocks: p.num_blocks as usize,
                num_tokens: p.num_tokens as usize,
                channels: p.channels as usize,
                mlp_ratio: p.mlp_ratio as usize,
                seed: p.seed,
                time_scale: p.time_scale,
            },
            steps: p.steps as usize,
            ..ExperimentConfig::default()
        };
        let r = config.resolve()?;
        boxed(
            out,
            SbSampler {
                config,
                net: r.net,
                schedule: r.schedule,
                steps: r.steps,
            },
        );
        Ok(())
    })
}

/// # Safety
/// `sampler` must be null or a handle from [`sb_sampler_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_sampler_free(sampler: *mut SbSampler) {
    if !sampler.is_null() {
        drop(Box::from_raw(sampler));
    }
}

impl SbSampler {
    fn latent(&self, latent: sortblock::numerics::FeatureTensor, seed: u64) -> SbLatent {
        SbLatent {
            blob: LatentBlob::new(latent, seed, self.config.latent_hash()),
        }
    }

    fn baseline_evals(&self) -> u64 {
        (self.steps.len() * self.net.num_blocks()) as u64
    }
}

/// Full-compute DDIM sampling from the noise drawn for `seed`.
///
/// # Safety
/// `sampler` must be a live handle; `out` must be writable; `stats` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn sb_sampler_run_baseline(
    sampler: *const SbSampler,
    seed: u64,
    out: *mut *mut SbLatent,
    stats: *mut SbRunStats,
) -> SbStatus {
    guard(|| {
        let s = sampler.as_ref().ok_or_else(|| null("sampler"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let run = SamplerRun::from_seed(s.net.latent_shape(), s.steps.clone(), seed);
        let latent = sample(&s.net, &run, &s.schedule, &mut PassThrough)?;
        if let Some(stats) = stats.as_mut() {
            *stats = SbRunStats {
                block_evals: s.baseline_evals(),
                baseline_evals: s.baseline_evals(),
                ranked_steps: 0,
            };
        }
        boxed(out, s.latent(latent, seed));
        Ok(())
    })
}

/// Sampling with the caching engine installed.
///
/// # Safety
/// `sampler` and `params` must be valid; `out` must be writable; `stats`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn sb_sampler_run_sortblock(
    sampler: *const SbSampler,
    seed: u64,
    params: *const SbSortblockParams,
    out: *mut *mut SbLatent,
    stats: *mut SbRunStats,
) -> SbStatus {
    guard(|| {
        let s = sampler.as_ref().ok_or_else(|| null("sampler"))?;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let window = if p.window_high == 0 && p.window_low == 0 {
            Window::inner(&s.steps, p.window_fraction)?
        } else {
            Window::new(p.window_high as usize, p.window_low as usize)?
        };
        let predict = match p.predict {
            0 => PredictMode::Linear,
            1 => PredictMode::Copy,
            other => {
                return Err(Failure(
                    SbStatus::InvalidArgument,
                    format!("predict must be 0 (linear) or 1 (copy), got {other}"),
                ))
            }
        };
        let cfg = SortblockConfig::fixed(p.refresh_interval as usize, p.rho, window)
            .with_predict(predict);
        let run = SamplerRun::from_seed(s.net.latent_shape(), s.steps.clone(), seed);
        let (latent, trace) = run_sortblock(&s.net, &run, &s.schedule, &cfg)?;
        if let Some(stats) = stats.as_mut() {
            *stats = SbRunStats {
                block_evals: trace.total_block_evals,
                baseline_evals: s.baseline_evals(),
                ranked_steps: trace.phase_counts().ranked as u64,
            };
        }
        boxed(out, s.latent(latent, seed));
        Ok(())
    })
}

/// # Safety
/// `latent` must be null or a live latent handle.
#[no_mangle]
pub unsafe extern "C" fn sb_latent_free(latent: *mut SbLatent) {
    if !latent.is_null() {
        drop(Box::from_raw(latent));
    }
}

/// # Safety
/// `latent` must be live; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_latent_shape(
    latent: *const SbLatent,
    rows: *mut usize,
    cols: *mut usize,
) -> SbStatus {
    guard(|| {
        let l = latent.as_ref().ok_or_else(|| null("latent"))?;
        let (r, c) = (
            rows.as_mut().ok_or_else(|| null("rows"))?,
            cols.as_mut().ok_or_else(|| null("cols"))?,
        );
        (*r, *c) = l.blob.latent.shape();
        Ok(())
    })
}

/// Copies the row-major values into `dst`, which holds `len` floats.
///
/// # Safety
/// `dst` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sb_latent_copy(
    latent: *const SbLatent,
    dst: *mut f32,
    len: usize,
) -> SbStatus {
    guard(|| {
        let l = latent.as_ref().ok_or_else(|| null("latent"))?;
        if dst.is_null() {
            return Err(null("dst"));
        }
        let data = l.blob.latent.as_slice();
        if len != data.len() {
            return Err(Failure(
                SbStatus::Shape,
                format!("buffer holds {len} floats, latent has {}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), dst, len);
        Ok(())
    })
}

/// Writes the latent in the blob format the command-line tool uses.
///
/// # Safety
/// `latent` must be live; `path` must be a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn sb_latent_write(latent: *const SbLatent, path: *const c_char) -> SbStatus {
    guard(|| {
        let l = latent.as_ref().ok_or_else(|| null("latent"))?;
        l.blob.write(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_latent_read(path: *const c_char, out: *mut *mut SbLatent) -> SbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let blob = LatentBlob::read(&path_arg(path)?)?;
        boxed(out, SbLatent { blob });
        Ok(())
    })
}

/// Scores `candidate` against `reference`.
///
/// # Safety
/// Both latents must be live; `report` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_compare(
    candidate: *const SbLatent,
    reference: *const SbLatent,
    report: *mut SbCompareReport,
) -> SbStatus {
    guard(|| {
        let a = candidate.as_ref().ok_or_else(|| null("candidate"))?;
        let b = reference.as_ref().ok_or_else(|| null("reference"))?;
        let out = report.as_mut().ok_or_else(|| null("report"))?;
        let c = compare_latents(&a.blob.latent, &b.blob.latent)?;
        *out = SbCompareReport {
            psnr_db: c.psnr_db,
            ssim: c.ssim,
            relative_l2: c.relative_l2,
        };
        Ok(())
    })
}
