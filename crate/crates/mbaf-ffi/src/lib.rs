//! C ABI over the mbaf crate: opaque handles, integer status codes, and a
//! thread-local error message.
//!
//! Every fallible function returns [`MbafStatus`]; `Ok` is zero. On any
//! other status the thread-local message read by [`mbaf_last_error`]
//! describes the failure and stays valid until the next call from the same
//! thread. Handles own their contents and must be released with the
//! matching `_free` function exactly once.

use mbaf::config::{ExperimentConfig, Precision};
use mbaf::error::Error;
use mbaf::scalar::Scalar;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Outcome of an API call; zero means success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbafStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    Config = 3,
    Domain = 4,
    Contract = 5,
    Protocol = 6,
    State = 7,
    /// Checkpoint version or magic mismatch.
    Version = 8,
    Numeric = 9,
    Io = 10,
    /// A panic was caught at the boundary.
    Panic = 11,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: MbafStatus, msg: String) -> MbafStatus {
    set_error(msg);
    status
}

fn error_status(e: &Error) -> MbafStatus {
    match e {
        Error::Config(_) => MbafStatus::Config,
        Error::Domain(_) => MbafStatus::Domain,
        Error::Contract(_) => MbafStatus::Contract,
        Error::Protocol(_) => MbafStatus::Protocol,
        Error::State(_) => MbafStatus::State,
        Error::Version { .. } => MbafStatus::Version,
        Error::Numeric(_) => MbafStatus::Numeric,
        Error::Io(_) => MbafStatus::Io,
    }
}

fn from_result(result: mbaf::Result<MbafStatus>) -> MbafStatus {
    match result {
        Ok(status) => status,
        Err(e) => fail(error_status(&e), e.to_string()),
    }
}

fn guarded(body: impl FnOnce() -> MbafStatus + std::panic::UnwindSafe) -> MbafStatus {
    match catch_unwind(body) {
        Ok(status) => status,
        Err(_) => fail(MbafStatus::Panic, "panic caught at the C boundary".into()),
    }
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn utf8_arg<'a>(p: *const c_char) -> Result<&'a str, MbafStatus> {
    if p.is_null() {
        return Err(fail(MbafStatus::NullArgument, "null string argument".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MbafStatus::InvalidUtf8, "string argument is not UTF-8".into()))
}

/// Opaque experiment configuration.
pub struct MbafConfig {
    inner: ExperimentConfig,
}

enum ModelAny {
    F32(mbaf::model::MbafModel<f32>),
    F64(mbaf::model::MbafModel<f64>),
}

/// Opaque trained model loaded from a checkpoint.
pub struct MbafModel {
    inner: ModelAny,
}

/// One block-error measurement.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MbafBlerResult {
    pub snr_db: f64,
    /// Sum rate in bits per channel use.
    pub rate: f64,
    /// Block-error rate pooled over users.
    pub bler: f64,
    /// 95% confidence bounds on `bler`.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Episodes actually simulated.
    pub trials: u64,
    /// Block errors per user; index 1 is zero for single-user models.
    pub block_errors: [u64; 2],
}

/// Returns the message for the most recent failure on this thread; empty
/// before the first failure. The pointer is invalidated by the next call
/// into the library from the same thread.
#[no_mangle]
pub extern "C" fn mbaf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a named preset configuration (`"paper"` or `"desk"`).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbaf_config_preset(
    name: *const c_char,
    out: *mut *mut MbafConfig,
) -> MbafStatus {
    guarded(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(MbafStatus::NullArgument, "null output pointer".into());
        }
        let name = match utf8_arg(name) {
            Ok(s) => s,
            Err(status) => return status,
        };
        from_result(ExperimentConfig::preset(name).map(|cfg| {
            *out = Box::into_raw(Box::new(MbafConfig { inner: cfg }));
            MbafStatus::Ok
        }))
    }))
}

/// Loads and validates a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbaf_config_load(
    path: *const c_char,
    out: *mut *mut MbafConfig,
) -> MbafStatus {
    guarded(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(MbafStatus::NullArgument, "null output pointer".into());
        }
        let path = match utf8_arg(path) {
            Ok(s) => s,
            Err(status) => return status,
        };
        from_result(ExperimentConfig::load(Path::new(path)).map(|cfg| {
            *out = Box::into_raw(Box::new(MbafConfig { inner: cfg }));
            MbafStatus::Ok
        }))
    }))
}

/// Overrides the master seed.
///
/// # Safety
/// `config` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn mbaf_config_set_seed(config: *mut MbafConfig, seed: u64) -> MbafStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(config) = config.as_mut() else {
            return fail(MbafStatus::NullArgument, "null config handle".into());
        };
        config.inner.seed = seed;
        MbafStatus::Ok
    }))
}

/// Releases a configuration handle; null is ignored.
///
/// # Safety
/// `config` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn mbaf_config_free(config: *mut MbafConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

fn train_typed<T: Scalar>(
    cfg: ExperimentConfig,
    checkpoint: &Path,
    log: &mut dyn Write,
) -> mbaf::Result<MbafStatus> {
    let mut model: mbaf::model::MbafModel<T> = mbaf::model::MbafModel::init(cfg.clone())?;
    let mut opt = mbaf::training::AdamW::new(&model, cfg.train.lr, cfg.train.weight_decay);
    mbaf::training::train(&mut model, &mut opt, log, &mut |_| {})?;
    if cfg.train.recalibrate_episodes > 0 {
        let seed = mbaf::rng::derive_subseed(cfg.train_seed(), "recalibrate", 0);
        mbaf::evaluation::calibrate_power(
            &mut model,
            cfg.train.recalibrate_episodes,
            cfg.code.t,
            cfg.snr_target_db(),
            seed,
        )?;
    }
    mbaf::checkpoint::save(checkpoint, &model, Some(&opt))?;
    Ok(MbafStatus::Ok)
}

/// Runs the full training loop and writes the checkpoint to `checkpoint`.
/// `train_log` may be null to discard the CSV log.
///
/// # Safety
/// `config` must be a live handle; the paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mbaf_train(
    config: *const MbafConfig,
    checkpoint: *const c_char,
    train_log: *const c_char,
) -> MbafStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(config) = config.as_ref() else {
            return fail(MbafStatus::NullArgument, "null config handle".into());
        };
        let checkpoint = match utf8_arg(checkpoint) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let mut log: Box<dyn Write> = if train_log.is_null() {
            Box::new(std::io::sink())
        } else {
            match utf8_arg(train_log) {
                Ok(path) => match std::fs::File::create(path) {
                    Ok(f) => Box::new(std::io::BufWriter::new(f)),
                    Err(e) => return fail(MbafStatus::Io, e.to_string()),
                },
                Err(status) => return status,
            }
        };
        let cfg = config.inner.clone();
        let result = match cfg.model.precision {
            Precision::F32 => train_typed::<f32>(cfg, Path::new(checkpoint), &mut log),
            Precision::F64 => train_typed::<f64>(cfg, Path::new(checkpoint), &mut log),
        };
        from_result(result.and_then(|s| {
            log.flush()?;
            Ok(s)
        }))
    }))
}

/// Loads a trained checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbaf_model_load(
    path: *const c_char,
    out: *mut *mut MbafModel,
) -> MbafStatus {
    guarded(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(MbafStatus::NullArgument, "null output pointer".into());
        }
        let path = match utf8_arg(path) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let path = Path::new(path);
        from_result(mbaf::checkpoint::peek_config(path).and_then(|cfg| {
            let inner = match cfg.model.precision {
                Precision::F32 => ModelAny::F32(mbaf::checkpoint::load::<f32>(path)?.0),
                Precision::F64 => ModelAny::F64(mbaf::checkpoint::load::<f64>(path)?.0),
            };
            *out = Box::into_raw(Box::new(MbafModel { inner }));
            Ok(MbafStatus::Ok)
        }))
    }))
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn mbaf_model_free(model: *mut MbafModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Estimates the block-error rate of a trained model at one SNR.
///
/// # Safety
/// `model` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbaf_eval(
    model: *const MbafModel,
    snr_db: f64,
    trials: u64,
    seed: u64,
    out: *mut MbafBlerResult,
) -> MbafStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(model) = model.as_ref() else {
            return fail(MbafStatus::NullArgument, "null model handle".into());
        };
        if out.is_null() {
            return fail(MbafStatus::NullArgument, "null output pointer".into());
        }
        let est = match &model.inner {
            ModelAny::F32(m) => mbaf::evaluation::estimate_bler(m, snr_db, trials, seed, None),
            ModelAny::F64(m) => mbaf::evaluation::estimate_bler(m, snr_db, trials, seed, None),
        };
        from_result(est.map(|est| {
            let mut block_errors = [0u64; 2];
            for (slot, &e) in block_errors.iter_mut().zip(&est.errors) {
                *slot = e;
            }
            *out = MbafBlerResult {
                snr_db: est.snr_db,
                rate: est.rate,
                bler: est.bler,
                ci_low: est.ci_low,
                ci_high: est.ci_high,
                trials: est.trials,
                block_errors,
            };
            MbafStatus::Ok
        }))
    }))
}

/// Two-user sum capacity in bits per channel use at the given total SNR.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbaf_sum_capacity(snr_total: f64, out: *mut f64) -> MbafStatus {
    guarded(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(MbafStatus::NullArgument, "null output pointer".into());
        }
        from_result(mbaf::evaluation::mac_sum_capacity(snr_total).map(|c| {
            *out = c;
            MbafStatus::Ok
        }))
    }))
}

/// Finite-blocklength normal-approximation rate at blocklength `n`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mbaf_normal_approx_rate(
    n: u32,
    snr_linear: f64,
    epsilon: f64,
    out: *mut f64,
) -> MbafStatus {
    guarded(AssertUnwindSafe(|| {
        if out.is_null() {
            return fail(MbafStatus::NullArgument, "null output pointer".into());
        }
        let rate = mbaf::evaluation::normal_approx_rate(n as usize, snr_linear, epsilon);
        from_result(rate.map(|r| {
            *out = r;
            MbafStatus::Ok
        }))
    }))
}
