//! C ABI over the `sgtm` library: load checkpoints behind an opaque handle,
//! ablate and score them, and run the scaling and leakage arithmetic.
//!
//! Every function returns an [`SgtmStatus`]; on failure
//! [`sgtm_last_error_message`] describes the error. Panics never cross the
//! boundary. The header is `include/sgtm.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sgtm::checkpoint;
use sgtm::eval::{compute_penalty, fit_power_law, leakage, mean_loss, PowerLaw};
use sgtm::model::{ModelConfig, ParamSet};
use sgtm::partition::{ablate, ParamDesignation};
use sgtm::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgtmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Corrupt or incompatible file.
    Format = 4,
    /// Operation not valid for this model, e.g. ablating a model without a
    /// partition.
    Contract = 5,
    Shape = 6,
    Panic = 7,
    Other = 8,
}

/// A loaded checkpoint. Opaque to C.
pub struct SgtmModel {
    config: ModelConfig,
    params: ParamSet<f32>,
    designation: Option<ParamDesignation>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior nul"));
}

fn status_of(e: &Error) -> SgtmStatus {
    match e {
        Error::Io(_) => SgtmStatus::Io,
        Error::Format { .. } | Error::Schema(_) | Error::Json(_) | Error::Csv(_) => SgtmStatus::Format,
        Error::Contract(_) => SgtmStatus::Contract,
        Error::Shape(_) | Error::Index(_) => SgtmStatus::Shape,
        Error::Config(_) => SgtmStatus::InvalidArgument,
        _ => SgtmStatus::Other,
    }
}

/// Runs `f`, mapping errors and panics to a status and the thread's last
/// error message.
fn guard(f: impl FnOnce() -> Result<(), (SgtmStatus, String)>) -> SgtmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SgtmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SgtmStatus::Panic
        }
    }
}

fn lib(e: Error) -> (SgtmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SgtmStatus, String) {
    (SgtmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (SgtmStatus, String) {
    (SgtmStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `ptr` must be null or valid for `n` reads.
unsafe fn slice<'a, T>(ptr: *const T, n: usize, what: &str) -> Result<&'a [T], (SgtmStatus, String)> {
    match (ptr.is_null(), n) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null(what)),
        (false, _) => Ok(std::slice::from_raw_parts(ptr, n)),
    }
}

/// Message for the last failed call on this thread; empty after a
/// successful one. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sgtm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sgtm_model_load(path: *const c_char, out: *mut *mut SgtmModel) -> SgtmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let ck = checkpoint::load::<f32>(Path::new(path)).map_err(lib)?;
        let model = SgtmModel { config: ck.meta.model, params: ck.params, designation: ck.designation };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`sgtm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sgtm_model_free(model: *mut SgtmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parameter count of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sgtm_model_num_params(model: *const SgtmModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.n_elements())
}

/// Zeroes the forget parameters in place. Fails with `Contract` for a
/// model trained without a partition.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sgtm_model_ablate(model: *mut SgtmModel) -> SgtmStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let d = m.designation.as_ref().ok_or_else(|| (SgtmStatus::Contract, "model has no partition".to_string()))?;
        m.params = ablate(&m.params, d).map_err(lib)?;
        Ok(())
    })
}

/// Mean next-token loss in nats over `n_seqs` sequences stored back to
/// back in `tokens`, the i-th of length `lens[i]`.
///
/// # Safety
/// `tokens` must hold `sum(lens)` ids, `lens` `n_seqs` lengths and
/// `out_loss` be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sgtm_model_forward_loss(
    model: *const SgtmModel,
    tokens: *const u32,
    lens: *const usize,
    n_seqs: usize,
    out_loss: *mut f64,
) -> SgtmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_loss.is_null() {
            return Err(null("out_loss"));
        }
        if n_seqs == 0 {
            return Err(invalid("no sequences"));
        }
        let lens = slice(lens, n_seqs, "lens")?;
        let total = lens.iter().try_fold(0usize, |a, &l| a.checked_add(l)).ok_or_else(|| invalid("lengths overflow"))?;
        let flat = slice(tokens, total, "tokens")?;
        let mut seqs = Vec::with_capacity(n_seqs);
        let mut at = 0;
        for &l in lens {
            seqs.push(flat[at..at + l].to_vec());
            at += l;
        }
        *out_loss = mean_loss(&m.config, &m.params, &seqs).map_err(lib)?;
        Ok(())
    })
}

/// Fits `loss = alpha * compute^(-beta)` by least squares in log space.
///
/// # Safety
/// `compute` and `loss` must hold `n` values; the outputs must be valid
/// for one write each.
#[no_mangle]
pub unsafe extern "C" fn sgtm_fit_scaling(
    compute: *const f64,
    loss: *const f64,
    n: usize,
    out_alpha: *mut f64,
    out_beta: *mut f64,
    out_rmse_log: *mut f64,
) -> SgtmStatus {
    guard(|| {
        if out_alpha.is_null() || out_beta.is_null() || out_rmse_log.is_null() {
            return Err(null("output"));
        }
        let pts: Vec<(f64, f64)> =
            slice(compute, n, "compute")?.iter().copied().zip(slice(loss, n, "loss")?.iter().copied()).collect();
        let f = fit_power_law(&pts).map_err(lib)?;
        (*out_alpha, *out_beta, *out_rmse_log) = (f.alpha, f.beta, f.rmse_log);
        Ok(())
    })
}

/// `1 - C_equiv / full_compute`, where `C_equiv` is the compute at which
/// the fitted curve reaches `loss`.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn sgtm_compute_penalty(
    loss: f64,
    alpha: f64,
    beta: f64,
    full_compute: f64,
    out: *mut f64,
) -> SgtmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(alpha > 0.0 && beta > 0.0 && full_compute > 0.0 && loss > 0.0) {
            return Err(invalid("loss, alpha, beta and full_compute must be positive"));
        }
        let fit = PowerLaw { alpha, beta, rmse_log: 0.0, low_confidence: false };
        *out = compute_penalty(loss, &fit, full_compute);
        Ok(())
    })
}

/// Leakage of a run with `forget_loss` that saw `undiscovered_tokens`
/// forget tokens, against `n` baseline points `(tokens[i], losses[i])`.
/// When the loss lies outside the curve `*out_leakage` is NaN and the
/// bounds give the interval known to contain it.
///
/// # Safety
/// `tokens` and `losses` must hold `n` values; the outputs must be valid
/// for one write each.
#[no_mangle]
pub unsafe extern "C" fn sgtm_leakage(
    forget_loss: f64,
    undiscovered_tokens: f64,
    tokens: *const f64,
    losses: *const f64,
    n: usize,
    out_leakage: *mut f64,
    out_lower: *mut f64,
    out_upper: *mut f64,
) -> SgtmStatus {
    guard(|| {
        if out_leakage.is_null() || out_lower.is_null() || out_upper.is_null() {
            return Err(null("output"));
        }
        let pts: Vec<(f64, f64)> =
            slice(tokens, n, "tokens")?.iter().copied().zip(slice(losses, n, "losses")?.iter().copied()).collect();
        let r = leakage(forget_loss, undiscovered_tokens, &pts).map_err(lib)?;
        *out_leakage = r.leakage.unwrap_or(f64::NAN);
        (*out_lower, *out_upper) = r.leakage_bounds;
        Ok(())
    })
}
