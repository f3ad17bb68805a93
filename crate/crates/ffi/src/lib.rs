//! C ABI over the factdpo library: opaque model handles, objective helpers and status codes.
//!
//! Every function returns an [`FdpoStatus`]. On failure the message is kept per thread and can be
//! copied out with [`fdpo_last_error_message`]. Strings returned through out-pointers are owned by
//! the caller and must be released with [`fdpo_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use factdpo::augmentation::sample_count;
use factdpo::eval::predict;
use factdpo::objective::{
    dpo_loss, improved_dpo_loss, update_multipliers, LogpQuad, MultiplierState,
};
use factdpo::policy::{load_checkpoint, PolicyModel};
use factdpo::{ClaimRecord, Error, Label};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdpoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Data = 4,
    Io = 5,
    CorruptCheckpoint = 6,
    Backend = 7,
    Panic = 8,
}

/// Predicted verdict.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdpoLabel {
    Unparsed = -1,
    Supports = 0,
    Refutes = 1,
}

/// Opaque handle to a loaded policy.
pub struct FdpoModel {
    inner: PolicyModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> FdpoStatus {
    match err {
        Error::Config(_) | Error::Precondition(_) => FdpoStatus::InvalidArgument,
        Error::CorruptCheckpoint { .. } => FdpoStatus::CorruptCheckpoint,
        Error::Io { .. } => FdpoStatus::Io,
        Error::Backend { .. } => FdpoStatus::Backend,
        _ => FdpoStatus::Data,
    }
}

fn fail(status: FdpoStatus, msg: impl Into<String>) -> FdpoStatus {
    set_error(msg);
    status
}

fn from_error(err: Error) -> FdpoStatus {
    fail(status_of(&err), err.to_string())
}

/// Runs `f`, converting panics into a status.
fn guard(f: impl FnOnce() -> FdpoStatus) -> FdpoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(FdpoStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, FdpoStatus> {
    if p.is_null() {
        return Err(fail(FdpoStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        fail(
            FdpoStatus::InvalidUtf8,
            format!("{what} is not valid UTF-8"),
        )
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fdpo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to fit).
/// Returns the full message length excluding the terminator; 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fdpo_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint into a new handle stored at `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdpo_model_load(
    path: *const c_char,
    out: *mut *mut FdpoModel,
) -> FdpoStatus {
    guard(|| {
        if out.is_null() {
            return fail(FdpoStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match read_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(path) {
            Ok((inner, _)) => {
                *out = Box::into_raw(Box::new(FdpoModel { inner }));
                FdpoStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`fdpo_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fdpo_model_free(model: *mut FdpoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdpo_model_vocab_size(
    model: *const FdpoModel,
    out: *mut usize,
) -> FdpoStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(FdpoStatus::NullPointer, "model or out is null");
        }
        *out = (*model).inner.tokenizer().vocab_size();
        FdpoStatus::Ok
    })
}

/// Log-probability of `completion` after `prompt`.
///
/// # Safety
/// `model` must be a live handle, the strings NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdpo_model_logprob(
    model: *const FdpoModel,
    prompt: *const c_char,
    completion: *const c_char,
    out: *mut f64,
) -> FdpoStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(FdpoStatus::NullPointer, "model or out is null");
        }
        let (prompt, completion) = match (
            read_str(prompt, "prompt"),
            read_str(completion, "completion"),
        ) {
            (Ok(p), Ok(c)) => (p, c),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match (*model).inner.logprob(prompt, completion) {
            Ok(v) => {
                *out = v;
                FdpoStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Greedy verdict for a claim against newline-separated evidence sentences.
/// `*out_text`, when `out_text` is non-null, receives the decoded text.
///
/// # Safety
/// `model` must be a live handle, the strings NUL-terminated, `out_label` valid and `out_text`
/// null or valid.
#[no_mangle]
pub unsafe extern "C" fn fdpo_model_predict(
    model: *const FdpoModel,
    claim: *const c_char,
    evidence: *const c_char,
    max_new_tokens: usize,
    out_label: *mut FdpoLabel,
    out_text: *mut *mut c_char,
) -> FdpoStatus {
    guard(|| {
        if model.is_null() || out_label.is_null() {
            return fail(FdpoStatus::NullPointer, "model or out_label is null");
        }
        if !out_text.is_null() {
            *out_text = ptr::null_mut();
        }
        let (claim, evidence) = match (read_str(claim, "claim"), read_str(evidence, "evidence")) {
            (Ok(c), Ok(e)) => (c, e),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let lines: Vec<String> = evidence
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect();
        // The label is required by the record type but never read by prediction.
        let record = ClaimRecord::new("ffi", claim, lines, Label::Supports);
        if let Err(e) = record.validate() {
            return from_error(e);
        }
        match predict(&(*model).inner, &record, max_new_tokens) {
            Ok(p) => {
                *out_label = match p.label {
                    None => FdpoLabel::Unparsed,
                    Some(Label::Supports) => FdpoLabel::Supports,
                    Some(Label::Refutes) => FdpoLabel::Refutes,
                };
                if !out_text.is_null() {
                    *out_text = CString::new(p.text.replace('\0', " "))
                        .map_or(ptr::null_mut(), CString::into_raw);
                }
                FdpoStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fdpo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `−ln σ(β·margin)` for one pair of policy and reference log-probabilities.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdpo_dpo_loss(
    lp_theta_chosen: f64,
    lp_ref_chosen: f64,
    lp_theta_rejected: f64,
    lp_ref_rejected: f64,
    beta: f64,
    out: *mut f64,
) -> FdpoStatus {
    guard(|| {
        if out.is_null() {
            return fail(FdpoStatus::NullPointer, "out is null");
        }
        let q = LogpQuad::new(
            lp_theta_chosen,
            lp_ref_chosen,
            lp_theta_rejected,
            lp_ref_rejected,
        );
        match dpo_loss(&q, beta) {
            Ok(v) => {
                *out = v;
                FdpoStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Constrained objective for one pair.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn fdpo_improved_dpo_loss(
    lp_theta_chosen: f64,
    lp_ref_chosen: f64,
    lp_theta_rejected: f64,
    lp_ref_rejected: f64,
    beta: f64,
    a1: f64,
    a2: f64,
    mu1: f64,
    mu2: f64,
    out: *mut f64,
) -> FdpoStatus {
    guard(|| {
        if out.is_null() {
            return fail(FdpoStatus::NullPointer, "out is null");
        }
        let q = LogpQuad::new(
            lp_theta_chosen,
            lp_ref_chosen,
            lp_theta_rejected,
            lp_ref_rejected,
        );
        match improved_dpo_loss(&q, beta, a1, a2, &MultiplierState::new(mu1, mu2)) {
            Ok(v) => {
                *out = v;
                FdpoStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// One multiplier update in place.
///
/// # Safety
/// `mu1` and `mu2` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fdpo_update_multipliers(
    mu1: *mut f64,
    mu2: *mut f64,
    c_chosen: f64,
    c_rejected: f64,
    lr_mu: f64,
) -> FdpoStatus {
    guard(|| {
        if mu1.is_null() || mu2.is_null() {
            return fail(FdpoStatus::NullPointer, "mu1 or mu2 is null");
        }
        let next = update_multipliers(
            &MultiplierState::new(*mu1, *mu2),
            c_chosen,
            c_rejected,
            lr_mu,
        );
        *mu1 = next.mu1;
        *mu2 = next.mu2;
        FdpoStatus::Ok
    })
}

/// Number of pairs drawn for a record answered correctly `w` times out of `k`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdpo_sample_count(
    w: usize,
    k: usize,
    n_min: usize,
    n_base: usize,
    out: *mut usize,
) -> FdpoStatus {
    guard(|| {
        if out.is_null() {
            return fail(FdpoStatus::NullPointer, "out is null");
        }
        match sample_count(w, k, n_min, n_base) {
            Ok(n) => {
                *out = n;
                FdpoStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
