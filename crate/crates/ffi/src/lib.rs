//! C interface to the evidence estimator.
//!
//! Every function returns a `FlozStatus`; on failure the message and a JSON
//! error document are kept per thread and can be read with
//! `floz_last_error_message` / `floz_last_error_json`. Handles are opaque and
//! released with their `_free` function; passing NULL to `_free` is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use floz_core::diffkernel::Mat;
use floz_core::pipeline::{run_pipeline, ResultDocument, RunConfig};
use floz_core::sampleio::{load_sample_set, PriorMetadata, SampleSet};
use floz_core::FlozError;

/// Status codes; the nonzero input, numerical and coverage codes match the
/// exit codes of the `floz` tool.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlozStatus {
    Ok = 0,
    /// NULL pointer, bad UTF-8 or inconsistent sizes.
    InvalidArgument = 1,
    /// Parse, schema, domain or configuration error.
    Input = 2,
    /// Degenerate geometry or training failure.
    Numerical = 3,
    /// Too few samples inside the latent ball.
    Coverage = 4,
    /// Internal panic caught at the boundary.
    Panic = 5,
}

pub struct FlozSamples {
    set: SampleSet,
}

pub struct FlozMetadata {
    meta: PriorMetadata,
}

pub struct FlozConfig {
    cfg: RunConfig,
}

pub struct FlozResult {
    doc: ResultDocument,
    json: CString,
}

struct LastError {
    message: CString,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<LastError>> = const { RefCell::new(None) };
}

fn c_string(s: String) -> CString {
    CString::new(s.replace('\0', " ")).expect("interior NULs removed")
}

fn set_error(status: FlozStatus, message: String, json: serde_json::Value) -> FlozStatus {
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = Some(LastError {
            message: c_string(message),
            json: c_string(json.to_string()),
        })
    });
    status
}

fn fail(err: Failure) -> FlozStatus {
    match err {
        Failure::Core(e) => {
            let status = match e.exit_code() {
                3 => FlozStatus::Numerical,
                4 => FlozStatus::Coverage,
                _ => FlozStatus::Input,
            };
            set_error(status, e.to_string(), e.to_json())
        }
        Failure::Arg(msg) => {
            let json = serde_json::json!({
                "error": { "kind": "invalid_argument", "message": msg.clone() }
            });
            set_error(FlozStatus::InvalidArgument, msg, json)
        }
    }
}

enum Failure {
    Core(FlozError),
    Arg(String),
}

impl From<FlozError> for Failure {
    fn from(e: FlozError) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FlozStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FlozStatus::Ok
        }
        Ok(Err(e)) => fail(e),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            let json = serde_json::json!({ "error": { "kind": "panic", "message": msg.clone() } });
            set_error(FlozStatus::Panic, msg, json)
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::Arg(format!("{name} is NULL")))
}

fn out_arg<T>(out: *mut *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure::Arg("output pointer is NULL".into()))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn floz_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn floz_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |l| l.message.as_ptr()))
}

/// `{"error": {...}}` for the last failed call on this thread, or NULL.
#[no_mangle]
pub extern "C" fn floz_last_error_json() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |l| l.json.as_ptr()))
}

/// Sample set from row-major `params` (`n × d`) and `log_p_hat` (`n`).
///
/// # Safety
/// `params` must point to `n * d` doubles and `log_p_hat` to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn floz_samples_new(
    params: *const f64,
    log_p_hat: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut FlozSamples,
) -> FlozStatus {
    guard(|| {
        out_arg(out)?;
        if params.is_null() || log_p_hat.is_null() {
            return Err(Failure::Arg("params and log_p_hat must not be NULL".into()));
        }
        let len = n
            .checked_mul(d)
            .ok_or_else(|| Failure::Arg("n * d overflows".into()))?;
        let values = std::slice::from_raw_parts(params, len).to_vec();
        let lp = std::slice::from_raw_parts(log_p_hat, n).to_vec();
        let set = SampleSet::unnamed(Mat::from_vec(n, d, values), lp)?;
        *out = Box::into_raw(Box::new(FlozSamples { set }));
        Ok(())
    })
}

/// Loads a sample CSV and its metadata JSON.
///
/// # Safety
/// Paths must be NUL-terminated; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn floz_samples_load(
    samples_path: *const c_char,
    metadata_path: *const c_char,
    out_samples: *mut *mut FlozSamples,
    out_metadata: *mut *mut FlozMetadata,
) -> FlozStatus {
    guard(|| {
        out_arg(out_samples)?;
        out_arg(out_metadata)?;
        let sp = str_arg(samples_path, "samples_path")?;
        let mp = str_arg(metadata_path, "metadata_path")?;
        let (set, meta) = load_sample_set(Path::new(sp), Path::new(mp))?;
        *out_samples = Box::into_raw(Box::new(FlozSamples { set }));
        *out_metadata = Box::into_raw(Box::new(FlozMetadata { meta }));
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn floz_samples_free(s: *mut FlozSamples) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// # Safety
/// `s` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn floz_samples_shape(
    s: *const FlozSamples,
    out_n: *mut usize,
    out_d: *mut usize,
) -> FlozStatus {
    guard(|| {
        let s = ref_arg(s, "samples")?;
        if out_n.is_null() || out_d.is_null() {
            return Err(Failure::Arg("output pointer is NULL".into()));
        }
        *out_n = s.set.len();
        *out_d = s.set.dim();
        Ok(())
    })
}

/// Prior metadata from its JSON text.
///
/// # Safety
/// `json` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn floz_metadata_from_json(
    json: *const c_char,
    out: *mut *mut FlozMetadata,
) -> FlozStatus {
    guard(|| {
        out_arg(out)?;
        let meta = PriorMetadata::from_json_str(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(FlozMetadata { meta }));
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn floz_metadata_free(m: *mut FlozMetadata) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Run configuration from JSON text; NULL gives the defaults.
///
/// # Safety
/// `json` must be NULL or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn floz_config_from_json(
    json: *const c_char,
    out: *mut *mut FlozConfig,
) -> FlozStatus {
    guard(|| {
        out_arg(out)?;
        let cfg = if json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json_str(str_arg(json, "json")?)?
        };
        *out = Box::into_raw(Box::new(FlozConfig { cfg }));
        Ok(())
    })
}

/// # Safety
/// `c` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn floz_config_free(c: *mut FlozConfig) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Trains a flow on `samples` and extracts the evidence. `config` may be
/// NULL for the defaults.
///
/// # Safety
/// Handles must be live (or NULL for `config`); `out` writable.
#[no_mangle]
pub unsafe extern "C" fn floz_estimate(
    samples: *const FlozSamples,
    metadata: *const FlozMetadata,
    config: *const FlozConfig,
    out: *mut *mut FlozResult,
) -> FlozStatus {
    guard(|| {
        out_arg(out)?;
        let s = ref_arg(samples, "samples")?;
        let m = ref_arg(metadata, "metadata")?;
        let default;
        let cfg = match config.as_ref() {
            Some(c) => &c.cfg,
            None => {
                default = RunConfig::default();
                &default
            }
        };
        let start = std::time::Instant::now();
        let output = run_pipeline(&s.set, &m.meta, cfg)?;
        let doc = output.document(start.elapsed().as_secs_f64());
        let json = c_string(serde_json::to_string(&doc).map_err(FlozError::from)?);
        *out = Box::into_raw(Box::new(FlozResult { doc, json }));
        Ok(())
    })
}

/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn floz_result_free(r: *mut FlozResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `r` must be a live handle; outputs writable or NULL to skip.
#[no_mangle]
pub unsafe extern "C" fn floz_result_evidence(
    r: *const FlozResult,
    out_log_z: *mut f64,
    out_uncertainty: *mut f64,
    out_n_in_ball: *mut usize,
) -> FlozStatus {
    guard(|| {
        let r = ref_arg(r, "result")?;
        if let Some(p) = out_log_z.as_mut() {
            *p = r.doc.log_evidence;
        }
        if let Some(p) = out_uncertainty.as_mut() {
            *p = r.doc.uncertainty;
        }
        if let Some(p) = out_n_in_ball.as_mut() {
            *p = r.doc.n_in_ball;
        }
        Ok(())
    })
}

/// Full result document as JSON, owned by the result handle.
///
/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn floz_result_json(r: *const FlozResult) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_output_pointer_is_rejected() {
        let st = unsafe { floz_config_from_json(ptr::null(), ptr::null_mut()) };
        assert_eq!(st, FlozStatus::InvalidArgument);
        assert!(!floz_last_error_message().is_null());
    }

    #[test]
    fn success_clears_last_error() {
        let mut c = ptr::null_mut();
        unsafe { floz_config_from_json(ptr::null(), ptr::null_mut()) };
        assert_eq!(unsafe { floz_config_from_json(ptr::null(), &mut c) }, FlozStatus::Ok);
        assert!(floz_last_error_message().is_null());
        unsafe { floz_config_free(c) };
    }

    #[test]
    fn version_matches_crate() {
        let v = unsafe { CStr::from_ptr(floz_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
