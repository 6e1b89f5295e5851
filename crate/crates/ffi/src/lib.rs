//! C interface to trained dualvdt checkpoints.
//!
//! Every function returns a [`DvdtStatus`]; on failure the message is
//! available from [`dvdt_last_error`] on the same thread. Panics never cross
//! the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dualvdt::data::SeriesWindow;
use dualvdt::error::Error;
use dualvdt::model::DualVdt;
use dualvdt::numeric::Tensor;

/// Opaque handle to a loaded model.
pub struct DvdtModel {
    inner: DualVdt,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DvdtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numeric = 5,
    Panic = 6,
}

/// Sizes of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DvdtDims {
    pub n_vars: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub latent_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DvdtStatus {
    match e {
        Error::Io(_) => DvdtStatus::Io,
        Error::Checkpoint(_) | Error::Config(_) => DvdtStatus::Checkpoint,
        Error::NonFinite { .. } | Error::Domain { .. } | Error::Diverged { .. } => DvdtStatus::Numeric,
        _ => DvdtStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DvdtStatus, String)>) -> DvdtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DvdtStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DvdtStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (DvdtStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DvdtStatus, String) {
    (DvdtStatus::NullPointer, format!("`{what}` is null"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn dvdt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by `dualvdt train`. On success `*out` owns a
/// handle that must be released with [`dvdt_model_free`].
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dvdt_model_load(path: *const c_char, out: *mut *mut DvdtModel) -> DvdtStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (DvdtStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = DualVdt::load(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DvdtModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dvdt_model_load`] and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn dvdt_model_dims(model: *const DvdtModel, out: *mut DvdtDims) -> DvdtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = &m.inner.dims;
        *out = DvdtDims {
            n_vars: d.n,
            lookback: d.lookback,
            horizon: d.horizon,
            latent_dim: m.inner.latent_dim(),
        };
        Ok(())
    })
}

/// Forecasts `horizon × n_vars` values (row-major, time first) from a
/// `lookback × n_vars` window, both in the units of the training data.
///
/// # Safety
/// `lookback` must point to `lookback_len` doubles and `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn dvdt_model_forecast(
    model: *const DvdtModel,
    lookback: *const f64,
    lookback_len: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> DvdtStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if lookback.is_null() {
            return Err(null("lookback"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let d = &m.dims;
        let (nx, ny) = (d.lookback * d.n, d.horizon * d.n);
        if lookback_len != nx || out_len != ny {
            return Err((
                DvdtStatus::InvalidArgument,
                format!("expected {nx} input and {ny} output values, got {lookback_len} and {out_len}"),
            ));
        }
        let x = std::slice::from_raw_parts(lookback, nx).to_vec();
        let window = SeriesWindow {
            x: Tensor::new(&[d.lookback, d.n], x).map_err(lib_err)?,
            y: Tensor::zeros(&[d.horizon, d.n]),
            origin: 0,
            pad_mask: vec![false; nx + ny],
        };
        let y = m.forecast(&window, seed).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, ny).copy_from_slice(y.data());
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`dvdt_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dvdt_model_free(model: *mut DvdtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
