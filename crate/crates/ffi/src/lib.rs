//! C ABI over the adapter toolkit.
//!
//! Every function returns a [`DaStatus`]; on failure the message is kept per
//! thread and read with [`da_last_error`]. Handles are opaque and owned by the
//! caller, who releases them with the matching `*_free`. Panics never cross
//! the boundary: they surface as [`DaStatus::Panic`].
//!
//! Tensors cross as row-major `f64` buffers: a context is `L × d`, a
//! forecast `H × m`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use delta_adapt::adapters::{AdapterConfig, AdapterNet, Form, Placement};
use delta_adapt::autodiff::Tensor;
use delta_adapt::checkpoint::{load_backbone, load_model, save_model, Model};
use delta_adapt::forecaster::Forecaster;
use delta_adapt::Error;

/// Result of every call. Codes 2 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DaStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Io = 4,
    Checkpoint = 5,
    Dimension = 6,
    Internal = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DaPlacement {
    Input = 0,
    #[default]
    Output = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DaForm {
    #[default]
    Additive = 0,
    Multiplicative = 1,
    Exp = 2,
}

/// Window geometry of a backbone.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DaShapes {
    pub lookback: usize,
    pub covariates: usize,
    pub horizon: usize,
    pub targets: usize,
}

/// A frozen backbone forecaster.
pub struct DaBackbone {
    inner: Forecaster,
}

/// A trained or freshly initialized model bound to one backbone.
pub struct DaModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DaStatus {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Unsupported(_) => DaStatus::Config,
        Error::Data(_) | Error::CoverageInfeasible { .. } => DaStatus::Data,
        Error::Io { .. } => DaStatus::Io,
        Error::Checkpoint(_) => DaStatus::Checkpoint,
        Error::Dimension { .. } => DaStatus::Dimension,
        _ => DaStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (DaStatus, String)>) -> DaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DaStatus::Ok
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
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DaStatus::Panic
        }
    }
}

fn lib<T>(r: delta_adapt::Result<T>) -> Result<T, (DaStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DaStatus, String) {
    (DaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (DaStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| (DaStatus::Config, "path is not valid UTF-8".into()))
}

unsafe fn tensor_arg(data: *const f64, len: usize, shape: [usize; 2]) -> Result<Tensor, (DaStatus, String)> {
    if data.is_null() {
        return Err(null("input buffer"));
    }
    if len != shape[0] * shape[1] {
        return Err((DaStatus::Dimension, format!("input holds {len} values, expected {}×{}", shape[0], shape[1])));
    }
    let v = std::slice::from_raw_parts(data, len).to_vec();
    lib(Tensor::new(v, shape.to_vec()))
}

unsafe fn write_out(t: &Tensor, out: *mut f64, len: usize) -> Result<(), (DaStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if len != t.len() {
        return Err((DaStatus::Dimension, format!("output buffer holds {len} values, forecast has {}", t.len())));
    }
    std::slice::from_raw_parts_mut(out, len).copy_from_slice(t.data());
    Ok(())
}

/// Copies `s` NUL-terminated into `buf` when it fits; returns the length
/// needed including the NUL.
unsafe fn copy_str(s: &str, buf: *mut c_char, cap: usize) -> usize {
    let bytes = s.as_bytes();
    if !buf.is_null() && cap > bytes.len() {
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
        *buf.add(bytes.len()) = 0;
    }
    bytes.len() + 1
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn da_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` and returns
/// the length it needs including the NUL, or 0 when there is no error.
/// Nothing is written when `cap` is too small.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn da_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(msg) => copy_str(msg.to_str().unwrap_or("error"), buf, cap),
        None => 0,
    })
}

/// Loads a backbone checkpoint, verifying its checksum.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn da_backbone_load(path: *const c_char, out: *mut *mut DaBackbone) -> DaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path)?;
        if !p.exists() {
            return Err((DaStatus::Checkpoint, format!("backbone checkpoint {} not found", p.display())));
        }
        let inner = lib(load_backbone(&p))?;
        *out = Box::into_raw(Box::new(DaBackbone { inner }));
        Ok(())
    })
}

/// Releases a backbone; null is ignored.
///
/// # Safety
/// `h` must come from [`da_backbone_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn da_backbone_free(h: *mut DaBackbone) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live backbone handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn da_backbone_shapes(h: *const DaBackbone, out: *mut DaShapes) -> DaStatus {
    guard(|| {
        let (Some(b), false) = (h.as_ref(), out.is_null()) else {
            return Err(null("handle or out"));
        };
        let s = b.inner.shapes();
        *out = DaShapes { lookback: s.lookback, covariates: s.covariates, horizon: s.horizon, targets: s.targets };
        Ok(())
    })
}

/// Writes the hex SHA-256 checksum of the backbone parameters into `buf`
/// and stores the needed length (including the NUL) in `needed`.
///
/// # Safety
/// `h` must be a live backbone handle; `buf` null or valid for `cap` bytes;
/// `needed` null or valid.
#[no_mangle]
pub unsafe extern "C" fn da_backbone_checksum(
    h: *const DaBackbone,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> DaStatus {
    guard(|| {
        let b = h.as_ref().ok_or_else(|| null("handle"))?;
        let n = copy_str(&b.inner.checksum(), buf, cap);
        if !needed.is_null() {
            *needed = n;
        }
        if buf.is_null() || cap < n {
            return Err((DaStatus::Dimension, format!("checksum needs {n} bytes")));
        }
        Ok(())
    })
}

/// Frozen forecast of one context.
///
/// # Safety
/// `h` must be a live backbone handle; `x` valid for `x_len` reads and `y`
/// for `y_len` writes.
#[no_mangle]
pub unsafe extern "C" fn da_backbone_predict(
    h: *const DaBackbone,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
) -> DaStatus {
    guard(|| {
        let b = h.as_ref().ok_or_else(|| null("handle"))?;
        let x = tensor_arg(x, x_len, b.inner.shapes().input_shape())?;
        let out = lib(b.inner.predict(&x))?;
        write_out(&out, y, y_len)
    })
}

/// A fresh adapter around `backbone`; at initialization it reproduces the
/// backbone's forecasts exactly.
///
/// # Safety
/// `backbone` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn da_adapter_new(
    backbone: *const DaBackbone,
    placement: DaPlacement,
    form: DaForm,
    delta: f64,
    seed: u64,
    out: *mut *mut DaModel,
) -> DaStatus {
    guard(|| {
        let b = backbone.as_ref().ok_or_else(|| null("backbone"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let placement = match placement {
            DaPlacement::Input => Placement::Input,
            DaPlacement::Output => Placement::Output,
        };
        let form = match form {
            DaForm::Additive => Form::Additive,
            DaForm::Multiplicative => Form::Multiplicative,
            DaForm::Exp => Form::Exp,
        };
        let net = lib(AdapterNet::new(AdapterConfig::new(placement, form, delta), b.inner.shapes(), seed))?;
        *out = Box::into_raw(Box::new(DaModel { inner: Model::Adapter(net) }));
        Ok(())
    })
}

/// Loads a model checkpoint written for `backbone`; a checkpoint recorded
/// against a different backbone is rejected with `Checkpoint`.
///
/// # Safety
/// `backbone` must be a live handle, `path` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn da_model_load(
    backbone: *const DaBackbone,
    path: *const c_char,
    out: *mut *mut DaModel,
) -> DaStatus {
    guard(|| {
        let b = backbone.as_ref().ok_or_else(|| null("backbone"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path)?;
        if !p.exists() {
            return Err((DaStatus::Checkpoint, format!("model checkpoint {} not found", p.display())));
        }
        let inner = lib(load_model(&p, &b.inner))?;
        *out = Box::into_raw(Box::new(DaModel { inner }));
        Ok(())
    })
}

/// Saves a model together with its backbone's checksum.
///
/// # Safety
/// Both handles must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn da_model_save(
    model: *const DaModel,
    backbone: *const DaBackbone,
    path: *const c_char,
) -> DaStatus {
    guard(|| {
        let (Some(m), Some(b)) = (model.as_ref(), backbone.as_ref()) else {
            return Err(null("handle"));
        };
        let p = path_arg(path)?;
        lib(save_model(&p, &m.inner, &b.inner)).map(|_| ())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `h` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn da_model_free(h: *mut DaModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Adapted point forecast of one context. Calibrators and selectors return
/// their point forecast.
///
/// # Safety
/// Both handles must be live; `x` valid for `x_len` reads and `y` for
/// `y_len` writes.
#[no_mangle]
pub unsafe extern "C" fn da_model_predict(
    model: *const DaModel,
    backbone: *const DaBackbone,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
) -> DaStatus {
    guard(|| {
        let (Some(m), Some(b)) = (model.as_ref(), backbone.as_ref()) else {
            return Err(null("handle"));
        };
        let x = tensor_arg(x, x_len, b.inner.shapes().input_shape())?;
        let out = lib(m.inner.trainable().predict(&b.inner, &x))?;
        write_out(&out, y, y_len)
    })
}
