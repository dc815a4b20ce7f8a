//! C interface.
//!
//! Every function returns an [`OperantStatus`]. On failure the message is
//! kept per thread and can be read with [`operant_last_error_message`].
//! Models are opaque handles created by [`operant_model_load`] and released
//! with [`operant_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use operant::bench::relative_l2;
use operant::ntk::ntk_weights;
use operant::operatornet::DeepOnetParams;
use operant::Error;

/// Status codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperantStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numerical = 4,
    Panic = 5,
}

/// Opaque model handle.
pub struct OperantModel {
    params: DeepOnetParams,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> OperantStatus {
    match e {
        Error::Io { .. } | Error::Json(_) => OperantStatus::Io,
        Error::NonFinite { .. }
        | Error::Numerical(_)
        | Error::Integration(_)
        | Error::Instability { .. }
        | Error::Diverged { .. }
        | Error::UndefinedMetric => OperantStatus::Numerical,
        _ => OperantStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (OperantStatus, String)>) -> OperantStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OperantStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            OperantStatus::Panic
        }
    }
}

fn lift<T>(r: operant::Result<T>) -> Result<T, (OperantStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (OperantStatus, String) {
    (OperantStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], (OperantStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to `len` writable values.
unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (OperantStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len - 1` bytes) and returns the full message
/// length in bytes. Passing a null `buf` only queries the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn operant_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a JSON checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn operant_model_load(path: *const c_char, out: *mut *mut OperantModel) -> OperantStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (OperantStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let params = lift(DeepOnetParams::load(Path::new(p)))?;
        *out = Box::into_raw(Box::new(OperantModel { params }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`operant_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn operant_model_free(model: *mut OperantModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the sensor count, coordinate dimension and parameter count.
///
/// # Safety
/// `model` must be a live handle; each output must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn operant_model_shape(
    model: *const OperantModel,
    sensors: *mut usize,
    coord_dim: *mut usize,
    n_params: *mut usize,
) -> OperantStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if !sensors.is_null() {
            *sensors = m.params.sensors();
        }
        if !coord_dim.is_null() {
            *coord_dim = m.params.coord_dim();
        }
        if !n_params.is_null() {
            *n_params = m.params.n_params();
        }
        Ok(())
    })
}

/// Evaluates `G(u)(y_j)` for `n` query points. `u` holds `m` sensor values,
/// `y` holds `n` points of `coord_dim` coordinates each (row-major), and
/// `out` receives `n` values.
///
/// # Safety
/// All pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn operant_predict(
    model: *const OperantModel,
    u: *const f64,
    m: usize,
    y: *const f64,
    n: usize,
    out: *mut f64,
) -> OperantStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let p = &model.params;
        let d = p.coord_dim();
        if m != p.sensors() {
            return Err((
                OperantStatus::InvalidArgument,
                format!("model expects {} sensor values, got {m}", p.sensors()),
            ));
        }
        let u = slice(u, m, "u")?;
        let y = slice(y, n * d, "y")?;
        let out = slice_mut(out, n, "out")?;
        let pred = lift(p.predict_points(u, y))?;
        out.copy_from_slice(&pred);
        Ok(())
    })
}

/// Kernel-guided weights `λ_k = (max_j h_j / h_k)^α`. `clamped`, when not
/// null, receives the number of entries raised to the floor.
///
/// # Safety
/// `diag` and `out` must hold `n` values; `clamped` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn operant_ntk_weights(
    diag: *const f64,
    n: usize,
    alpha: f64,
    out: *mut f64,
    clamped: *mut usize,
) -> OperantStatus {
    guard(|| {
        let diag = slice(diag, n, "diag")?;
        let out = slice_mut(out, n, "out")?;
        let w = lift(ntk_weights(diag, alpha))?;
        out.copy_from_slice(&w.lambdas);
        if !clamped.is_null() {
            *clamped = w.clamped;
        }
        Ok(())
    })
}

/// `‖pred − truth‖ / ‖truth‖`.
///
/// # Safety
/// `pred` and `truth` must hold `n` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn operant_relative_l2(
    pred: *const f64,
    truth: *const f64,
    n: usize,
    out: *mut f64,
) -> OperantStatus {
    guard(|| {
        let pred = slice(pred, n, "pred")?;
        let truth = slice(truth, n, "truth")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(relative_l2(pred, truth))?;
        Ok(())
    })
}
