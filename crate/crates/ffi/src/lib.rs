//! C ABI over the svastin library.
//!
//! Every object crosses the boundary as an opaque handle owned by the caller
//! and released with its `*_free` function. Every function returns an
//! [`SvStatus`]; on failure a message is available from
//! [`sv_last_error_message`] on the same thread until the next failing call.
//!
//! Videos are `[C, T, W, H]` row-major `float` buffers with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use svastin::attack::{run_attack, AttackConfig, AttackResult};
use svastin::harness::RunConfig;
use svastin::victim::{wrap_external, Classifier, ExternalModel, Preprocess, ToyCnn};
use svastin::wavelet3d::{haar3_forward, haar3_inverse};
use svastin::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Precondition = 5,
    NotDifferentiable = 6,
    Numeric = 7,
    Io = 8,
    Format = 9,
    Callback = 10,
    Panic = 11,
}

/// A video or coefficient tensor.
pub struct SvVideo(Tensor<f32>);

/// A model that can be attacked.
pub struct SvClassifier(Box<dyn Classifier<f32>>);

/// Outcome of one attack.
pub struct SvAttackResult(AttackResult);

/// `logits_out` has room for `num_classes` values. Return 0 on success.
pub type SvLogitsCallback = Option<
    unsafe extern "C" fn(
        user_data: *mut c_void,
        video: *const f32,
        shape: *const usize,
        logits_out: *mut f32,
        num_classes: usize,
    ) -> c_int,
>;

/// Writes the gradient of a scalar loss with respect to `video` into
/// `grad_out` (same length as `video`), given its gradient with respect to
/// the logits. Return 0 on success.
pub type SvVjpCallback = Option<
    unsafe extern "C" fn(
        user_data: *mut c_void,
        video: *const f32,
        shape: *const usize,
        grad_logits: *const f32,
        num_classes: usize,
        grad_out: *mut f32,
    ) -> c_int,
>;

struct Failure(SvStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) | Error::OddAxis { .. } | Error::ClassIndex { .. } => SvStatus::Shape,
            Error::Config(_) => SvStatus::Config,
            Error::Precondition(_) => SvStatus::Precondition,
            Error::NotDifferentiable => SvStatus::NotDifferentiable,
            Error::NumericOverflow { .. } | Error::Diverged { .. } => SvStatus::Numeric,
            Error::Io { .. } => SvStatus::Io,
            Error::Format { .. } | Error::Image { .. } | Error::Integrity(_) => SvStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> SvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            SvStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn path_arg<'a>(p: *const c_char) -> FfiResult<&'a Path> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(SvStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

/// Message of the last failure on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn sv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `c*t*w*h` floats from `data` into a new video.
///
/// # Safety
/// `data` must point to `c*t*w*h` readable floats and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_video_new(
    c: usize,
    t: usize,
    w: usize,
    h: usize,
    data: *const f32,
    out: *mut *mut SvVideo,
) -> SvStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = [c, t, w, h]
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Failure(SvStatus::Shape, "shape overflows".into()))?;
        let buf = std::slice::from_raw_parts(data, n).to_vec();
        put(out, SvVideo(Tensor::from_vec(&[c, t, w, h], buf)?))
    })
}

/// # Safety
/// `v` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sv_video_free(v: *mut SvVideo) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Writes `[C, T, W, H]` into `shape_out`.
///
/// # Safety
/// `shape_out` must have room for 4 values.
#[no_mangle]
pub unsafe extern "C" fn sv_video_shape(v: *const SvVideo, shape_out: *mut usize) -> SvStatus {
    guard(|| {
        let v = borrow(v, "video")?;
        if shape_out.is_null() {
            return Err(null("shape_out"));
        }
        let dims = v.0.dims4()?;
        ptr::copy_nonoverlapping(dims.as_ptr(), shape_out, 4);
        Ok(())
    })
}

/// Borrowed pointer to the samples, valid while `v` lives.
///
/// # Safety
/// `data_out` and `len_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_video_data(v: *const SvVideo, data_out: *mut *const f32, len_out: *mut usize) -> SvStatus {
    guard(|| {
        let v = borrow(v, "video")?;
        if data_out.is_null() || len_out.is_null() {
            return Err(null("output pointer"));
        }
        *data_out = v.0.data().as_ptr();
        *len_out = v.0.len();
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sv_video_read_raw(path: *const c_char, out: *mut *mut SvVideo) -> SvStatus {
    guard(|| put(out, SvVideo(svastin::video_io::read_raw(path_arg(path)?)?)))
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sv_video_write_raw(v: *const SvVideo, path: *const c_char) -> SvStatus {
    guard(|| Ok(svastin::video_io::write_raw(path_arg(path)?, &borrow(v, "video")?.0)?))
}

/// One-level 3D Haar transform: `[C, T, W, H]` to `[8C, T/2, W/2, H/2]`.
///
/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_dwt3d_forward(v: *const SvVideo, out: *mut *mut SvVideo) -> SvStatus {
    guard(|| put(out, SvVideo(haar3_forward(&borrow(v, "video")?.0)?)))
}

/// # Safety
/// Handles must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_dwt3d_inverse(coeffs: *const SvVideo, out: *mut *mut SvVideo) -> SvStatus {
    guard(|| put(out, SvVideo(haar3_inverse(&borrow(coeffs, "coefficients")?.0)?)))
}

/// Loads a toy CNN checkpoint written by `svastin train-victim`.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sv_classifier_load(path: *const c_char, out: *mut *mut SvClassifier) -> SvStatus {
    guard(|| {
        let model = ToyCnn::<f32>::load(path_arg(path)?)?;
        put(out, SvClassifier(Box::new(model)))
    })
}

struct UserData(*mut c_void);

// SAFETY: the caller promises the callbacks tolerate calls from any thread.
unsafe impl Send for UserData {}
unsafe impl Sync for UserData {}

/// Wraps caller-provided inference. Inputs reaching the callbacks are the
/// raw `[0, 1]` videos; `vjp` may be null for a model that cannot be
/// attacked with gradients. The callbacks may be invoked from any thread
/// and must stay valid, together with `user_data`, until the handle is freed.
///
/// # Safety
/// See above; `shape` must hold 4 values.
#[no_mangle]
pub unsafe extern "C" fn sv_classifier_from_callbacks(
    num_classes: usize,
    shape: *const usize,
    logits: SvLogitsCallback,
    vjp: SvVjpCallback,
    user_data: *mut c_void,
    out: *mut *mut SvClassifier,
) -> SvStatus {
    guard(|| {
        if shape.is_null() {
            return Err(null("shape"));
        }
        let logits = logits.ok_or_else(|| null("logits callback"))?;
        let mut input_shape = [0usize; 4];
        ptr::copy_nonoverlapping(shape, input_shape.as_mut_ptr(), 4);
        let ud = Arc::new(UserData(user_data));

        let u = ud.clone();
        let logits_fn = move |x: &Tensor<f32>| -> svastin::Result<Vec<f32>> {
            let dims = x.dims4()?;
            let mut z = vec![0f32; num_classes];
            let rc = logits(u.0, x.data().as_ptr(), dims.as_ptr(), z.as_mut_ptr(), num_classes);
            if rc != 0 {
                return Err(Error::Precondition(format!("logits callback returned {rc}")));
            }
            Ok(z)
        };
        let vjp_fn = vjp.map(|cb| {
            let u = ud.clone();
            Arc::new(move |x: &Tensor<f32>, g: &[f32]| -> svastin::Result<Tensor<f32>> {
                let dims = x.dims4()?;
                let mut dx = vec![0f32; x.len()];
                let rc = cb(u.0, x.data().as_ptr(), dims.as_ptr(), g.as_ptr(), g.len(), dx.as_mut_ptr());
                if rc != 0 {
                    return Err(Error::Precondition(format!("vjp callback returned {rc}")));
                }
                Tensor::from_vec(x.shape(), dx)
            }) as svastin::victim::VjpFn<f32>
        });
        let model = ExternalModel {
            num_classes,
            input_shape,
            feature_dim: num_classes,
            preprocess: Preprocess::identity(input_shape[0]),
            logits: Arc::new(logits_fn),
            features: None,
            vjp: vjp_fn,
        };
        let wrapped = wrap_external(model).map_err(|e| Failure(SvStatus::Callback, e.to_string()))?;
        put(out, SvClassifier(Box::new(wrapped)))
    })
}

/// # Safety
/// `f` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sv_classifier_free(f: *mut SvClassifier) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// # Safety
/// `num_classes_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_classifier_num_classes(f: *const SvClassifier, num_classes_out: *mut usize) -> SvStatus {
    guard(|| {
        let f = borrow(f, "classifier")?;
        if num_classes_out.is_null() {
            return Err(null("num_classes_out"));
        }
        *num_classes_out = f.0.num_classes();
        Ok(())
    })
}

/// Writes `len` logits, which must equal the class count.
///
/// # Safety
/// `logits_out` must have room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sv_classifier_logits(
    f: *const SvClassifier,
    v: *const SvVideo,
    logits_out: *mut f32,
    len: usize,
) -> SvStatus {
    guard(|| {
        let f = borrow(f, "classifier")?;
        let v = borrow(v, "video")?;
        if logits_out.is_null() {
            return Err(null("logits_out"));
        }
        if len != f.0.num_classes() {
            return Err(Failure(SvStatus::InvalidArgument, format!("buffer holds {len}, model has {} classes", f.0.num_classes())));
        }
        let z = f.0.logits(&v.0)?;
        ptr::copy_nonoverlapping(z.as_ptr(), logits_out, len);
        Ok(())
    })
}

/// Runs one targeted attack. `config_toml` uses the `[attack]` table of the
/// CLI config format and may be null for defaults.
///
/// # Safety
/// Handles must be valid; `config_toml` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sv_attack_run(
    x_c: *const SvVideo,
    x_g: *const SvVideo,
    target: usize,
    f: *const SvClassifier,
    config_toml: *const c_char,
    out: *mut *mut SvAttackResult,
) -> SvStatus {
    guard(|| {
        let cfg: AttackConfig = if config_toml.is_null() {
            AttackConfig::default()
        } else {
            let text = CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| Failure(SvStatus::InvalidArgument, "config is not valid UTF-8".into()))?;
            RunConfig::from_toml(text, &[])?.attack
        };
        let r = run_attack(&borrow(x_c, "clean video")?.0, &borrow(x_g, "guide video")?.0, target, &*borrow(f, "classifier")?.0, &cfg)?;
        put(out, SvAttackResult(r))
    })
}

/// # Safety
/// `r` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sv_result_free(r: *mut SvAttackResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// Output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_result_summary(
    r: *const SvAttackResult,
    success_out: *mut bool,
    epochs_out: *mut usize,
    confidence_out: *mut f64,
) -> SvStatus {
    guard(|| {
        let r = &borrow(r, "result")?.0;
        if success_out.is_null() || epochs_out.is_null() || confidence_out.is_null() {
            return Err(null("output pointer"));
        }
        *success_out = r.success;
        *epochs_out = r.epochs_used;
        *confidence_out = r.final_confidence;
        Ok(())
    })
}

/// Copies the quantized adversarial video into a new handle.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_result_adversarial(r: *const SvAttackResult, out: *mut *mut SvVideo) -> SvStatus {
    guard(|| put(out, SvVideo(borrow(r, "result")?.0.x_a.clone())))
}

/// Result record as JSON; release with [`sv_string_free`].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sv_result_json(r: *const SvAttackResult, out: *mut *mut c_char) -> SvStatus {
    guard(|| {
        let r = &borrow(r, "result")?.0;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let s = serde_json::to_string(r).map_err(|e| Failure(SvStatus::Format, e.to_string()))?;
        *out = CString::new(s).map_err(|e| Failure(SvStatus::Format, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn sv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
