//! C ABI over the `hkd` library.
//!
//! Every function returns an [`HkdStatus`]; on failure the message is
//! available from [`hkd_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. No function keeps a
//! pointer passed to it after returning.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hkd::autodiff::Tensor;
use hkd::ensemble::{uncertainty, EnsembleConfig, WeightPair, WeightStore};
use hkd::nn::{ClassifierSpec, ModelParams};
use hkd::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HkdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Numerical = 6,
    CheckpointMismatch = 7,
    CheckFailed = 8,
    Panic = 9,
}

/// Loss weights of one sample.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HkdWeightPair {
    pub beta: f64,
    pub gamma: f64,
}

/// Per-sample weight history with its ensembling settings.
pub struct HkdWeightStore {
    store: WeightStore,
    config: EnsembleConfig,
}

/// Classifier restored from a teacher or student checkpoint.
pub struct HkdModel {
    spec: ClassifierSpec,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> HkdStatus {
    match e {
        Error::Config { .. } | Error::InsufficientSamples { .. } => HkdStatus::Config,
        Error::Io { .. } => HkdStatus::Io,
        Error::Parse { .. } => HkdStatus::Parse,
        Error::CheckpointMismatch(_) => HkdStatus::CheckpointMismatch,
        Error::NonFinite { .. } => HkdStatus::Numerical,
        Error::ShapeMismatch { .. }
        | Error::Contract(_)
        | Error::InvalidDistribution(_)
        | Error::LabelOutOfRange { .. }
        | Error::Interrupted => HkdStatus::InvalidArgument,
    }
}

struct Fail(HkdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HkdStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            HkdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HkdStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: callers pass either null or a writable, aligned pointer.
    unsafe { ptr.as_mut() }.ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn hkd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hkd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Prediction entropy of `probs[0..len]`, divided by `ln(len)` when `normalize`.
///
/// # Safety
/// `probs` must be valid for `len` reads and `out_value` for one write.
#[no_mangle]
pub unsafe extern "C" fn hkd_uncertainty(probs: *const f64, len: usize, normalize: bool, out_value: *mut f64) -> HkdStatus {
    guard(|| {
        let p = slice(probs, len, "probs")?;
        *out(out_value, "out_value")? = uncertainty(p, normalize)?;
        Ok(())
    })
}

/// Cross-entropy of one row of logits.
///
/// # Safety
/// `logits` must be valid for `len` reads and `out_value` for one write.
#[no_mangle]
pub unsafe extern "C" fn hkd_cross_entropy(logits: *const f64, len: usize, label: usize, out_value: *mut f64) -> HkdStatus {
    guard(|| {
        let l = slice(logits, len, "logits")?;
        *out(out_value, "out_value")? = hkd::losses::cross_entropy(l, label)?;
        Ok(())
    })
}

/// Soft-label KL divergence from teacher to student probabilities at `temperature`.
///
/// # Safety
/// `teacher` and `student` must be valid for `len` reads and `out_value` for one write.
#[no_mangle]
pub unsafe extern "C" fn hkd_kd_vanilla(
    teacher: *const f64,
    student: *const f64,
    len: usize,
    temperature: f64,
    out_value: *mut f64,
) -> HkdStatus {
    guard(|| {
        let t = slice(teacher, len, "teacher")?;
        let s = slice(student, len, "student")?;
        *out(out_value, "out_value")? = hkd::losses::kd_vanilla(t, s, temperature)?;
        Ok(())
    })
}

/// New empty weight store. Entropy is taken as normalized.
///
/// # Safety
/// `out_store` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hkd_store_new(epsilon: f64, threshold: f64, out_store: *mut *mut HkdWeightStore) -> HkdStatus {
    guard(|| {
        let slot = out(out_store, "out_store")?;
        let config = EnsembleConfig {
            epsilon,
            threshold,
            normalize_entropy: true,
        };
        config.validate()?;
        *slot = Box::into_raw(Box::new(HkdWeightStore {
            store: WeightStore::new(),
            config,
        }));
        Ok(())
    })
}

/// # Safety
/// `store` must be null or a handle from [`hkd_store_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hkd_store_free(store: *mut HkdWeightStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Ensembles `fresh` for `sample_id` at visit `step` and records the result.
/// `step` must exceed the sample's previous step.
///
/// # Safety
/// `store` must be a live handle and `out_pair` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hkd_store_ensemble(
    store: *mut HkdWeightStore,
    sample_id: u64,
    fresh: HkdWeightPair,
    uncertainty: f64,
    step: u64,
    out_pair: *mut HkdWeightPair,
) -> HkdStatus {
    guard(|| {
        let s = out(store, "store")?;
        let slot = out(out_pair, "out_pair")?;
        let fresh = WeightPair {
            beta: fresh.beta,
            gamma: fresh.gamma,
        };
        let w = s.store.ensemble(sample_id, fresh, uncertainty, step, &s.config)?;
        *slot = HkdWeightPair {
            beta: w.beta,
            gamma: w.gamma,
        };
        Ok(())
    })
}

/// Number of samples with stored weights.
///
/// # Safety
/// `store` must be a live handle and `out_len` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hkd_store_len(store: *const HkdWeightStore, out_len: *mut usize) -> HkdStatus {
    guard(|| {
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        *out(out_len, "out_len")? = s.store.len();
        Ok(())
    })
}

/// Loads a teacher or student checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out_model` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hkd_model_load(path: *const c_char, out_model: *mut *mut HkdModel) -> HkdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let slot = out(out_model, "out_model")?;
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(HkdStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let (spec, params) = hkd::train::load_classifier(Path::new(p))?;
        *slot = Box::into_raw(Box::new(HkdModel { spec, params }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`hkd_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hkd_model_free(model: *mut HkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width and class count of a model.
///
/// # Safety
/// `model` must be a live handle; the outputs must be valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn hkd_model_dims(model: *const HkdModel, out_inputs: *mut usize, out_classes: *mut usize) -> HkdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(out_inputs, "out_inputs")? = m.spec.input_dim;
        *out(out_classes, "out_classes")? = m.spec.class_count;
        Ok(())
    })
}

/// Class probabilities for `rows` row-major samples.
/// `out_probs` receives `rows * classes` values.
///
/// # Safety
/// `x` must be valid for `rows * inputs` reads and `out_probs` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn hkd_model_predict(
    model: *const HkdModel,
    x: *const f64,
    rows: usize,
    out_probs: *mut f64,
    out_len: usize,
) -> HkdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let input = slice(x, rows * m.spec.input_dim, "x")?;
        let needed = rows * m.spec.class_count;
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        if out_len < needed {
            return Err(Fail(
                HkdStatus::InvalidArgument,
                format!("out_len {out_len} is below the {needed} values required"),
            ));
        }
        let t = Tensor::new(vec![rows, m.spec.input_dim], input.to_vec())?;
        let pred = m.spec.predict(&m.params, &t)?;
        std::slice::from_raw_parts_mut(out_probs, needed).copy_from_slice(pred.probs.data());
        Ok(())
    })
}

/// Runs the finite-difference suite on five seeds starting at `seed`.
/// Returns `CHECK_FAILED` (naming the checks) when any tolerance is exceeded.
///
/// # Safety
/// `out_worst` must be null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn hkd_gradcheck(seed: u64, out_worst: *mut f64) -> HkdStatus {
    guard(|| {
        let seeds: Vec<u64> = (0..5).map(|i| seed.wrapping_add(i)).collect();
        let report = hkd::gradcheck::run_suite(&seeds, None)?;
        if let Some(w) = out_worst.as_mut() {
            *w = report.results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
        }
        let failed: Vec<String> = report.failures().map(|r| r.name.clone()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Fail(HkdStatus::CheckFailed, format!("gradient check failed for: {}", failed.join(", "))))
        }
    })
}
