//! C ABI over `lex-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`/
//! `*_fit`/`*_train` functions and released by the matching `*_free`. Every
//! fallible call returns a [`LexStatus`]; on failure the message is available
//! from [`lex_last_error`] on the same thread until the next failing call.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lex_core::evalkit::{self, SelectionMetrics};
use lex_core::imputers::{fit_imputer, Imputer, ImputerSpec};
use lex_core::lexmodel::{LexModel as CoreModel, RunConfig};
use lex_core::rng::{seeded, stream};
use lex_core::synthgen::{self, Dataset, Split, SynthName, X10Sign};
use lex_core::trainer::{self, TrainOptions};
use lex_core::LexError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LexStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Contract = 5,
    Parse = 6,
    State = 7,
    Numerical = 8,
    Capability = 9,
    Io = 10,
    Json = 11,
    Panic = 12,
}

/// Selection quality over a test set.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LexMetrics {
    pub tpr: f64,
    pub fpr: f64,
    pub fdr: f64,
    pub accuracy: f64,
    pub accuracy_per_mask: f64,
    pub effective_rate: f64,
    pub n_mask_samples: usize,
    pub n_instances: usize,
}

impl From<SelectionMetrics> for LexMetrics {
    fn from(m: SelectionMetrics) -> Self {
        LexMetrics {
            tpr: m.tpr,
            fpr: m.fpr,
            fdr: m.fdr,
            accuracy: m.accuracy,
            accuracy_per_mask: m.accuracy_per_mask,
            effective_rate: m.effective_rate,
            n_mask_samples: m.n_mask_samples,
            n_instances: m.n_instances,
        }
    }
}

/// A table of features, labels and ground-truth masks.
pub struct LexDataset(Dataset);

/// A fitted imputation scheme.
pub struct LexImputer(Imputer);

/// A trained selector/predictor pair with its imputer.
pub struct LexModel(CoreModel<f32>);

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(LexError),
}

impl From<LexError> for Failure {
    fn from(e: LexError) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &LexError) -> LexStatus {
    match e {
        LexError::Dimension(_) => LexStatus::Dimension,
        LexError::Contract(_) => LexStatus::Contract,
        LexError::Config(_) => LexStatus::Config,
        LexError::Parse { .. } => LexStatus::Parse,
        LexError::State(_) => LexStatus::State,
        LexError::Numerical(_) => LexStatus::Numerical,
        LexError::Capability(_) => LexStatus::Capability,
        LexError::Io { .. } => LexStatus::Io,
        LexError::Json(_) => LexStatus::Json,
    }
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> LexStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LexStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            LexStatus::NullArgument
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            LexStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            LexStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lex_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failing call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lex_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates `n` rows of the synthetic dataset `name` ("S1", "S2", "S3").
#[no_mangle]
pub unsafe extern "C" fn lex_dataset_generate(name: *const c_char, n: usize, seed: u64, out: *mut *mut LexDataset) -> LexStatus {
    guard(|| {
        let name: SynthName = text(name, "name")?.parse()?;
        put(out, LexDataset(synthgen::gen_synthetic(name, n, seed, Split::Train, X10Sign::Negative)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn lex_dataset_load(path: *const c_char, out: *mut *mut LexDataset) -> LexStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        put(out, LexDataset(synthgen::load_dataset(&path)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn lex_dataset_save(ds: *const LexDataset, path: *const c_char) -> LexStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let path = PathBuf::from(text(path, "path")?);
        Ok(synthgen::save_dataset(&ds.0, &path)?)
    })
}

/// Number of rows, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn lex_dataset_rows(ds: *const LexDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Number of features, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn lex_dataset_features(ds: *const LexDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_features)
}

#[no_mangle]
pub unsafe extern "C" fn lex_dataset_free(ds: *mut LexDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits the imputer described by a JSON spec, e.g. `{"kind": "gmm", "components": 10}`.
#[no_mangle]
pub unsafe extern "C" fn lex_imputer_fit(spec_json: *const c_char, train: *const LexDataset, seed: u64, out: *mut *mut LexImputer) -> LexStatus {
    guard(|| {
        let spec: ImputerSpec = serde_json::from_str(text(spec_json, "spec_json")?).map_err(|e| LexError::Config(e.to_string()))?;
        let ds = &handle(train, "train")?.0;
        let imputer = if spec.needs_fit() {
            let rows = trainer::train_rows(ds);
            fit_imputer(&spec, &rows.x, &ds.subset(Split::Val).x, ds.n_features, seed)?.0
        } else {
            spec.unfitted()?
        };
        put(out, LexImputer(imputer))
    })
}

#[no_mangle]
pub unsafe extern "C" fn lex_imputer_load(path: *const c_char, out: *mut *mut LexImputer) -> LexStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        put(out, LexImputer(Imputer::load(&path)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn lex_imputer_save(imp: *const LexImputer, path: *const c_char) -> LexStatus {
    guard(|| {
        let imp = handle(imp, "imputer")?;
        let path = PathBuf::from(text(path, "path")?);
        Ok(imp.0.save(&path)?)
    })
}

/// Writes `x` with the coordinates where `z` is 0 replaced by an imputed draw.
/// `x`, `z` and `out` each hold `d` values.
#[no_mangle]
pub unsafe extern "C" fn lex_imputer_impute(imp: *const LexImputer, x: *const f64, z: *const u8, d: usize, seed: u64, out: *mut f64) -> LexStatus {
    guard(|| {
        let imp = handle(imp, "imputer")?;
        let x = slice(x, d, "x")?;
        let z = slice(z, d, "z")?;
        let out = slice_mut(out, d, "out")?;
        Ok(imp.0.impute_into(x, z, &mut seeded(seed), out)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn lex_imputer_free(imp: *mut LexImputer) {
    if !imp.is_null() {
        drop(Box::from_raw(imp));
    }
}

/// Trains a model from a JSON run config on `train` with a fitted imputer.
/// When both `test` and `metrics` are non-NULL the model is evaluated on `test`.
#[no_mangle]
pub unsafe extern "C" fn lex_model_train(
    config_json: *const c_char,
    train: *const LexDataset,
    imputer: *const LexImputer,
    test: *const LexDataset,
    out: *mut *mut LexModel,
    metrics: *mut LexMetrics,
) -> LexStatus {
    guard(|| {
        let cfg = RunConfig::from_json(text(config_json, "config_json")?)?;
        let train = &handle(train, "train")?.0;
        let imputer = handle(imputer, "imputer")?.0.clone();
        let test = test.as_ref().map(|t| &t.0);
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let outcome = trainer::train(&cfg, train, test.filter(|_| !metrics.is_null()), imputer, &TrainOptions::default())?;
        if let (Some(m), false) = (outcome.record.test_metrics, metrics.is_null()) {
            *metrics = m.into();
        }
        put(out, LexModel(outcome.model))
    })
}

/// Loads a run directory written by `lex train`.
#[no_mangle]
pub unsafe extern "C" fn lex_model_load(run_dir: *const c_char, out: *mut *mut LexModel) -> LexStatus {
    guard(|| {
        let dir = PathBuf::from(text(run_dir, "run_dir")?);
        put(out, LexModel(trainer::load_run(&dir)?.1))
    })
}

/// Number of input features of the model, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn lex_model_features(m: *const LexModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.d)
}

/// Selector logits for `rows` inputs of width `d`; `out` holds `rows * d` values.
#[no_mangle]
pub unsafe extern "C" fn lex_model_selector_logits(m: *const LexModel, x: *const f64, rows: usize, d: usize, out: *mut f64) -> LexStatus {
    guard(|| {
        let m = &handle(m, "model")?.0;
        if d != m.d {
            return Err(Failure::Core(LexError::Dimension(format!("model expects {} features, got {d}", m.d))));
        }
        let n = rows.checked_mul(d).ok_or_else(|| Failure::Invalid("rows * d overflows".into()))?;
        let x = slice(x, n, "x")?;
        let out = slice_mut(out, n, "out")?;
        out.copy_from_slice(&m.selector_logits(x, rows)?);
        Ok(())
    })
}

/// Mask-sampled selection metrics of the model on `ds`.
#[no_mangle]
pub unsafe extern "C" fn lex_model_evaluate(m: *const LexModel, ds: *const LexDataset, n_masks: usize, seed: u64, out: *mut LexMetrics) -> LexStatus {
    guard(|| {
        let m = &handle(m, "model")?.0;
        let ds = &handle(ds, "dataset")?.0;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = evalkit::evaluate_model(m, ds, n_masks, &mut stream(seed, "eval"))?.into();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lex_model_free(m: *mut LexModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// TPR, FPR and FDR of one mask `z` against the truth `z_star`, both of length `d`.
#[no_mangle]
pub unsafe extern "C" fn lex_mask_metrics(z: *const u8, z_star: *const u8, d: usize, tpr: *mut f64, fpr: *mut f64, fdr: *mut f64) -> LexStatus {
    guard(|| {
        let (a, b, c) = evalkit::mask_metrics(slice(z, d, "z")?, slice(z_star, d, "z_star")?)?;
        for (p, v, what) in [(tpr, a, "tpr"), (fpr, b, "fpr"), (fdr, c, "fdr")] {
            if p.is_null() {
                return Err(Failure::Null(what));
            }
            *p = v;
        }
        Ok(())
    })
}
