//! C ABI over `cover_decode`.
//!
//! Every fallible call returns a [`CdStatus`]; on failure the message is
//! available from [`cd_last_error_message`] on the same thread. Objects are
//! opaque handles written through an out-parameter and released with the
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cover_decode::cover::{self, CoverConfig, TradeoffRule};
use cover_decode::expand::{ConformalSet, StepRule};
use cover_decode::scorer::{make_longtail_model, sample_dataset, LongTailConfig};
use cover_decode::{pac, CalibratedModel, ClusteringConfig, Error, LambdaSchedule, ScoreTrace, TabularARModel, Token};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdStatus {
    Ok = 0,
    InvalidInput = 1,
    Parse = 2,
    Validation = 3,
    Io = 4,
    Infeasible = 5,
    Audit = 6,
    Overlap = 7,
    Unsupported = 8,
    NullPointer = 9,
    Panic = 10,
}

impl From<&Error> for CdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => CdStatus::InvalidInput,
            Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => CdStatus::Parse,
            Error::Validation { .. } | Error::DuplicateId(_) => CdStatus::Validation,
            Error::Unsupported(_) => CdStatus::Unsupported,
            Error::Infeasible(_) => CdStatus::Infeasible,
            Error::Audit { .. } => CdStatus::Audit,
            Error::Overlap(_) => CdStatus::Overlap,
            Error::Io(_) => CdStatus::Io,
        }
    }
}

/// Loaded calibration or evaluation traces.
pub struct CdTraces(Vec<ScoreTrace>);

/// Tabular autoregressive scorer.
pub struct CdArModel(TabularARModel);

/// Calibrated cluster-step thresholds.
pub struct CdModel(CalibratedModel);

/// Decoded prediction set.
pub struct CdSet {
    set: ConformalSet,
    flat: Vec<Vec<u32>>,
}

/// Calibration parameters. Start from [`cd_cover_params_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CdCoverParams {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// When true, scales lambda by each cluster's share of the traces.
    pub lambda_count_scaled: bool,
    pub clusters: usize,
    pub min_count: usize,
    pub bucket_width: usize,
    pub budget: usize,
    pub max_len: usize,
    /// Lower the anchor level to fund each raise instead of only raising.
    pub anchor_transfer: bool,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (CdStatus, String)>) -> CdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CdStatus::Panic
        }
    }
}

fn lift(e: Error) -> (CdStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (CdStatus, String) {
    (CdStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (CdStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (CdStatus::InvalidInput, "path is not valid UTF-8".into()))
}

unsafe fn out_ptr<'a, T>(out: *mut T, what: &str) -> Result<&'a mut T, (CdStatus, String)> {
    out.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, (CdStatus, String)> {
    h.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn cd_cover_params_default() -> CdCoverParams {
    let c = CoverConfig::default();
    CdCoverParams {
        alpha: c.alpha,
        gamma: c.gamma,
        lambda: 1.0,
        lambda_count_scaled: false,
        clusters: c.clustering.clusters,
        min_count: c.clustering.min_count,
        bucket_width: c.clustering.bucket_width,
        budget: c.budget,
        max_len: c.max_len,
        anchor_transfer: false,
        seed: 0,
    }
}

// ---- numerics ----

/// Conformal quantile of `values[0..n]` at level `tau`.
///
/// # Safety
/// `values` must point to `n` readable doubles (or be NULL with `n == 0`).
#[no_mangle]
pub unsafe extern "C" fn cd_quantile(tau: f64, values: *const f64, n: usize, out: *mut f64) -> CdStatus {
    guard(|| {
        let vals = if n == 0 {
            &[][..]
        } else if values.is_null() {
            return Err(null("values"));
        } else {
            std::slice::from_raw_parts(values, n)
        };
        *out_ptr(out, "out")? = cover_decode::quantile(tau, vals).map_err(lift)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn cd_empirical_bernstein(mean: f64, var: f64, n: usize, delta: f64, out: *mut f64) -> CdStatus {
    guard(|| {
        *out_ptr(out, "out")? = pac::empirical_bernstein(mean, var, n, delta).map_err(lift)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn cd_hoeffding_upper(p_hat: f64, n: usize, zeta: f64, out: *mut f64) -> CdStatus {
    guard(|| {
        *out_ptr(out, "out")? = pac::hoeffding_upper(p_hat, n, zeta).map_err(lift)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn cd_beta_quantile(delta: f64, a: f64, b: f64, out: *mut f64) -> CdStatus {
    guard(|| {
        *out_ptr(out, "out")? = pac::beta_quantile(delta, a, b).map_err(lift)?;
        Ok(())
    })
}

// ---- traces ----

/// Loads a line-delimited trace file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn cd_traces_load(path: *const c_char, out: *mut *mut CdTraces) -> CdStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let traces = cover_decode::load_traces(path_arg(path)?).map_err(lift)?;
        *slot = Box::into_raw(Box::new(CdTraces(traces)));
        Ok(())
    })
}

/// # Safety
/// `traces` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cd_traces_save(traces: *const CdTraces, path: *const c_char) -> CdStatus {
    guard(|| {
        let t = handle(traces, "traces")?;
        cover_decode::save_traces(path_arg(path)?, &t.0).map_err(lift)
    })
}

/// Number of traces; 0 for NULL.
///
/// # Safety
/// `traces` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cd_traces_len(traces: *const CdTraces) -> usize {
    traces.as_ref().map_or(0, |t| t.0.len())
}

/// # Safety
/// `traces` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cd_traces_free(traces: *mut CdTraces) {
    if !traces.is_null() {
        drop(Box::from_raw(traces));
    }
}

// ---- autoregressive scorer ----

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn cd_ar_model_load(path: *const c_char, out: *mut *mut CdArModel) -> CdStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let m = TabularARModel::load(path_arg(path)?).map_err(lift)?;
        *slot = Box::into_raw(Box::new(CdArModel(m)));
        Ok(())
    })
}

/// First-order long-tail model: `head` frequent tokens (the last of them is
/// the terminator) and `vocab - head` tail tokens sharing `tail_mass`.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn cd_ar_model_longtail(
    vocab: usize,
    head: usize,
    max_len: usize,
    tail_mass: f64,
    head_skew: f64,
    seed: u64,
    out: *mut *mut CdArModel,
) -> CdStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        if head == 0 || head > vocab {
            return Err((CdStatus::InvalidInput, "need 1 <= head <= vocab".into()));
        }
        let mut cfg = LongTailConfig::standard(vocab, head, max_len, tail_mass, seed);
        cfg.head_skew = head_skew;
        let m = make_longtail_model(&cfg).map_err(lift)?;
        *slot = Box::into_raw(Box::new(CdArModel(m)));
        Ok(())
    })
}

/// Samples `n` traces; ids depend on `seed`.
///
/// # Safety
/// `model` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn cd_ar_model_sample(model: *const CdArModel, n: usize, seed: u64, out: *mut *mut CdTraces) -> CdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let slot = out_ptr(out, "out")?;
        let traces = sample_dataset(&m.0, n, seed).map_err(lift)?;
        *slot = Box::into_raw(Box::new(CdTraces(traces)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cd_ar_model_save(model: *const CdArModel, path: *const c_char) -> CdStatus {
    guard(|| handle(model, "model")?.0.save(path_arg(path)?).map_err(lift))
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cd_ar_model_free(model: *mut CdArModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- calibrated model ----

/// Runs clustering and threshold optimization on `traces`.
///
/// # Safety
/// `traces` must be a live handle, `params` NULL (defaults) or valid, `out` a
/// valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn cd_calibrate(traces: *const CdTraces, params: *const CdCoverParams, out: *mut *mut CdModel) -> CdStatus {
    guard(|| {
        let t = handle(traces, "traces")?;
        let slot = out_ptr(out, "out")?;
        let p = params.as_ref().copied().unwrap_or_else(|| cd_cover_params_default());
        let config = CoverConfig {
            alpha: p.alpha,
            gamma: p.gamma,
            lambda: if p.lambda_count_scaled {
                LambdaSchedule::CountScaled(p.lambda)
            } else {
                LambdaSchedule::Uniform(p.lambda)
            },
            clustering: ClusteringConfig {
                clusters: p.clusters,
                min_count: p.min_count,
                bucket_width: p.bucket_width,
                seed: p.seed,
                ..ClusteringConfig::default()
            },
            budget: p.budget,
            rule: if p.anchor_transfer {
                TradeoffRule::AnchorTransfer
            } else {
                TradeoffRule::RaiseOnly
            },
            split_seed: p.seed,
            optimizer_seed: p.seed,
            max_len: p.max_len,
            ..CoverConfig::default()
        };
        let cal = cover::calibrate(&t.0, &config).map_err(lift)?;
        *slot = Box::into_raw(Box::new(CdModel(cal.model)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn cd_model_load(path: *const c_char, out: *mut *mut CdModel) -> CdStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        let m = CalibratedModel::load(path_arg(path)?).map_err(lift)?;
        *slot = Box::into_raw(Box::new(CdModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cd_model_save(model: *const CdModel, path: *const c_char) -> CdStatus {
    guard(|| handle(model, "model")?.0.save(path_arg(path)?).map_err(lift))
}

/// Threshold applied to `token` at step `l` (1-based).
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_threshold(model: *const CdModel, l: usize, token: u32, out: *mut f64) -> CdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let slot = out_ptr(out, "out")?;
        if l == 0 {
            return Err((CdStatus::InvalidInput, "steps are 1-based".into()));
        }
        *slot = m.0.rule().threshold(l, Token(token));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cd_model_free(model: *mut CdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- decoding ----

/// Expands every prefix kept by `model` under `scorer`. `max_len == 0` uses
/// the model's horizon.
///
/// # Safety
/// `model` and `scorer` must be live handles; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn cd_decode(
    model: *const CdModel,
    scorer: *const CdArModel,
    max_len: usize,
    max_nodes: usize,
    out: *mut *mut CdSet,
) -> CdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let s = handle(scorer, "scorer")?;
        let slot = out_ptr(out, "out")?;
        let len = if max_len == 0 { m.0.max_len } else { max_len };
        let set = cover::cover_decode(&s.0, &m.0, len, max_nodes).map_err(lift)?;
        let flat = set.sequences.iter().map(|q| q.iter().map(|t| t.0).collect()).collect();
        *slot = Box::into_raw(Box::new(CdSet { set, flat }));
        Ok(())
    })
}

/// Number of complete sequences; 0 for NULL.
///
/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cd_set_len(set: *const CdSet) -> usize {
    set.as_ref().map_or(0, |s| s.flat.len())
}

/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cd_set_expanded_nodes(set: *const CdSet) -> usize {
    set.as_ref().map_or(0, |s| s.set.expanded_nodes)
}

/// True when expansion stopped at the node cap.
///
/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cd_set_truncated(set: *const CdSet) -> bool {
    set.as_ref().is_some_and(|s| s.set.truncated)
}

/// Borrows sequence `i`. The tokens stay valid until the set is freed.
///
/// # Safety
/// `set` must be a live handle; `tokens` and `len` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cd_set_sequence(set: *const CdSet, i: usize, tokens: *mut *const u32, len: *mut usize) -> CdStatus {
    guard(|| {
        let s = handle(set, "set")?;
        let seq = s
            .flat
            .get(i)
            .ok_or_else(|| (CdStatus::InvalidInput, format!("index {i} out of range ({} sequences)", s.flat.len())))?;
        *out_ptr(tokens, "tokens")? = seq.as_ptr();
        *out_ptr(len, "len")? = seq.len();
        Ok(())
    })
}

/// # Safety
/// `set` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cd_set_free(set: *mut CdSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}
