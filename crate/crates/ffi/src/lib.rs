//! C ABI over `fhmm_core`.
//!
//! Models are opaque handles created by the library and released with
//! [`fhmm_model_free`]. Every fallible call returns an [`FhmmStatus`]; on
//! failure a message is kept per thread and can be read with
//! [`fhmm_last_error`]. Arrays are caller-owned, row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::time::Duration;

use fhmm_core::eval::{infer_smf, infer_svi};
use fhmm_core::io::{config_hash, ModelFile, Provenance};
use fhmm_core::model::{
    exact_loglik, init_params, simulate, FhmmParams, Observations, TransitionMatrix,
};
use fhmm_core::numerics::CholFactor;
use fhmm_core::smf::{smf_em_fit, SmfConfig};
use fhmm_core::svi::{derive_seed, train, TrainConfig, TrainInit};
use fhmm_core::Error;

/// Result of every fallible call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhmmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Parse = 4,
    Io = 5,
    Version = 6,
    Numerical = 7,
    TooManyChains = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct FhmmModel {
    inner: ModelFile,
}

/// Options for [`fhmm_train_svi`]; start from [`fhmm_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FhmmTrainOptions {
    pub chains: usize,
    /// Window span (even); each window covers `dt + 1` rows.
    pub dt: usize,
    pub n_minibatch: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Width of the single hidden layer.
    pub hidden: usize,
    pub seed: u64,
    /// Wall-clock limit in seconds; zero or negative means none.
    pub budget_seconds: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FhmmStatus {
    match err {
        Error::Domain(_) | Error::Config(_) | Error::NonErgodic { .. } | Error::Boundary { .. } => {
            FhmmStatus::InvalidArgument
        }
        Error::DimensionMismatch { .. } => FhmmStatus::DimensionMismatch,
        Error::TooManyChains { .. } => FhmmStatus::TooManyChains,
        Error::NonFiniteGradient { .. } | Error::Internal(_) => FhmmStatus::Numerical,
        Error::Parse { .. } => FhmmStatus::Parse,
        Error::Version { .. } => FhmmStatus::Version,
        Error::Io { .. } => FhmmStatus::Io,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), FailWith>) -> FhmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FhmmStatus::Ok
        }
        Ok(Err(FailWith(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside fhmm".into());
            FhmmStatus::Panic
        }
    }
}

struct FailWith(FhmmStatus, String);

impl From<Error> for FailWith {
    fn from(e: Error) -> Self {
        FailWith(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> FailWith {
    FailWith(FhmmStatus::NullArgument, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], FailWith> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], FailWith> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, FailWith> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| FailWith(FhmmStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn model<'a>(m: *const FhmmModel) -> Result<&'a FhmmModel, FailWith> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn observations(y: *const f64, len: usize, dim: usize) -> Result<Observations, FailWith> {
    let n = len
        .checked_mul(dim)
        .ok_or_else(|| FailWith(FhmmStatus::InvalidArgument, "len * dim overflows".into()))?;
    Ok(Observations::new(
        len,
        dim,
        slice(y, n, "observations")?.to_vec(),
    )?)
}

unsafe fn emit(out: *mut *mut FhmmModel, inner: ModelFile) -> Result<(), FailWith> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(FhmmModel { inner }));
    Ok(())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fhmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn fhmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model from raw parameters.
///
/// `w` is `(chains + 1) × dim` with the bias last, `l` is the full `dim × dim`
/// lower-triangular factor and `trans` holds four entries per chain
/// (`p00 p01 p10 p11`).
///
/// # Safety
/// Buffers must hold the stated number of doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fhmm_model_new(
    chains: usize,
    dim: usize,
    w: *const f64,
    l: *const f64,
    trans: *const f64,
    out: *mut *mut FhmmModel,
) -> FhmmStatus {
    guard(|| {
        let w = slice(w, (chains + 1) * dim, "w")?.to_vec();
        let l = slice(l, dim * dim, "l")?.to_vec();
        let t = slice(trans, 4 * chains, "trans")?;
        let mats = t
            .chunks_exact(4)
            .map(|c| TransitionMatrix::new([[c[0], c[1]], [c[2], c[3]]]))
            .collect::<Result<Vec<_>, _>>()?;
        let params = FhmmParams::new(chains, dim, w, CholFactor::new(dim, l)?, mats)?;
        emit(
            out,
            ModelFile {
                params,
                net: None,
                provenance: Provenance {
                    algorithm: "external".into(),
                    seed: 0,
                    config_hash: config_hash(""),
                    iterations: 0,
                    standardization: None,
                },
            },
        )
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn fhmm_model_free(model: *mut FhmmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `file` must be a nul-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fhmm_model_load(
    file: *const c_char,
    out: *mut *mut FhmmModel,
) -> FhmmStatus {
    guard(|| {
        let inner = ModelFile::load(path(file)?)?;
        emit(out, inner)
    })
}

/// # Safety
/// `model` must be a live handle; `file` a nul-terminated path.
#[no_mangle]
pub unsafe extern "C" fn fhmm_model_save(
    model: *const FhmmModel,
    file: *const c_char,
) -> FhmmStatus {
    guard(|| {
        let m = self::model(model)?;
        Ok(m.inner.save(path(file)?)?)
    })
}

/// Number of chains, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fhmm_model_chains(model: *const FhmmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.params.num_chains())
}

/// Observation dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fhmm_model_dim(model: *const FhmmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.params.dim())
}

/// Copies `W` (`(chains + 1) × dim`) into `w_out`.
///
/// # Safety
/// `w_out` must hold `(chains + 1) * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn fhmm_model_weights(
    model: *const FhmmModel,
    w_out: *mut f64,
) -> FhmmStatus {
    guard(|| {
        let p = &self::model(model)?.inner.params;
        slice_mut(w_out, p.w().len(), "w_out")?.copy_from_slice(p.w());
        Ok(())
    })
}

/// Draws `len` steps. `states_out` may be null.
///
/// # Safety
/// `y_out` must hold `len * dim` doubles and `states_out`, if non-null, `len * chains`.
#[no_mangle]
pub unsafe extern "C" fn fhmm_simulate(
    model: *const FhmmModel,
    len: usize,
    seed: u64,
    y_out: *mut f64,
    states_out: *mut u8,
) -> FhmmStatus {
    guard(|| {
        let p = &self::model(model)?.inner.params;
        let (states, y) = simulate(p, len, seed)?;
        slice_mut(y_out, len * p.dim(), "y_out")?.copy_from_slice(y.data());
        if !states_out.is_null() {
            let s = std::slice::from_raw_parts_mut(states_out, len * p.num_chains());
            for t in 0..len {
                for k in 0..p.num_chains() {
                    s[t * p.num_chains() + k] = states.get(t, k);
                }
            }
        }
        Ok(())
    })
}

/// Exact log-likelihood of `y` (`len × dim`) divided by `len`.
///
/// # Safety
/// `y` must hold `len * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fhmm_loglik_per_step(
    model: *const FhmmModel,
    y: *const f64,
    len: usize,
    out: *mut f64,
) -> FhmmStatus {
    guard(|| {
        let p = &self::model(model)?.inner.params;
        let obs = observations(y, len, p.dim())?;
        let ll = exact_loglik(p, &obs)?;
        *out.as_mut().ok_or_else(|| null("out"))? = ll / len as f64;
        Ok(())
    })
}

/// Per-time, per-chain posterior probabilities of state 1 (`len × chains`).
/// Models with a recognition network use it; others run a mean-field E-step.
///
/// # Safety
/// `y` must hold `len * dim` doubles and `theta_out` `len * chains`.
#[no_mangle]
pub unsafe extern "C" fn fhmm_infer(
    model: *const FhmmModel,
    y: *const f64,
    len: usize,
    theta_out: *mut f64,
) -> FhmmStatus {
    guard(|| {
        let m = &self::model(model)?.inner;
        let obs = observations(y, len, m.params.dim())?;
        let marg = match &m.net {
            Some(net) => infer_svi(&m.params, net, &obs)?,
            None => infer_smf(&m.params, &obs)?,
        };
        slice_mut(theta_out, marg.theta.len(), "theta_out")?.copy_from_slice(&marg.theta);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn fhmm_train_options_default() -> FhmmTrainOptions {
    let d = TrainConfig::default();
    FhmmTrainOptions {
        chains: d.chains,
        dt: d.dt,
        n_minibatch: d.n_minibatch,
        iterations: d.iterations,
        learning_rate: d.learning_rate,
        hidden: d.hidden[0],
        seed: d.seed,
        budget_seconds: 0.0,
    }
}

fn budget(seconds: f64) -> Option<Duration> {
    (seconds > 0.0 && seconds.is_finite()).then(|| Duration::from_secs_f64(seconds))
}

/// Stochastic variational training with recognition networks.
///
/// # Safety
/// `y` must hold `len * dim` doubles; `options` must be valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fhmm_train_svi(
    y: *const f64,
    len: usize,
    dim: usize,
    options: *const FhmmTrainOptions,
    out: *mut *mut FhmmModel,
) -> FhmmStatus {
    guard(|| {
        let o = *options.as_ref().ok_or_else(|| null("options"))?;
        let obs = observations(y, len, dim)?;
        let cfg = TrainConfig {
            chains: o.chains,
            dt: o.dt,
            n_minibatch: o.n_minibatch,
            iterations: o.iterations,
            learning_rate: o.learning_rate,
            hidden: vec![o.hidden],
            seed: o.seed,
            log_every: o.iterations.max(1),
            budget: budget(o.budget_seconds),
            ..TrainConfig::default()
        };
        let res = train(&cfg, &obs, TrainInit::default())?;
        emit(
            out,
            ModelFile {
                params: res.params,
                net: Some(res.net),
                provenance: Provenance {
                    algorithm: "svi".into(),
                    seed: o.seed,
                    config_hash: config_hash(&format!("{o:?}")),
                    iterations: res.iterations,
                    standardization: None,
                },
            },
        )
    })
}

/// Structured mean-field EM from the same data-scaled start as the CLI.
///
/// # Safety
/// `y` must hold `len * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fhmm_train_smf(
    y: *const f64,
    len: usize,
    dim: usize,
    chains: usize,
    outer_iterations: usize,
    seed: u64,
    budget_seconds: f64,
    out: *mut *mut FhmmModel,
) -> FhmmStatus {
    guard(|| {
        let obs = observations(y, len, dim)?;
        let init = init_params(&obs, chains, derive_seed(seed, 1))?;
        let cfg = SmfConfig {
            outer_iterations,
            budget: budget(budget_seconds),
            ..SmfConfig::default()
        };
        let fit = smf_em_fit(&init, &obs, &cfg)?;
        emit(
            out,
            ModelFile {
                params: fit.params,
                net: None,
                provenance: Provenance {
                    algorithm: "smf".into(),
                    seed,
                    config_hash: config_hash(&format!("smf {chains} {outer_iterations}")),
                    iterations: fit.iterations,
                    standardization: None,
                },
            },
        )
    })
}
