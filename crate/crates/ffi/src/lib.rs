//! C ABI over the `dpsgd-lab` library.
//!
//! Every fallible function returns a [`DlStatus`]; on failure the message is
//! kept per thread and read back with [`dl_last_error_message`]. Objects are
//! opaque handles created by a `*_new` function and released by the matching
//! `*_free`. Panics never cross the boundary; they surface as
//! [`DlStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dpsgd_lab::accountant::{epsilon_for, PrivacyLedger};
use dpsgd_lab::exp::{self, ExperimentConfig};
use dpsgd_lab::nn::{build_model, clip_factor, ActivationKind, Arch, Model, ModelOptions};
use dpsgd_lab::{Error, Rng, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    State = 5,
    Runtime = 6,
    Format = 7,
    Io = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlArch {
    MnistCnn = 0,
    Cifar10Cnn = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlActivation {
    Relu = 0,
    BoundedRelu = 1,
    Tanh = 2,
}

/// Ordered record of subsampled Gaussian phases.
pub struct DlLedger(PrivacyLedger);

/// Seeded deterministic random stream.
pub struct DlRng(Rng);

/// A built network with its parameters.
pub struct DlModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DlStatus {
    match e {
        Error::Dimension(_) => DlStatus::Dimension,
        Error::Argument(_) => DlStatus::InvalidArgument,
        Error::Config(_) => DlStatus::Config,
        Error::State(_) => DlStatus::State,
        Error::Runtime(_) => DlStatus::Runtime,
        Error::Format { .. } => DlStatus::Format,
        Error::Io { .. } => DlStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Run `f`, translating errors and panics into a status plus stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DlStatus::Ok
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer passed as `{name}`"));
            DlStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            DlStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DlStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn c_str<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("`{name}` is not valid UTF-8")))
}

/// Copy the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator. Passing a null `buf`
/// only queries the length.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Per-sample clipping scale `min(1, c / norm)`.
#[no_mangle]
pub extern "C" fn dl_clip_factor(norm: f64, c: f64) -> f64 {
    clip_factor(norm, c)
}

/// Epsilon of one phase of `steps` subsampled Gaussian steps, and the RDP
/// order that attains it.
///
/// # Safety
/// `epsilon` and `order` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dl_epsilon_for(
    q: f64,
    sigma: f64,
    steps: u64,
    delta: f64,
    epsilon: *mut f64,
    order: *mut f64,
) -> DlStatus {
    guard(|| {
        let eps_out = deref_mut(epsilon, "epsilon")?;
        let ord_out = deref_mut(order, "order")?;
        let (e, o) = epsilon_for(q, sigma, steps, delta)?;
        *eps_out = e;
        *ord_out = o;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for writes. The handle is released with
/// [`dl_ledger_free`].
#[no_mangle]
pub unsafe extern "C" fn dl_ledger_new(delta: f64, out: *mut *mut DlLedger) -> DlStatus {
    guard(|| {
        let slot = deref_mut(out, "out")?;
        *slot = Box::into_raw(Box::new(DlLedger(PrivacyLedger::new(delta)?)));
        Ok(())
    })
}

/// # Safety
/// `ledger` must be null or a handle from [`dl_ledger_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dl_ledger_free(ledger: *mut DlLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}

/// # Safety
/// `ledger` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_ledger_push_phase(ledger: *mut DlLedger, q: f64, sigma: f64, steps: u64) -> DlStatus {
    guard(|| {
        deref_mut(ledger, "ledger")?.0.push_phase(q, sigma, steps)?;
        Ok(())
    })
}

/// # Safety
/// `ledger` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_ledger_phase_count(ledger: *const DlLedger) -> usize {
    ledger.as_ref().map_or(0, |l| l.0.phases().len())
}

/// Epsilon spent so far at the ledger's delta.
///
/// # Safety
/// `ledger` must be a live handle; `epsilon` and `order` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dl_ledger_epsilon(ledger: *const DlLedger, epsilon: *mut f64, order: *mut f64) -> DlStatus {
    guard(|| {
        let l = deref(ledger, "ledger")?;
        let eps_out = deref_mut(epsilon, "epsilon")?;
        let ord_out = deref_mut(order, "order")?;
        let (e, o) = l.0.epsilon()?;
        *eps_out = e;
        *ord_out = o;
        Ok(())
    })
}

/// The handle is released with [`dl_rng_free`].
#[no_mangle]
pub extern "C" fn dl_rng_new(seed: u64) -> *mut DlRng {
    Box::into_raw(Box::new(DlRng(Rng::new(seed))))
}

/// # Safety
/// `rng` must be null or a handle from [`dl_rng_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dl_rng_free(rng: *mut DlRng) {
    if !rng.is_null() {
        drop(Box::from_raw(rng));
    }
}

/// Uniform draw in `[0, 1)`; NaN for a null handle.
///
/// # Safety
/// `rng` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_rng_next_f64(rng: *mut DlRng) -> f64 {
    rng.as_mut().map_or(f64::NAN, |r| r.0.next_f64())
}

/// Standard normal draw; NaN for a null handle.
///
/// # Safety
/// `rng` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_rng_standard_normal(rng: *mut DlRng) -> f64 {
    rng.as_mut().map_or(f64::NAN, |r| r.0.standard_normal())
}

/// Build a freshly initialized model. `bound` is read only for
/// [`DlActivation::BoundedRelu`].
///
/// # Safety
/// `out` must be valid for writes. The handle is released with
/// [`dl_model_free`].
#[no_mangle]
pub unsafe extern "C" fn dl_model_new(
    arch: DlArch,
    activation: DlActivation,
    bound: f64,
    seed: u64,
    out: *mut *mut DlModel,
) -> DlStatus {
    guard(|| {
        let slot = deref_mut(out, "out")?;
        let arch = match arch {
            DlArch::MnistCnn => Arch::MnistCnn,
            DlArch::Cifar10Cnn => Arch::Cifar10Cnn,
        };
        let (kind, bound) = match activation {
            DlActivation::Relu => (ActivationKind::Relu, None),
            DlActivation::BoundedRelu => (ActivationKind::BoundedRelu, Some(bound)),
            DlActivation::Tanh => (ActivationKind::Tanh, None),
        };
        let model = build_model(arch, &ModelOptions::new(kind, bound), &mut Rng::new(seed))?;
        *slot = Box::into_raw(Box::new(DlModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`dl_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dl_model_free(model: *mut DlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_model_num_params(model: *const DlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_params())
}

/// Values per input sample (`C * H * W`); 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_model_input_len(model: *const DlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_shape().iter().product())
}

/// Number of output classes; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dl_model_num_classes(model: *const DlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_classes())
}

/// Class probabilities for `n` samples laid out row-major in `input`
/// (`n * dl_model_input_len` values). Writes `n * dl_model_num_classes`
/// values to `probs`.
///
/// # Safety
/// `input` must be valid for `n * input_len` reads and `probs` for
/// `n * num_classes` writes.
#[no_mangle]
pub unsafe extern "C" fn dl_model_predict(model: *const DlModel, input: *const f64, n: usize, probs: *mut f64) -> DlStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        if n == 0 {
            return Ok(());
        }
        if input.is_null() {
            return Err(Failure::Null("input"));
        }
        if probs.is_null() {
            return Err(Failure::Null("probs"));
        }
        let [c, h, w] = m.input_shape();
        let x = std::slice::from_raw_parts(input, n * c * h * w).to_vec();
        let p = m.predict(&Tensor::new(vec![n, c, h, w], x)?)?;
        ptr::copy_nonoverlapping(p.data().as_ptr(), probs, p.len());
        Ok(())
    })
}

/// Execute one experiment described by TOML text, the same format the
/// `dpsgd-lab run` command reads. `data_dir` is used unless the config
/// names its own.
///
/// # Safety
/// Both arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dl_run_config(config_toml: *const c_char, data_dir: *const c_char) -> DlStatus {
    guard(|| {
        let text = c_str(config_toml, "config_toml")?;
        let dir = c_str(data_dir, "data_dir")?;
        let cfg = ExperimentConfig::from_toml_str(text)?;
        exp::run(&cfg, Path::new(dir))?;
        Ok(())
    })
}
