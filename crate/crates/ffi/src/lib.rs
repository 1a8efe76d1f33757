//! C interface to the rydberggpt library.
//!
//! Every fallible function returns an [`RgptStatus`]. On failure the message is
//! kept per thread and read back with [`rgpt_last_error_message`]. Models are
//! opaque handles owned by the caller and released with [`rgpt_model_free`].
//!
//! Configurations cross the boundary as `0`/`1` bytes, `N = L*L` per record,
//! sites in snake order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rydberggpt::checkpoint;
use rydberggpt::exact::{build_hamiltonian, exact_observables, ground_state, thermal_diagonal};
use rydberggpt::lattice::square_graph;
use rydberggpt::model::{init_params, Model, ModelConfig};
use rydberggpt::sampling::{sample, sample_cached};
use rydberggpt::{Error, ExperimentalSettings, InteractionGraph, SpinConfiguration};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgptStatus {
    Ok = 0,
    InvalidArgument = 1,
    ResourceLimit = 2,
    Io = 3,
    Parse = 4,
    ArtifactMismatch = 5,
    NumericalFailure = 6,
    InvalidState = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Opaque model handle.
pub struct RgptModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RgptStatus {
    match e {
        Error::InvalidArgument(_) => RgptStatus::InvalidArgument,
        Error::ResourceLimit(_) => RgptStatus::ResourceLimit,
        Error::NumericalFailure(_) => RgptStatus::NumericalFailure,
        Error::State(_) => RgptStatus::InvalidState,
        Error::ArtifactMismatch(_) => RgptStatus::ArtifactMismatch,
        Error::Io { .. } => RgptStatus::Io,
        Error::Parse { .. } => RgptStatus::Parse,
    }
}

fn guard(f: impl FnOnce() -> rydberggpt::Result<()>) -> RgptStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RgptStatus::Ok,
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            RgptStatus::Internal
        }
    }
}

fn null(what: &str) -> Error {
    Error::invalid(format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const RgptModel) -> rydberggpt::Result<&'a Model> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

fn system(l: usize, delta: f64, rb: f64, beta: f64) -> rydberggpt::Result<(ExperimentalSettings, InteractionGraph)> {
    let s = ExperimentalSettings::new(delta, rb, beta)?;
    let g = square_graph(l, &s)?;
    Ok((s, g))
}

fn buffer_len(count: usize, n: usize) -> rydberggpt::Result<usize> {
    count
        .checked_mul(n)
        .ok_or_else(|| Error::ResourceLimit(format!("{count} records of {n} sites overflow the address space")))
}

unsafe fn store_handle(out: *mut *mut RgptModel, model: Model) -> rydberggpt::Result<()> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(RgptModel { model }));
    Ok(())
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rgpt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_model_load(path: *const c_char, out: *mut *mut RgptModel) -> RgptStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::invalid("path is not valid UTF-8"))?;
        let model = Model::new(checkpoint::read(Path::new(p))?)?;
        store_handle(out, model)
    })
}

/// Creates a freshly initialized model with the default architecture.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rgpt_model_init(seed: u64, out: *mut *mut RgptModel) -> RgptStatus {
    guard(|| store_handle(out, Model::new(init_params(&ModelConfig::default(), seed)?)?))
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library and `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rgpt_model_save(model: *const RgptModel, path: *const c_char) -> RgptStatus {
    guard(|| {
        let m = model_ref(model)?;
        if path.is_null() {
            return Err(null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::invalid("path is not valid UTF-8"))?;
        checkpoint::write(m.checkpoint(), Path::new(p))
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rgpt_model_free(model: *mut RgptModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn rgpt_model_parameter_count(model: *const RgptModel) -> usize {
    model.as_ref().map_or(0, |h| h.model.checkpoint().parameter_count())
}

/// Log-probabilities of `count` configurations on an `l`×`l` array.
///
/// # Safety
/// `configs` must hold `count*l*l` bytes and `out` room for `count` doubles.
#[no_mangle]
pub unsafe extern "C" fn rgpt_model_log_probs(
    model: *const RgptModel,
    l: usize,
    delta_over_omega: f64,
    rb_over_a: f64,
    beta_omega: f64,
    configs: *const u8,
    count: usize,
    out: *mut f64,
) -> RgptStatus {
    guard(|| {
        let m = model_ref(model)?;
        if count == 0 {
            return Ok(());
        }
        if configs.is_null() || out.is_null() {
            return Err(null("configs or out"));
        }
        let (_, g) = system(l, delta_over_omega, rb_over_a, beta_omega)?;
        let n = g.num_nodes();
        let bytes = std::slice::from_raw_parts(configs, buffer_len(count, n)?);
        let records = bytes
            .chunks(n)
            .map(|c| SpinConfiguration::new(c.to_vec()))
            .collect::<rydberggpt::Result<Vec<_>>>()?;
        let lp = m.log_probs(&m.context(&g)?, &records)?;
        std::slice::from_raw_parts_mut(out, count).copy_from_slice(&lp);
        Ok(())
    })
}

/// Draws `count` configurations; writes `count*l*l` bytes to `out`.
/// `cached` selects the incremental sampler; both give identical output.
///
/// # Safety
/// `out` must have room for `count*l*l` bytes.
#[no_mangle]
pub unsafe extern "C" fn rgpt_model_sample(
    model: *const RgptModel,
    l: usize,
    delta_over_omega: f64,
    rb_over_a: f64,
    beta_omega: f64,
    count: usize,
    seed: u64,
    cached: bool,
    out: *mut u8,
) -> RgptStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (_, g) = system(l, delta_over_omega, rb_over_a, beta_omega)?;
        let n = g.num_nodes();
        let records = if cached {
            sample_cached(m, &g, count, seed)?
        } else {
            sample(m, &g, count, seed)?
        };
        let dst = std::slice::from_raw_parts_mut(out, buffer_len(count, n)?);
        for (chunk, r) in dst.chunks_mut(n).zip(&records) {
            chunk.copy_from_slice(r.bits());
        }
        Ok(())
    })
}

/// Exact observables of the ground state (`thermal == false`) or the thermal
/// state at `beta_omega`. Writes energy, `<σx>` and staggered magnetization to
/// `out[0..3]`.
///
/// # Safety
/// `out` must have room for 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn rgpt_exact_observables(
    l: usize,
    delta_over_omega: f64,
    rb_over_a: f64,
    beta_omega: f64,
    thermal: bool,
    out: *mut f64,
) -> RgptStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (s, g) = system(l, delta_over_omega, rb_over_a, beta_omega)?;
        let h = build_hamiltonian(&g, &s)?;
        let state = if thermal {
            thermal_diagonal(&h, s.beta_omega)?
        } else {
            ground_state(&h)?
        };
        let o = exact_observables(&state, &h)?;
        std::slice::from_raw_parts_mut(out, 3).copy_from_slice(&[o.energy, o.sigma_x, o.staggered]);
        Ok(())
    })
}
