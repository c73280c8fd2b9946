//! C ABI over the `vnfmig` library.
//!
//! Every function returns a [`VnfStatus`]. On failure a message is kept per
//! thread and can be read with [`vnf_last_error`]. Objects are passed as
//! opaque handles that the caller releases with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vnfmig::controller;
use vnfmig::econ::{EconomicParams, UserId};
use vnfmig::error::Error;
use vnfmig::mdn::{Component, FeatureWindow, MdnModel, MixtureParams};
use vnfmig::mobility::{predict_visit_probabilities, EcGeometry, UserContext};
use vnfmig::outage::{ChainSpec, ReliabilityChain};
use vnfmig::rng::{self, SimRng};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VnfStatus {
    Ok = 0,
    InvalidArgument = 1,
    Capacity = 2,
    Config = 3,
    Data = 4,
    Format = 5,
    Io = 6,
    NullPointer = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VnfStatus {
    match e {
        Error::InvalidArgument(_) => VnfStatus::InvalidArgument,
        Error::Capacity(_) => VnfStatus::Capacity,
        Error::Config(_) => VnfStatus::Config,
        Error::Data(_) => VnfStatus::Data,
        Error::Format(_) => VnfStatus::Format,
        Error::Io(_) => VnfStatus::Io,
    }
}

struct Fail(VnfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(VnfStatus::NullPointer, format!("{what} is null"))
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> VnfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VnfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            VnfStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vnf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VnfEconomics {
    pub loss_rate: f64,
    pub cost_nf: f64,
    pub cost_sp: f64,
    /// Interval length in steps; every horizon has this many entries.
    pub interval: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VnfDecision {
    pub migrate: bool,
    pub n_synced: usize,
    pub bound_migrate: f64,
    pub bound_stay: f64,
    pub achieved: f64,
}

/// Cost-loss-optimal decision for one interval.
///
/// `p_visit` holds `n_users * interval` values, one row per user.
/// `synced_out` receives `n_users` flags (1 = profile synced).
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vnf_decide(
    user_ids: *const u64,
    n_users: usize,
    p_outage: *const f64,
    p_visit: *const f64,
    params: *const VnfEconomics,
    out: *mut VnfDecision,
    synced_out: *mut u8,
) -> VnfStatus {
    guard(|| {
        let params = params.as_ref().ok_or_else(|| null("params"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let econ = EconomicParams::new(params.loss_rate, params.cost_nf, params.cost_sp, params.interval)?;
        let t = params.interval;
        let users = slice(user_ids, n_users, "user_ids")?;
        let p_o = slice(p_outage, t, "p_outage")?;
        let flat = slice(p_visit, n_users * t, "p_visit")?;
        let flags = slice_mut(synced_out, n_users, "synced_out")?;
        let p_v: Vec<Vec<f64>> = flat.chunks(t.max(1)).map(<[f64]>::to_vec).collect();
        let outcome = controller::decide(users, p_o, &p_v, &econ)?;
        for (f, u) in flags.iter_mut().zip(users) {
            *f = u8::from(outcome.decision.is_synced(*u as UserId));
        }
        *out = VnfDecision {
            migrate: outcome.decision.migrates(),
            n_synced: outcome.decision.sync_set().len(),
            bound_migrate: outcome.bound_migrate,
            bound_stay: outcome.bound_stay,
            achieved: outcome.achieved(),
        };
        Ok(())
    })
}

/// A reliability chain together with its private random stream.
pub struct VnfChain {
    chain: ReliabilityChain,
    rng: SimRng,
}

fn boxed_chain(chain: ReliabilityChain, seed: u64, out: *mut *mut VnfChain) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let handle = Box::new(VnfChain {
        chain,
        rng: rng::seeded(seed),
    });
    unsafe { *out = Box::into_raw(handle) };
    Ok(())
}

/// Chain from a row-major `n_states x n_states` matrix.
///
/// # Safety
/// `transitions` must hold `n_states^2` values, `outage_states` `n_outage`
/// indices, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vnf_chain_new(
    transitions: *const f64,
    n_states: usize,
    outage_states: *const usize,
    n_outage: usize,
    initial_state: usize,
    seed: u64,
    out: *mut *mut VnfChain,
) -> VnfStatus {
    guard(|| {
        let m = slice(transitions, n_states * n_states, "transitions")?;
        let outage = slice(outage_states, n_outage, "outage_states")?;
        let rows = m.chunks(n_states.max(1)).map(<[f64]>::to_vec).collect();
        let names = (0..n_states).map(|i| format!("s{i}")).collect();
        let chain = ReliabilityChain::new(names, rows, outage, initial_state)?;
        boxed_chain(chain, seed, out)
    })
}

/// The default normal/degraded/outage/repairing chain, starting in `normal`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vnf_chain_default(seed: u64, out: *mut *mut VnfChain) -> VnfStatus {
    guard(|| boxed_chain(ReliabilityChain::from_spec(&ChainSpec::default())?, seed, out))
}

/// # Safety
/// `chain` must be null or a handle from `vnf_chain_new`/`vnf_chain_default`
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vnf_chain_free(chain: *mut VnfChain) {
    if !chain.is_null() {
        drop(Box::from_raw(chain));
    }
}

/// Writes the outage probabilities of the next `horizon` steps.
///
/// # Safety
/// `chain` must be a live handle and `out` valid for `horizon` writes.
#[no_mangle]
pub unsafe extern "C" fn vnf_chain_outage_horizon(chain: *const VnfChain, horizon: usize, out: *mut f64) -> VnfStatus {
    guard(|| {
        let c = chain.as_ref().ok_or_else(|| null("chain"))?;
        let values = c.chain.outage_horizon(horizon)?;
        slice_mut(out, horizon, "out")?.copy_from_slice(&values);
        Ok(())
    })
}

/// # Safety
/// `chain` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vnf_chain_outage_probability(
    chain: *const VnfChain,
    from_state: usize,
    steps_ahead: usize,
    out: *mut f64,
) -> VnfStatus {
    guard(|| {
        let c = chain.as_ref().ok_or_else(|| null("chain"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = c.chain.outage_probability(from_state, steps_ahead)?;
        Ok(())
    })
}

/// Advances the chain one step; writes the new state and whether it is an outage state.
///
/// # Safety
/// `chain` must be a live handle; `state` and `in_outage` may be null.
#[no_mangle]
pub unsafe extern "C" fn vnf_chain_step(chain: *mut VnfChain, state: *mut usize, in_outage: *mut bool) -> VnfStatus {
    guard(|| {
        let c = chain.as_mut().ok_or_else(|| null("chain"))?;
        let s = c.chain.step(&mut c.rng);
        if let Some(p) = state.as_mut() {
            *p = s;
        }
        if let Some(p) = in_outage.as_mut() {
            *p = c.chain.in_outage();
        }
        Ok(())
    })
}

/// # Safety
/// `chain` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vnf_chain_set_state(chain: *mut VnfChain, state: usize) -> VnfStatus {
    guard(|| {
        let c = chain.as_mut().ok_or_else(|| null("chain"))?;
        c.chain.set_current_state(state)?;
        Ok(())
    })
}

/// Trained mixture density network.
pub struct VnfModel {
    model: MdnModel,
}

/// Loads a checkpoint written by `vnfmig train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vnf_model_load(path: *const c_char, out: *mut *mut VnfModel) -> VnfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(VnfStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = MdnModel::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(VnfModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle from `vnf_model_load`.
#[no_mangle]
pub unsafe extern "C" fn vnf_model_free(model: *mut VnfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of mixture components the model emits, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vnf_model_components(model: *const VnfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.components())
}

/// One bivariate Gaussian component, in meters per step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VnfComponent {
    pub weight: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub rho: f64,
}

impl From<&Component> for VnfComponent {
    fn from(c: &Component) -> Self {
        VnfComponent {
            weight: c.weight,
            mean_x: c.mean[0],
            mean_y: c.mean[1],
            std_x: c.std[0],
            std_y: c.std[1],
            rho: c.rho,
        }
    }
}

impl From<&VnfComponent> for Component {
    fn from(c: &VnfComponent) -> Self {
        Component {
            weight: c.weight,
            mean: [c.mean_x, c.mean_y],
            std: [c.std_x, c.std_y],
            rho: c.rho,
        }
    }
}

/// Next-step mixture for a window of 32 displacements (64 values, x/y interleaved).
///
/// # Safety
/// `window` must hold `window_len` values and `out` have room for `capacity` components.
#[no_mangle]
pub unsafe extern "C" fn vnf_model_forward(
    model: *const VnfModel,
    window: *const f64,
    window_len: usize,
    out: *mut VnfComponent,
    capacity: usize,
    n_written: *mut usize,
) -> VnfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let w = FeatureWindow::new(slice(window, window_len, "window")?.to_vec())?;
        let mix = m.model.forward(&w)?;
        if capacity < mix.len() {
            return Err(Fail(
                VnfStatus::Capacity,
                format!("{} components do not fit in {capacity}", mix.len()),
            ));
        }
        let out = slice_mut(out, mix.len(), "out")?;
        for (o, c) in out.iter_mut().zip(&mix.components) {
            *o = c.into();
        }
        if let Some(n) = n_written.as_mut() {
            *n = mix.len();
        }
        Ok(())
    })
}

/// Mixture density at `(x, y)`.
///
/// # Safety
/// `components` must hold `n` entries and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn vnf_mixture_density(
    components: *const VnfComponent,
    n: usize,
    x: f64,
    y: f64,
    out: *mut f64,
) -> VnfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let comps = slice(components, n, "components")?.iter().map(Component::from).collect();
        *out = MixtureParams::new(comps)?.density([x, y]);
        Ok(())
    })
}

/// Monte-Carlo probability of being inside the disc at each of the next
/// `horizon` steps. `positions` holds `n_positions >= 33` (x, y) pairs,
/// oldest first.
///
/// # Safety
/// `positions` must hold `2 * n_positions` values and `out` `horizon` slots.
#[no_mangle]
pub unsafe extern "C" fn vnf_predict_visit(
    model: *const VnfModel,
    positions: *const f64,
    n_positions: usize,
    center_x: f64,
    center_y: f64,
    radius: f64,
    horizon: usize,
    n_rollouts: usize,
    seed: u64,
    out: *mut f64,
) -> VnfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let flat = slice(positions, 2 * n_positions, "positions")?;
        let ctx = UserContext::new(0, flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect())?;
        let ec = EcGeometry::new([center_x, center_y], radius)?;
        let probs = predict_visit_probabilities(&m.model, &ctx, &ec, horizon, n_rollouts, seed)?;
        slice_mut(out, horizon, "out")?.copy_from_slice(&probs);
        Ok(())
    })
}
