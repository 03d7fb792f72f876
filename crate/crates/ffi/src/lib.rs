//! C ABI over the transactive simulator.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a [`TxStatus`];
//! on failure [`tx_last_error`] describes the most recent error on the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use transactive::cli;
use transactive::consensus::{ConsensusError, RunOutcome};
use transactive::data::scenario::{Overrides, ScenarioBundle, ScenarioConfig};
use transactive::data::{self, DataError, TopologyConfig};
use transactive::localopt::LocalOptError;
use transactive::topology;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Scenario, profile or parameter error.
    Config = 3,
    /// Some agent has no feasible schedule.
    Infeasible = 4,
    /// Consensus stopped at the round limit; results are still available.
    NotConverged = 5,
    /// The QP solver failed to reach its tolerance.
    Solver = 6,
    /// File could not be read or written.
    Io = 7,
    /// Agent or slot index out of range.
    OutOfRange = 8,
    /// Internal panic; the handle arguments are left untouched.
    Panic = 9,
}

/// Resolved scenario: agents, topology and run settings.
pub struct TxScenario {
    bundle: ScenarioBundle,
}

/// Schedules and costs of one standalone or coordinated run.
pub struct TxResult {
    costs: Vec<f64>,
    trades: Vec<Vec<f64>>,
    grid: Vec<Vec<f64>>,
    prices: Vec<f64>,
    converged: bool,
    rounds: usize,
    clearing_residual: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: TxStatus, message: impl ToString) -> TxStatus {
    set_error(message.to_string());
    status
}

fn guard(f: impl FnOnce() -> TxStatus) -> TxStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(TxStatus::Panic, "internal panic"),
    }
}

fn data_status(e: &DataError) -> TxStatus {
    match e {
        DataError::Io { .. } => TxStatus::Io,
        _ => TxStatus::Config,
    }
}

fn agent_status(e: &LocalOptError) -> TxStatus {
    match e {
        LocalOptError::Infeasible { .. } => TxStatus::Infeasible,
        LocalOptError::Model(_) | LocalOptError::Input(_) => TxStatus::Config,
        LocalOptError::Qp(_) | LocalOptError::NotConverged { .. } => TxStatus::Solver,
    }
}

fn consensus_status(e: &ConsensusError) -> TxStatus {
    match e {
        ConsensusError::Agent(a) => agent_status(a),
        ConsensusError::Input(_) | ConsensusError::Topology(_) => TxStatus::Config,
        ConsensusError::ThreadPool(_) => TxStatus::Solver,
    }
}

/// # Safety
/// `s` is null or a valid NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, TxStatus> {
    if s.is_null() {
        return Err(fail(TxStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(TxStatus::InvalidUtf8, "string argument is not UTF-8"))
}

fn deliver<T>(out: *mut *mut T, value: T) -> TxStatus {
    // SAFETY: callers check `out` for null before building the value.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    TxStatus::Ok
}

/// Loads a scenario file; relative profile paths resolve against its directory.
///
/// # Safety
/// `path` is a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tx_scenario_load(path: *const c_char, out: *mut *mut TxScenario) -> TxStatus {
    guard(|| {
        if out.is_null() {
            return fail(TxStatus::NullArgument, "null output pointer");
        }
        let path = match read_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match data::load_scenario(Path::new(path), &Overrides::default()) {
            Ok(bundle) => deliver(out, TxScenario { bundle }),
            Err(e) => fail(data_status(&e), e),
        }
    })
}

/// Parses a scenario from TOML text. `base_dir` may be null.
///
/// # Safety
/// `toml` is a NUL-terminated string, `base_dir` null or NUL-terminated,
/// and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tx_scenario_from_toml(
    toml: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut TxScenario,
) -> TxStatus {
    guard(|| {
        if out.is_null() {
            return fail(TxStatus::NullArgument, "null output pointer");
        }
        let text = match read_str(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let base = if base_dir.is_null() {
            "."
        } else {
            match read_str(base_dir) {
                Ok(b) => b,
                Err(s) => return s,
            }
        };
        let bundle = ScenarioConfig::from_toml(text).and_then(|c| c.resolve(Path::new(base)));
        match bundle {
            Ok(bundle) => deliver(out, TxScenario { bundle }),
            Err(e) => fail(data_status(&e), e),
        }
    })
}

/// # Safety
/// `scenario` is null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tx_scenario_free(scenario: *mut TxScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Number of agents, or 0 for a null handle.
///
/// # Safety
/// `scenario` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tx_scenario_agents(scenario: *const TxScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.bundle.specs.len())
}

/// Number of slots, or 0 for a null handle.
///
/// # Safety
/// `scenario` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tx_scenario_slots(scenario: *const TxScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.bundle.specs.first().map_or(0, |a| a.horizon()))
}

/// Replaces the learning rate of later coordinated runs.
///
/// # Safety
/// `scenario` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tx_scenario_set_epsilon(scenario: *mut TxScenario, epsilon: f64) -> TxStatus {
    guard(|| {
        let Some(s) = scenario.as_mut() else {
            return fail(TxStatus::NullArgument, "null scenario");
        };
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return fail(TxStatus::Config, format!("epsilon must be positive, got {epsilon}"));
        }
        s.bundle.consensus.epsilon = epsilon;
        TxStatus::Ok
    })
}

/// Replaces the round limit of later coordinated runs.
///
/// # Safety
/// `scenario` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tx_scenario_set_max_rounds(scenario: *mut TxScenario, max_rounds: usize) -> TxStatus {
    guard(|| {
        let Some(s) = scenario.as_mut() else {
            return fail(TxStatus::NullArgument, "null scenario");
        };
        if max_rounds == 0 {
            return fail(TxStatus::Config, "max_rounds must be at least 1");
        }
        s.bundle.consensus.max_rounds = max_rounds;
        TxStatus::Ok
    })
}

fn from_outcome(o: &RunOutcome) -> TxResult {
    TxResult {
        costs: o.costs.clone(),
        trades: o.schedules.iter().map(|s| s.p_et.clone()).collect(),
        grid: o.schedules.iter().map(|s| s.p_g.clone()).collect(),
        prices: o.mean_lambda(),
        converged: o.converged(),
        rounds: o.trace.rounds_used,
        clearing_residual: o.clearing_residual(),
    }
}

/// Solves every agent without trading.
///
/// # Safety
/// `scenario` is a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tx_run_standalone(scenario: *const TxScenario, out: *mut *mut TxResult) -> TxStatus {
    guard(|| {
        let Some(s) = scenario.as_ref() else {
            return fail(TxStatus::NullArgument, "null scenario");
        };
        if out.is_null() {
            return fail(TxStatus::NullArgument, "null output pointer");
        }
        match cli::standalone(&s.bundle) {
            Ok((costs, schedules)) => {
                let h = schedules.first().map_or(0, |s| s.horizon());
                let result = TxResult {
                    costs,
                    trades: vec![vec![0.0; h]; schedules.len()],
                    grid: schedules.iter().map(|s| s.p_g.clone()).collect(),
                    prices: Vec::new(),
                    converged: true,
                    rounds: 0,
                    clearing_residual: 0.0,
                };
                deliver(out, result)
            }
            Err(e) => fail(agent_status(&e), e),
        }
    })
}

/// Runs the consensus market. When the round limit is hit the result is
/// still written to `out` and must be freed.
///
/// # Safety
/// `scenario` is a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tx_run_coordinated(scenario: *const TxScenario, out: *mut *mut TxResult) -> TxStatus {
    guard(|| {
        let Some(s) = scenario.as_ref() else {
            return fail(TxStatus::NullArgument, "null scenario");
        };
        if out.is_null() {
            return fail(TxStatus::NullArgument, "null output pointer");
        }
        match cli::coordinated(&s.bundle) {
            Ok(outcome) => {
                let converged = outcome.converged();
                deliver(out, from_outcome(&outcome));
                if converged {
                    TxStatus::Ok
                } else {
                    fail(TxStatus::NotConverged, format!("no convergence within {} rounds", outcome.trace.rounds_used))
                }
            }
            Err(e) => fail(consensus_status(&e), e),
        }
    })
}

/// # Safety
/// `result` is null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tx_result_free(result: *mut TxResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// 1 if the run converged (always for standalone runs), 0 otherwise or for null.
///
/// # Safety
/// `result` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tx_result_converged(result: *const TxResult) -> i32 {
    result.as_ref().map_or(0, |r| r.converged as i32)
}

/// Consensus rounds used; 0 for standalone runs or null.
///
/// # Safety
/// `result` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tx_result_rounds(result: *const TxResult) -> usize {
    result.as_ref().map_or(0, |r| r.rounds)
}

/// Largest final pool imbalance over slots, kW; NaN for null.
///
/// # Safety
/// `result` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tx_result_clearing_residual(result: *const TxResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.clearing_residual)
}

unsafe fn read_value(
    result: *const TxResult,
    value: *mut f64,
    pick: impl FnOnce(&TxResult) -> Option<f64>,
) -> TxStatus {
    guard(|| {
        let Some(r) = result.as_ref() else {
            return fail(TxStatus::NullArgument, "null result");
        };
        if value.is_null() {
            return fail(TxStatus::NullArgument, "null output pointer");
        }
        match pick(r) {
            Some(v) => {
                *value = v;
                TxStatus::Ok
            }
            None => fail(TxStatus::OutOfRange, "index out of range"),
        }
    })
}

/// Cost of agent `agent` (by position), $.
///
/// # Safety
/// `result` is a live handle and `value` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tx_result_cost(result: *const TxResult, agent: usize, value: *mut f64) -> TxStatus {
    read_value(result, value, |r| r.costs.get(agent).copied())
}

/// Trade of agent `agent` in slot `slot`, kW (negative when selling).
///
/// # Safety
/// `result` is a live handle and `value` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tx_result_trade(result: *const TxResult, agent: usize, slot: usize, value: *mut f64) -> TxStatus {
    read_value(result, value, |r| r.trades.get(agent).and_then(|t| t.get(slot)).copied())
}

/// Grid draw of agent `agent` in slot `slot`, kW.
///
/// # Safety
/// `result` is a live handle and `value` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tx_result_grid(result: *const TxResult, agent: usize, slot: usize, value: *mut f64) -> TxStatus {
    read_value(result, value, |r| r.grid.get(agent).and_then(|t| t.get(slot)).copied())
}

/// Agent-averaged final price of slot `slot`, $/kWh. Standalone results have none.
///
/// # Safety
/// `result` is a live handle and `value` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tx_result_price(result: *const TxResult, slot: usize, value: *mut f64) -> TxStatus {
    read_value(result, value, |r| r.prices.get(slot).copied())
}

/// Spectral gap of the Metropolis weights of `kind` ("complete", "star:0", "ring:2", ...).
///
/// # Safety
/// `kind` is a NUL-terminated string and `gap` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tx_spectral_gap(kind: *const c_char, agents: usize, gap: *mut f64) -> TxStatus {
    guard(|| {
        if gap.is_null() {
            return fail(TxStatus::NullArgument, "null output pointer");
        }
        let kind = match read_str(kind) {
            Ok(k) => k,
            Err(s) => return s,
        };
        let config: TopologyConfig = match kind.parse() {
            Ok(c) => c,
            Err(e) => return fail(TxStatus::Config, e),
        };
        match config.build(agents) {
            Ok((_, w)) => {
                *gap = topology::spectral_gap(&w);
                TxStatus::Ok
            }
            Err(e) => fail(TxStatus::Config, e),
        }
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn tx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
