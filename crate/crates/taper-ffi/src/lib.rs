//! C ABI surface for the simulator: opaque trace handles, workload
//! characterization, and full simulation runs returning a JSON summary.
//!
//! Conventions: every fallible call returns a `TaperStatus`; on failure a
//! thread-local message is readable through `taper_last_error`. Strings
//! returned by this library must be released with `taper_string_free`,
//! traces with `taper_trace_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;

use taper_sim::costmodel::{GroundTruthModel, LinearLatencyModel};
use taper_sim::engine::{run_simulation, AblationConfig, EngineConfig};
use taper_sim::metrics::summarize_run;
use taper_sim::policy::{PolicyKind, UtilityCurve};
use taper_sim::workload::{characterize, generate_trace, parse_trace, RegimeSpec, Trace};

/// Result codes for every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaperStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidArgument = 4,
    IoError = 5,
    SimulationError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let msg = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

/// Opaque trace handle.
pub struct TaperTrace {
    inner: Trace,
}

/// Workload statistics, mirrored as a plain C struct.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TaperWorkloadStats {
    pub pdr: f64,
    pub pts: f64,
    pub abf: f64,
}

/// Simulation parameters. `policy` is one of "off", "cap2", "cap5",
/// "eager", "taper"; `rho` is ignored unless the policy is "taper".
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TaperSimParams {
    pub slo_tpot_ms: f64,
    pub rho: f64,
    pub seed: u64,
    pub kv_capacity_blocks: u64,
    pub kv_block_size: u32,
    /// Ground-truth latency coefficients and noise.
    pub gt_a: f64,
    pub gt_b: f64,
    pub gt_c: f64,
    pub gt_noise_sigma: f64,
}

impl TaperSimParams {
    fn defaults() -> TaperSimParams {
        let e = EngineConfig::default();
        TaperSimParams {
            slo_tpot_ms: e.slo_tpot_ms,
            rho: 0.8,
            seed: 0,
            kv_capacity_blocks: e.kv_capacity_blocks,
            kv_block_size: e.kv_block_size,
            gt_a: 6.0,
            gt_b: 0.024,
            gt_c: 0.0013,
            gt_noise_sigma: 0.02,
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, TaperStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(TaperStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|e| {
        set_error(format!("invalid utf-8: {e}"));
        TaperStatus::InvalidUtf8
    })
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn taper_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default-initialize a parameter block.
#[no_mangle]
pub unsafe extern "C" fn taper_sim_params_init(params: *mut TaperSimParams) -> TaperStatus {
    if params.is_null() {
        set_error("null params");
        return TaperStatus::NullArgument;
    }
    *params = TaperSimParams::defaults();
    TaperStatus::Ok
}

/// Parse a JSONL trace file into a new handle.
#[no_mangle]
pub unsafe extern "C" fn taper_trace_parse(
    path: *const c_char,
    out: *mut *mut TaperTrace,
) -> TaperStatus {
    let path = match cstr(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    if out.is_null() {
        set_error("null output pointer");
        return TaperStatus::NullArgument;
    }
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) => {
            set_error(format!("opening {path}: {e}"));
            return TaperStatus::IoError;
        }
    };
    match parse_trace(BufReader::new(file)) {
        Ok(trace) => {
            *out = Box::into_raw(Box::new(TaperTrace { inner: trace }));
            TaperStatus::Ok
        }
        Err(e) => {
            set_error(e);
            TaperStatus::ParseError
        }
    }
}

/// Generate a synthetic trace from a regime spec given as JSON text.
#[no_mangle]
pub unsafe extern "C" fn taper_trace_generate(
    regime_json: *const c_char,
    seed: u64,
    out: *mut *mut TaperTrace,
) -> TaperStatus {
    let text = match cstr(regime_json) {
        Ok(t) => t,
        Err(s) => return s,
    };
    if out.is_null() {
        set_error("null output pointer");
        return TaperStatus::NullArgument;
    }
    let spec: RegimeSpec = match serde_json::from_str(text) {
        Ok(s) => s,
        Err(e) => {
            set_error(format!("regime spec: {e}"));
            return TaperStatus::ParseError;
        }
    };
    match generate_trace(&spec, seed) {
        Ok(trace) => {
            *out = Box::into_raw(Box::new(TaperTrace { inner: trace }));
            TaperStatus::Ok
        }
        Err(e) => {
            set_error(e);
            TaperStatus::InvalidArgument
        }
    }
}

/// Number of requests in the trace.
#[no_mangle]
pub unsafe extern "C" fn taper_trace_len(trace: *const TaperTrace) -> usize {
    if trace.is_null() {
        return 0;
    }
    (*trace).inner.len()
}

#[no_mangle]
pub unsafe extern "C" fn taper_trace_free(trace: *mut TaperTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// PDR / PTS / ABF of a trace.
#[no_mangle]
pub unsafe extern "C" fn taper_characterize(
    trace: *const TaperTrace,
    out: *mut TaperWorkloadStats,
) -> TaperStatus {
    if trace.is_null() || out.is_null() {
        set_error("null argument");
        return TaperStatus::NullArgument;
    }
    match characterize(&(*trace).inner) {
        Ok(stats) => {
            *out = TaperWorkloadStats { pdr: stats.pdr, pts: stats.pts, abf: stats.abf };
            TaperStatus::Ok
        }
        Err(e) => {
            set_error(e);
            TaperStatus::InvalidArgument
        }
    }
}

/// Run one simulation and return the run summary as a JSON string. The
/// caller owns the string and must release it with `taper_string_free`.
#[no_mangle]
pub unsafe extern "C" fn taper_simulate(
    trace: *const TaperTrace,
    policy: *const c_char,
    params: *const TaperSimParams,
    out_summary_json: *mut *mut c_char,
) -> TaperStatus {
    if trace.is_null() || params.is_null() || out_summary_json.is_null() {
        set_error("null argument");
        return TaperStatus::NullArgument;
    }
    let policy_name = match cstr(policy) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let p = *params;
    let policy = match policy_name {
        "off" => PolicyKind::Off,
        "cap2" => PolicyKind::Cap { k: 2 },
        "cap5" => PolicyKind::Cap { k: 5 },
        "eager" => PolicyKind::Eager,
        "taper" => {
            if !(p.rho > 0.0 && p.rho <= 1.0) {
                set_error(format!("rho must be in (0, 1], got {}", p.rho));
                return TaperStatus::InvalidArgument;
            }
            PolicyKind::Taper { rho: p.rho, utility: UtilityCurve::Linear }
        }
        other => {
            set_error(format!("unknown policy {other:?}"));
            return TaperStatus::InvalidArgument;
        }
    };
    if p.gt_b <= 0.0 || p.gt_c <= 0.0 || p.gt_a < 0.0 || p.gt_noise_sigma < 0.0 {
        set_error("latency coefficients must satisfy a >= 0, b > 0, c > 0, sigma >= 0");
        return TaperStatus::InvalidArgument;
    }
    let gt = GroundTruthModel {
        base: LinearLatencyModel::new(p.gt_a, p.gt_b, p.gt_c),
        noise_sigma: p.gt_noise_sigma,
        seed: p.seed,
    };
    let cfg = EngineConfig {
        slo_tpot_ms: p.slo_tpot_ms,
        kv_capacity_blocks: p.kv_capacity_blocks,
        kv_block_size: p.kv_block_size,
        ..EngineConfig::default()
    };
    let log = run_simulation(
        &(*trace).inner,
        &policy,
        &gt,
        gt.base,
        &cfg,
        &AblationConfig::default(),
    );
    let summary = summarize_run(&log);
    let json = match serde_json::to_string(&summary) {
        Ok(j) => j,
        Err(e) => {
            set_error(e);
            return TaperStatus::SimulationError;
        }
    };
    match CString::new(json) {
        Ok(c) => {
            *out_summary_json = c.into_raw();
            TaperStatus::Ok
        }
        Err(e) => {
            set_error(e);
            TaperStatus::SimulationError
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn taper_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
