//! C ABI for `causalid`.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `cid_*_free`. Every function returns a [`CidStatus`]; on
//! failure `cid_last_error_message` describes the error for the calling
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use causalid::causal::{identify_structure, CausalGraph, Identification};
use causalid::cli::verify_graph;
use causalid::kernels::{mmd2_unbiased, KernelConfig, SampleSet};
use causalid::scenario::{Scenario, ScenarioConfig};
use causalid::sysid::Source;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CidStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    /// Malformed or inconsistent scenario / graph.
    Validation = 4,
    /// The identification pipeline failed.
    Runtime = 5,
    Panic = 6,
}

/// A validated scenario.
pub struct CidScenario {
    inner: Scenario,
}

/// Result of `cid_identify`.
pub struct CidReport {
    inner: Identification,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(CidStatus, String);

type Res<T> = Result<T, Fail>;

fn guard(f: impl FnOnce() -> Res<()>) -> CidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CidStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CidStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &str) -> Res<&'a T> {
    // SAFETY: caller guarantees non-null pointers are valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(CidStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    // SAFETY: caller guarantees non-null out pointers are valid for writes.
    unsafe { p.as_mut() }.ok_or_else(|| Fail(CidStatus::NullPointer, format!("{what} is null")))
}

fn c_str<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return Err(Fail(CidStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and NUL-terminated per the contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|e| Fail(CidStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn validation(e: impl std::fmt::Display) -> Fail {
    Fail(CidStatus::Validation, e.to_string())
}

/// Parses and validates a scenario JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cid_scenario_from_json(json: *const c_char, out: *mut *mut CidScenario) -> CidStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let text = c_str(json, "json")?;
        let inner = ScenarioConfig::from_json(text).and_then(|c| c.resolve()).map_err(validation)?;
        *out = Box::into_raw(Box::new(CidScenario { inner }));
        Ok(())
    })
}

/// A built-in scenario (`appendix_c`, `kinematic_robot`, `integrator1`, `bilinear2`).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cid_scenario_builtin(name: *const c_char, master_seed: u64, out: *mut *mut CidScenario) -> CidStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let name = c_str(name, "name")?;
        let inner = ScenarioConfig::builtin(name, master_seed).and_then(|c| c.resolve()).map_err(validation)?;
        *out = Box::into_raw(Box::new(CidScenario { inner }));
        Ok(())
    })
}

/// # Safety
/// `scenario` must come from this library and not be used concurrently.
#[no_mangle]
pub unsafe extern "C" fn cid_scenario_set_seed(scenario: *mut CidScenario, master_seed: u64) -> CidStatus {
    guard(|| {
        out_ptr(scenario, "scenario")?.inner.master_seed = master_seed;
        Ok(())
    })
}

/// # Safety
/// `scenario` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cid_scenario_free(scenario: *mut CidScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Runs identification. Pairs that could not be tested are reported through
/// `cid_report_failure_count`, not through the status.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cid_identify(scenario: *const CidScenario, out: *mut *mut CidReport) -> CidStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let s = &nonnull(scenario, "scenario")?.inner;
        let inner = identify_structure(&s.plant, &s.identify, s.master_seed).map_err(|e| Fail(CidStatus::Runtime, e.to_string()))?;
        *out = Box::into_raw(Box::new(CidReport { inner }));
        Ok(())
    })
}

/// # Safety
/// `report` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cid_report_free(report: *mut CidReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

fn string_out(s: String, out: &mut *mut c_char) -> Res<()> {
    *out = CString::new(s).map_err(|e| Fail(CidStatus::Runtime, e.to_string()))?.into_raw();
    Ok(())
}

/// The graph as JSON (same document as `graph.json`). Free with `cid_string_free`.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cid_report_graph_json(report: *const CidReport, out: *mut *mut c_char) -> CidStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let json = nonnull(report, "report")?.inner.graph.to_json().map_err(|e| Fail(CidStatus::Runtime, e.to_string()))?;
        string_out(json, out)
    })
}

/// Whether `source -> x_target` is causal. Indices are zero-based; the source
/// is input `source` when `source_is_input` is true, else state `source`.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cid_report_is_causal(
    report: *const CidReport,
    source_is_input: bool,
    source: usize,
    target: usize,
    out: *mut bool,
) -> CidStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let g = &nonnull(report, "report")?.inner.graph;
        let limit = if source_is_input { g.input_dim } else { g.state_dim };
        if source >= limit || target >= g.state_dim {
            return Err(Fail(CidStatus::InvalidArgument, format!("pair ({source}, {target}) out of range")));
        }
        let s = if source_is_input { Source::Input(source) } else { Source::State(source) };
        *out = g.is_causal(s, target);
        Ok(())
    })
}

/// Number of sources whose tests could not be completed.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cid_report_failure_count(report: *const CidReport, out: *mut usize) -> CidStatus {
    guard(|| {
        *out_ptr(out, "out")? = nonnull(report, "report")?.inner.graph.failures.len();
        Ok(())
    })
}

/// Compares a graph JSON document with the ground truth of an LTI scenario.
/// `mismatches` receives the number of differing edges.
///
/// # Safety
/// `scenario` must be a live handle, `graph_json` NUL-terminated, `mismatches` writable.
#[no_mangle]
pub unsafe extern "C" fn cid_verify(scenario: *const CidScenario, graph_json: *const c_char, mismatches: *mut usize) -> CidStatus {
    guard(|| {
        let out = out_ptr(mismatches, "mismatches")?;
        let s = &nonnull(scenario, "scenario")?.inner;
        let graph = CausalGraph::from_json(c_str(graph_json, "graph_json")?).map_err(validation)?;
        let diff = verify_graph(&graph, s).map_err(validation)?;
        *out = diff.len();
        Ok(())
    })
}

/// Unbiased MMD² with a Gaussian kernel between two row-major `m x d` sample
/// sets whose rows are paired by index.
///
/// # Safety
/// `x` and `y` must point to `m * d` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cid_mmd2_unbiased(x: *const f64, y: *const f64, m: usize, d: usize, lengthscale: f64, out: *mut f64) -> CidStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if x.is_null() || y.is_null() {
            return Err(Fail(CidStatus::NullPointer, "sample pointer is null".into()));
        }
        let len = m.checked_mul(d).ok_or_else(|| Fail(CidStatus::InvalidArgument, "m * d overflows".into()))?;
        let bad = |e: causalid::Error| Fail(CidStatus::InvalidArgument, e.to_string());
        // SAFETY: both buffers hold m * d doubles per the contract.
        let (xs, ys) = unsafe { (std::slice::from_raw_parts(x, len), std::slice::from_raw_parts(y, len)) };
        let cfg = KernelConfig::new(lengthscale).map_err(bad)?;
        let a = SampleSet::from_flat(xs, m, d).map_err(bad)?;
        let b = SampleSet::from_flat(ys, m, d).map_err(bad)?;
        *out = mmd2_unbiased(&a, &b, &cfg).map_err(bad)?;
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cid_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cid_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn cid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
