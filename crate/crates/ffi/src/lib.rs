//! C ABI for the gridswitch toolkit.
//!
//! Opaque handles own the Rust objects; every fallible call returns a
//! [`GsStatus`] and stores a human-readable message retrievable with
//! [`gs_last_error_message`]. Strings returned by this library must be
//! released with [`gs_string_free`], handles with their `_free` functions.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use gridswitch::error::Error;
use gridswitch::estimator::MlpParams;
use gridswitch::scenario::{load_scenario, run_case, DetectorChoice, Scenario};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullArgument = 1,
    Utf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Topology = 6,
    InvalidState = 7,
    Numerical = 8,
    Data = 9,
    Shape = 10,
    Calibration = 11,
    TrainingDiverged = 12,
    CapExceeded = 13,
    AllTreesCompromised = 14,
    Panic = 15,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn clear_error() {
    LAST_ERROR.with(|e| e.borrow_mut().clear());
}

fn status_of(err: &Error) -> GsStatus {
    match err {
        Error::InvalidState(_) => GsStatus::InvalidState,
        Error::Topology(_) => GsStatus::Topology,
        Error::Config(_) => GsStatus::Config,
        Error::NumericalDivergence { .. } => GsStatus::Numerical,
        Error::CapExceeded { .. } => GsStatus::CapExceeded,
        Error::Data(_) => GsStatus::Data,
        Error::Shape(_) => GsStatus::Shape,
        Error::TrainingDiverged { .. } => GsStatus::TrainingDiverged,
        Error::Calibration(_) => GsStatus::Calibration,
        Error::AllTreesCompromised => GsStatus::AllTreesCompromised,
        Error::Io(_) => GsStatus::Io,
        Error::Parse(_) => GsStatus::Parse,
    }
}

fn fail(err: Error) -> GsStatus {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

fn guard<F: FnOnce() -> GsStatus>(f: F) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic inside gridswitch FFI call");
            GsStatus::Panic
        }
    }
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, GsStatus> {
    if ptr.is_null() {
        set_error("null path argument");
        return Err(GsStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s).to_path_buf()),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(GsStatus::Utf8)
        }
    }
}

/// Opaque scenario handle.
pub struct GsScenario {
    inner: Scenario,
}

/// Opaque trained-model handle.
pub struct GsModel {
    inner: MlpParams,
}

/// Last error message for this thread as a NUL-terminated string; never
/// null. Free with `gs_string_free`.
#[no_mangle]
pub extern "C" fn gs_last_error_message() -> *mut c_char {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    CString::new(msg)
        .unwrap_or_default()
        .into_raw()
}

/// Release a string returned by this library. Null is accepted.
///
/// # Safety
/// `s` must have been returned by a gridswitch FFI function and not freed
/// before.
#[no_mangle]
pub unsafe extern "C" fn gs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load and validate a scenario TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_load(path: *const c_char, out: *mut *mut GsScenario) -> GsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return GsStatus::NullArgument;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match load_scenario(&path) {
            Ok(scenario) => {
                clear_error();
                *out = Box::into_raw(Box::new(GsScenario { inner: scenario }));
                GsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a scenario handle. Null is accepted.
///
/// # Safety
/// `scenario` must come from `gs_scenario_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_free(scenario: *mut GsScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Number of DGs in the scenario, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_dg_count(scenario: *const GsScenario) -> u32 {
    scenario.as_ref().map(|s| s.inner.grid.n as u32).unwrap_or(0)
}

/// Number of candidate spanning trees, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_tree_count(scenario: *const GsScenario) -> u32 {
    scenario.as_ref().map(|s| s.inner.trees.len() as u32).unwrap_or(0)
}

/// Estimator feature width (3n^2+1), or 0 for a null handle.
///
/// # Safety
/// `scenario` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_feature_width(scenario: *const GsScenario) -> u32 {
    scenario
        .as_ref()
        .map(|s| gridswitch::estimator::feature_width(s.inner.grid.n) as u32)
        .unwrap_or(0)
}

/// Exact arborescence count for `root` (1-based DG index) by the
/// matrix-tree determinant.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_count_arborescences(
    scenario: *const GsScenario,
    root: u32,
    out: *mut u64,
) -> GsStatus {
    guard(|| {
        let (Some(s), false) = (scenario.as_ref(), out.is_null()) else {
            set_error("null argument");
            return GsStatus::NullArgument;
        };
        let n = s.inner.grid.n as u32;
        if root == 0 || root > n {
            set_error(format!("root {root} outside 1..={n}"));
            return GsStatus::Config;
        }
        match gridswitch::comm::count_arborescences(&s.inner.comm, (root - 1) as usize) {
            Ok(count) => {
                clear_error();
                *out = count;
                GsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Load a trained model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_model_load(path: *const c_char, out: *mut *mut GsModel) -> GsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return GsStatus::NullArgument;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        let file = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(e) => return fail(Error::Io(e)),
        };
        match MlpParams::read_json(file) {
            Ok(params) => {
                clear_error();
                *out = Box::into_raw(Box::new(GsModel { inner: params }));
                GsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a model handle. Null is accepted.
///
/// # Safety
/// `model` must come from `gs_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gs_model_free(model: *mut GsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input feature count expected by the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gs_model_input_dim(model: *const GsModel) -> u32 {
    model.as_ref().map(|m| m.inner.input_dim() as u32).unwrap_or(0)
}

/// Estimate the fused abnormality from a feature vector laid out as the
/// flattened received-measurement matrices plus the leader reference.
///
/// # Safety
/// `features` must point to `len` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gs_model_estimate(
    model: *const GsModel,
    features: *const f64,
    len: usize,
    out: *mut f64,
) -> GsStatus {
    guard(|| {
        let (Some(m), false, false) = (model.as_ref(), features.is_null(), out.is_null()) else {
            set_error("null argument");
            return GsStatus::NullArgument;
        };
        let xs = std::slice::from_raw_parts(features, len);
        match m.inner.predict(xs) {
            Ok(y) => {
                clear_error();
                *out = y;
                GsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Run a closed-loop case study. A null `model` selects the analytic
/// detector. When `out_dir` is non-null the trajectory CSV and report JSON
/// are written there. On success `json_out` receives the report document;
/// free it with `gs_string_free`.
///
/// # Safety
/// Pointer arguments must be valid as described; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gs_run_case(
    scenario: *const GsScenario,
    model: *const GsModel,
    mitigation: bool,
    out_dir: *const c_char,
    json_out: *mut *mut c_char,
) -> GsStatus {
    guard(|| {
        let (Some(s), false) = (scenario.as_ref(), json_out.is_null()) else {
            set_error("null argument");
            return GsStatus::NullArgument;
        };
        let detector = match model.as_ref() {
            Some(m) => DetectorChoice::Network(m.inner.clone()),
            None => DetectorChoice::Analytic,
        };
        let dir = if out_dir.is_null() {
            None
        } else {
            match path_arg(out_dir) {
                Ok(p) => Some(p),
                Err(code) => return code,
            }
        };
        match run_case(&s.inner, detector, mitigation, dir.as_deref()) {
            Ok((doc, _)) => {
                let json = match serde_json::to_string_pretty(&doc) {
                    Ok(j) => j,
                    Err(e) => {
                        set_error(e.to_string());
                        return GsStatus::Parse;
                    }
                };
                clear_error();
                *json_out = CString::new(json).unwrap_or_default().into_raw();
                GsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_codes_are_stable() {
        assert_eq!(GsStatus::Ok as i32, 0);
        assert_eq!(GsStatus::AllTreesCompromised as i32, 14);
    }
}
