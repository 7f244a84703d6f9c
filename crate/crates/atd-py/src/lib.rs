//! Python bindings for the solver library.
//!
//! The module mirrors the Rust surface at the granularity a notebook wants:
//! build an instance from a family name, run a method on it, and get plain
//! dicts and lists back. Reports are serialized through the same serde
//! schemas the CLI writes, so keys here match the CSV/JSON files exactly
//! (records carry A_k, lambda_k, zeta_k and friends, and a records list can
//! be handed straight back to `slope`).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde_json::Value;

use atd::bench::{fit_slope, run_method, InstanceSpec};
use atd::engine::{probe_budget, rate_envelope, RunReport, SolverConfig, TraceRecord};
use atd::oracle::validate_oracle;
use atd::AtdError;

fn to_py_err(e: AtdError) -> PyErr {
    match e {
        AtdError::InvalidArgument(msg) => PyValueError::new_err(msg),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyRuntimeError::new_err(format!("serialization failed: {e}"))
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any()
            } else if let Some(u) = n.as_u64() {
                u.into_pyobject(py)?.into_any()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any()
            }
        }
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, val) in map {
                dict.set_item(key, json_to_py(py, val)?)?;
            }
            dict.into_any()
        }
    })
}

/// Flatten a run report into the JSON shape shared with the CLI summaries.
fn report_to_value(report: &RunReport) -> serde_json::Result<Value> {
    Ok(serde_json::json!({
        "method": report.method,
        "final_value": report.final_value,
        "final_gap": report.final_gap,
        "final_point": report.final_point.iter().copied().collect::<Vec<f64>>(),
        "termination": serde_json::to_value(&report.termination)?,
        "records": serde_json::to_value(&report.records)?,
        "violations": serde_json::to_value(&report.violations)?,
        "max_probes": report.max_probes,
        "probe_cap": report.probe_cap,
        "oracle_calls": serde_json::to_value(&report.call_counts)?,
    }))
}

/// A benchmark problem, held as its generating spec so every run rebuilds
/// the same deterministic instance.
// Functions only ever borrow the pyclass, so no clone-based extraction.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Instance {
    spec: InstanceSpec,
}

impl Instance {
    fn from_parts(
        family: &str,
        d: usize,
        m: usize,
        p: usize,
        seed: u64,
        target_norm: Option<f64>,
    ) -> PyResult<Self> {
        let spec = InstanceSpec { family: family.to_string(), d, m, p, seed, target_norm };
        spec.build().map_err(to_py_err)?;
        Ok(Instance { spec })
    }
}

#[pymethods]
impl Instance {
    /// Power-regression family with a planted minimizer of the given norm.
    #[staticmethod]
    #[pyo3(signature = (d=10, m=20, p=2, seed=7, target_norm=1.0))]
    fn power(d: usize, m: usize, p: usize, seed: u64, target_norm: f64) -> PyResult<Self> {
        Instance::from_parts("power", d, m, p, seed, Some(target_norm))
    }

    /// Quadratic least squares with a planted minimizer.
    #[staticmethod]
    #[pyo3(signature = (d=10, m=20, p=2, seed=7, target_norm=1.0))]
    fn quadratic(d: usize, m: usize, p: usize, seed: u64, target_norm: f64) -> PyResult<Self> {
        Instance::from_parts("quadratic", d, m, p, seed, Some(target_norm))
    }

    /// Log-sum-exp of random affine forms; the minimizer is located, not
    /// planted.
    #[staticmethod]
    #[pyo3(signature = (d=10, m=20, p=2, seed=7))]
    fn logsumexp(d: usize, m: usize, p: usize, seed: u64) -> PyResult<Self> {
        Instance::from_parts("logsumexp", d, m, p, seed, None)
    }

    fn label(&self) -> String {
        self.spec.label()
    }

    /// Family, sizes, L_p, and whatever ground truth the family knows.
    fn descriptor<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let instance = self.spec.build().map_err(to_py_err)?;
        let value = serde_json::to_value(&instance.descriptor).map_err(json_err)?;
        json_to_py(py, &value)
    }

    fn __repr__(&self) -> String {
        format!("Instance({})", self.spec.label())
    }
}

/// Run one method ("atd", "gd", "agd", or "tensor") and return the full
/// report as a dict.
#[pyfunction]
#[pyo3(signature = (instance, method="atd", iters=100, epsilon=1e-12, strict=false, radius=None))]
fn run<'py>(
    py: Python<'py>,
    instance: &Instance,
    method: &str,
    iters: usize,
    epsilon: f64,
    strict: bool,
    radius: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let problem = instance.spec.build().map_err(to_py_err)?;
    let cfg = SolverConfig { epsilon, strict, radius, keep_history: false, ..SolverConfig::default() };
    let report = run_method(&problem, method, iters, &cfg).map_err(to_py_err)?;
    let value = report_to_value(&report).map_err(json_err)?;
    json_to_py(py, &value)
}

/// Taylor-remainder and gradient checks on fresh sample points.
#[pyfunction]
#[pyo3(signature = (instance, radius=1.0, samples=100, seed=0))]
fn validate<'py>(
    py: Python<'py>,
    instance: &Instance,
    radius: f64,
    samples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let problem = instance.spec.build().map_err(to_py_err)?;
    let report = validate_oracle(&problem.oracle, radius, samples, seed).map_err(to_py_err)?;
    let value = serde_json::to_value(&report).map_err(json_err)?;
    json_to_py(py, &value)
}

/// Least-squares log-log rate exponent of a records list (as returned by
/// `run`). Without a window the last half of the positive-gap rows is used.
#[pyfunction]
#[pyo3(signature = (records, k_min=None, k_max=None))]
fn slope<'py>(
    py: Python<'py>,
    records: &Bound<'py, PyAny>,
    k_min: Option<usize>,
    k_max: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let dumped: String = py
        .import("json")?
        .call_method1("dumps", (records,))?
        .extract()?;
    let rows: Vec<TraceRecord> = serde_json::from_str(&dumped)
        .map_err(|e| PyValueError::new_err(format!("records do not match the trace schema: {e}")))?;
    let window = match (k_min, k_max) {
        (None, None) => None,
        (lo, hi) => {
            let last = rows.iter().map(|r| r.k).max().unwrap_or(1);
            Some((lo.unwrap_or(1), hi.unwrap_or(last)))
        }
    };
    let estimate = fit_slope(&rows, window).map_err(to_py_err)?;
    let value = serde_json::to_value(&estimate).map_err(json_err)?;
    json_to_py(py, &value)
}

/// The per-iteration probe cap for the given order, smoothness constant,
/// minimizer norm bound, and accuracy target.
#[pyfunction]
#[pyo3(signature = (p, lipschitz, epsilon, norm_bound=None))]
fn probe_cap(p: usize, lipschitz: f64, epsilon: f64, norm_bound: Option<f64>) -> usize {
    probe_budget(p, lipschitz, norm_bound, epsilon)
}

/// Guaranteed gap bound at iteration k for an order-p run.
#[pyfunction]
fn envelope(k: usize, p: usize, lipschitz: f64, norm_x_star: f64) -> f64 {
    rate_envelope(k, p, lipschitz, norm_x_star)
}

#[pymodule]
fn atd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Instance>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(slope, m)?)?;
    m.add_function(wrap_pyfunction!(probe_cap, m)?)?;
    m.add_function(wrap_pyfunction!(envelope, m)?)?;
    Ok(())
}
