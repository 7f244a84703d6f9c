//! Benchmark plumbing: run specifications, the solver matrix, trace
//! persistence, and rate-slope estimation.
//!
//! Output layout is one CSV per (instance, method) cell plus a single
//! `summary.json`. Nothing here carries timestamps or machine identifiers, so
//! a rerun with the same specs is byte-identical, which the tests rely on.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_agd, run_gd, run_tensor};
use crate::engine::{run_atd, RunReport, SolverConfig, Termination, TraceRecord};
use crate::error::AtdError;
use crate::oracle::{
    make_logsumexp, make_power_regression, make_quadratic, CallCounts, InstanceDescriptor,
    ProblemInstance,
};
use crate::Result;

/// Generation parameters for one problem instance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceSpec {
    pub family: String,
    pub d: usize,
    pub m: usize,
    pub p: usize,
    pub seed: u64,
    /// Planted minimizer norm; required by power and quadratic, ignored by
    /// logsumexp (whose minimizer is located, not planted).
    #[serde(default)]
    pub target_norm: Option<f64>,
}

impl InstanceSpec {
    pub fn build(&self) -> Result<ProblemInstance> {
        match self.family.as_str() {
            "power" => {
                let norm = self.required_norm()?;
                make_power_regression(self.d, self.m, self.p, self.seed, norm)
            }
            "quadratic" => {
                let norm = self.required_norm()?;
                make_quadratic(self.d, self.m, self.p, self.seed, norm)
            }
            "logsumexp" => make_logsumexp(self.d, self.m, self.p, self.seed),
            other => Err(AtdError::InvalidArgument(format!(
                "unknown family {other:?}; expected power, quadratic, or logsumexp"
            ))),
        }
    }

    fn required_norm(&self) -> Result<f64> {
        self.target_norm.ok_or_else(|| {
            AtdError::InvalidArgument(format!(
                "family {:?} needs target_norm to plant its minimizer",
                self.family
            ))
        })
    }

    /// Stable label used in file names.
    pub fn label(&self) -> String {
        format!("{}_d{}_m{}_p{}_s{}", self.family, self.d, self.m, self.p, self.seed)
    }
}

/// One benchmark cell group: an instance, the methods to run on it, and the
/// run controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    pub instance: InstanceSpec,
    pub methods: Vec<String>,
    pub iters: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub radius: Option<f64>,
}

impl RunSpec {
    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(AtdError::InvalidArgument("method list must not be empty".into()));
        }
        if self.iters == 0 {
            return Err(AtdError::InvalidArgument("iters must be at least 1".into()));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(AtdError::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Dispatch one method by name.
pub fn run_method(
    instance: &ProblemInstance,
    method: &str,
    iters: usize,
    cfg: &SolverConfig,
) -> Result<RunReport> {
    match method {
        "atd" => run_atd(instance, iters, cfg),
        "gd" => run_gd(instance, iters, cfg),
        "agd" => run_agd(instance, iters, 1.0, cfg),
        "tensor" => run_tensor(instance, iters, cfg),
        other => Err(AtdError::InvalidArgument(format!(
            "unknown method {other:?}; expected atd, gd, agd, or tensor"
        ))),
    }
}

/// Per-cell summary entry. `status` is "ok" or "error"; an error cell keeps
/// the message and leaves the result fields empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub instance: InstanceSpec,
    pub descriptor: Option<InstanceDescriptor>,
    pub method: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub trace_file: Option<String>,
    pub iterations_run: Option<usize>,
    pub termination: Option<Termination>,
    pub final_gap: Option<f64>,
    pub final_value: Option<f64>,
    pub violation_total: Option<usize>,
    pub violations_by_check: Option<BTreeMap<String, usize>>,
    pub oracle_calls: Option<CallCounts>,
    pub max_probes: Option<usize>,
    pub probe_cap: Option<usize>,
    pub probes_within_cap: Option<bool>,
    /// Bisection probes per iteration, in iteration order.
    pub bisect_iters: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub cells: Vec<CellSummary>,
}

struct CellOutcome {
    spec: RunSpec,
    method: String,
    descriptor: Option<InstanceDescriptor>,
    result: std::result::Result<RunReport, String>,
}

fn run_cell(spec: &RunSpec, method: &str) -> CellOutcome {
    let cfg = SolverConfig {
        epsilon: spec.epsilon,
        strict: spec.strict,
        radius: spec.radius,
        keep_history: false,
        ..SolverConfig::default()
    };
    let (descriptor, result) = match spec.instance.build() {
        Ok(instance) => (
            Some(instance.descriptor.clone()),
            run_method(&instance, method, spec.iters, &cfg).map_err(|e| e.to_string()),
        ),
        Err(e) => (None, Err(e.to_string())),
    };
    CellOutcome { spec: spec.clone(), method: method.to_string(), descriptor, result }
}

/// Run every (instance, method) cell of the given specs, write one CSV per
/// cell and a `summary.json` into `out_dir`, and return the summary. Cells
/// run on the rayon pool; failures are captured per cell and the rest of the
/// matrix still runs. Files are written by this single collector thread.
pub fn run_matrix(specs: &[RunSpec], out_dir: &Path) -> Result<MatrixSummary> {
    if specs.is_empty() {
        return Err(AtdError::InvalidArgument("no run specs given".into()));
    }
    for spec in specs {
        spec.validate()?;
    }
    fs::create_dir_all(out_dir)?;

    let cells: Vec<(&RunSpec, &String)> =
        specs.iter().flat_map(|s| s.methods.iter().map(move |m| (s, m))).collect();
    let outcomes: Vec<CellOutcome> =
        cells.par_iter().map(|(spec, method)| run_cell(spec, method)).collect();

    let mut summaries = Vec::with_capacity(outcomes.len());
    for outcome in &outcomes {
        let label = outcome.spec.instance.label();
        let mut cell = CellSummary {
            instance: outcome.spec.instance.clone(),
            descriptor: outcome.descriptor.clone(),
            method: outcome.method.clone(),
            status: "ok".into(),
            error: None,
            trace_file: None,
            iterations_run: None,
            termination: None,
            final_gap: None,
            final_value: None,
            violation_total: None,
            violations_by_check: None,
            oracle_calls: None,
            max_probes: None,
            probe_cap: None,
            probes_within_cap: None,
            bisect_iters: None,
        };
        match &outcome.result {
            Ok(report) => {
                let file = format!("{label}_{}.csv", outcome.method);
                write_trace(&report.records, &out_dir.join(&file))?;
                let mut by_check: BTreeMap<String, usize> = BTreeMap::new();
                for v in &report.violations {
                    *by_check.entry(v.check.clone()).or_insert(0) += 1;
                }
                cell.trace_file = Some(file);
                cell.iterations_run = Some(report.records.len().saturating_sub(1));
                cell.termination = Some(report.termination.clone());
                cell.final_gap = report.final_gap;
                cell.final_value = Some(report.final_value);
                cell.violation_total = Some(report.violations.len());
                cell.violations_by_check = Some(by_check);
                cell.oracle_calls = Some(report.call_counts);
                cell.max_probes = Some(report.max_probes);
                cell.probe_cap = report.probe_cap;
                cell.probes_within_cap = report.probe_cap.map(|cap| report.max_probes <= cap);
                cell.bisect_iters = Some(
                    report.records.iter().filter_map(|r| r.bisect_iters).collect(),
                );
            }
            Err(msg) => {
                cell.status = "error".into();
                cell.error = Some(msg.clone());
            }
        }
        summaries.push(cell);
    }

    let summary = MatrixSummary { cells: summaries };
    let json = serde_json::to_vec_pretty(&summary)
        .map_err(|e| AtdError::Serialization(e.to_string()))?;
    fs::write(out_dir.join("summary.json"), json)?;
    Ok(summary)
}

/// Write trace rows with the fixed column schema
/// k, gap, A_k, lambda_k, a_k, zeta_k, step_norm, oracle_calls_cum,
/// bisect_iters, potential, certificate.
pub fn write_trace(records: &[TraceRecord], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(AtdError::from)?;
    for rec in records {
        writer.serialize(rec).map_err(AtdError::from)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(AtdError::from)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row.map_err(AtdError::from)?);
    }
    Ok(out)
}

/// Least-squares slope of log(gap) against log(k).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeEstimate {
    pub slope: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub points: usize,
}

/// Fit the rate exponent over `window` (inclusive), or over the last half of
/// the positive-gap iterations when no window is given. Rows from the first
/// nonpositive gap onward are dropped: once the gap hits rounding level the
/// log scale is meaningless. Fewer than 10 usable points is an error.
pub fn fit_slope(records: &[TraceRecord], window: Option<(usize, usize)>) -> Result<SlopeEstimate> {
    let mut usable: Vec<(usize, f64)> = Vec::new();
    for rec in records {
        if rec.k == 0 {
            continue;
        }
        match rec.gap {
            Some(g) if g > 0.0 => usable.push((rec.k, g)),
            Some(_) => break,
            None => {
                return Err(AtdError::Estimation(
                    "trace has no gap column; slope needs ground truth".into(),
                ))
            }
        }
    }
    let (k_min, k_max) = match window {
        Some((lo, hi)) => {
            if lo >= hi {
                return Err(AtdError::Estimation(format!("bad window [{lo}, {hi}]")));
            }
            (lo, hi)
        }
        None => {
            // Last half of the positive-gap iterations.
            if usable.is_empty() {
                return Err(AtdError::Estimation("no positive-gap iterations".into()));
            }
            (usable[usable.len() / 2].0, usable[usable.len() - 1].0)
        }
    };
    let pts: Vec<(f64, f64)> = usable
        .iter()
        .filter(|(k, _)| *k >= k_min && *k <= k_max)
        .map(|(k, g)| ((*k as f64).ln(), g.ln()))
        .collect();
    if pts.len() < 10 {
        return Err(AtdError::Estimation(format!(
            "slope fit needs at least 10 positive-gap points in [{k_min}, {k_max}], found {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = pts.iter().map(|(_, y)| y).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in &pts {
        cov += (x - mean_x) * (y - mean_y);
        var += (x - mean_x) * (x - mean_x);
    }
    if var == 0.0 {
        return Err(AtdError::Estimation("window spans a single k value".into()));
    }
    let slope = cov / var;
    let intercept = mean_y - slope * mean_x;
    let rss: f64 = pts.iter().map(|(x, y)| (y - (slope * x + intercept)).powi(2)).sum();
    Ok(SlopeEstimate {
        slope,
        residual: (rss / n).sqrt(),
        k_min,
        k_max,
        points: pts.len(),
    })
}

/// Write an instance descriptor as pretty JSON; the `generate` subcommand's
/// output format.
pub fn write_descriptor(descriptor: &InstanceDescriptor, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let json =
        serde_json::to_vec_pretty(descriptor).map_err(|e| AtdError::Serialization(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

/// Parse a RunSpec list from a JSON config file.
pub fn read_specs(path: &Path) -> Result<Vec<RunSpec>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| AtdError::Serialization(format!("{path:?}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::path::PathBuf;

    fn synthetic_trace<F: Fn(usize) -> f64>(n: usize, gap: F) -> Vec<TraceRecord> {
        (0..=n)
            .map(|k| TraceRecord {
                k,
                gap: if k == 0 { None } else { Some(gap(k)) },
                total_a: None,
                lambda: None,
                a_step: None,
                zeta: None,
                step_norm: None,
                oracle_calls_cum: k as u64,
                bisect_iters: None,
                potential: None,
                certificate: None,
            })
            .collect()
    }

    fn scratch_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("atd_bench_{tag}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn slope_recovers_exact_power_laws() {
        let trace = synthetic_trace(60, |k| (k as f64).powi(-2));
        let est = fit_slope(&trace, Some((1, 60))).unwrap();
        assert_relative_eq!(est.slope, -2.0, epsilon = 1e-9);
        assert!(est.residual <= 1e-9);

        let trace = synthetic_trace(60, |k| 7.3 * (k as f64).powf(-3.5));
        let est = fit_slope(&trace, None).unwrap();
        assert_relative_eq!(est.slope, -3.5, epsilon = 1e-9);
    }

    #[test]
    fn slope_needs_ten_points() {
        let trace = synthetic_trace(8, |k| (k as f64).powi(-2));
        assert!(matches!(fit_slope(&trace, None), Err(AtdError::Estimation(_))));
    }

    #[test]
    fn slope_truncates_at_first_nonpositive_gap() {
        // Gap underflows to zero at k = 31; rows from there on must not
        // contribute, and the fit still succeeds on the earlier rows.
        let trace = synthetic_trace(50, |k| if k > 30 { 0.0 } else { (k as f64).powi(-2) });
        let est = fit_slope(&trace, Some((1, 50))).unwrap();
        assert_eq!(est.points, 30);
        assert_relative_eq!(est.slope, -2.0, epsilon = 1e-9);
    }

    #[test]
    fn trace_csv_roundtrips_and_keeps_schema() {
        let dir = scratch_dir("roundtrip");
        let path = dir.join("trace.csv");
        let mut trace = synthetic_trace(12, |k| (k as f64).powi(-2));
        trace[3].lambda = Some(0.25);
        trace[3].certificate = Some(1.5);
        write_trace(&trace, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "k,gap,A_k,lambda_k,a_k,zeta_k,step_norm,oracle_calls_cum,bisect_iters,potential,certificate"
        ));
        let back = read_trace(&path).unwrap();
        assert_eq!(back.len(), trace.len());
        assert_eq!(back[3].lambda, Some(0.25));
        assert_eq!(back[3].certificate, Some(1.5));
        assert_eq!(back[5].lambda, None);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn runspec_json_roundtrip() {
        let spec = RunSpec {
            instance: InstanceSpec {
                family: "power".into(),
                d: 10,
                m: 20,
                p: 2,
                seed: 7,
                target_norm: Some(1.0),
            },
            methods: vec!["atd".into(), "tensor".into()],
            iters: 100,
            epsilon: 1e-9,
            strict: true,
            radius: None,
        };
        let json = serde_json::to_string(&vec![spec.clone()]).unwrap();
        let back: Vec<RunSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[0].instance, spec.instance);
        assert_eq!(back[0].methods, spec.methods);
    }

    #[test]
    fn matrix_runs_write_traces_and_deterministic_summary() {
        let spec = RunSpec {
            instance: InstanceSpec {
                family: "power".into(),
                d: 4,
                m: 8,
                p: 2,
                seed: 3,
                target_norm: Some(1.0),
            },
            methods: vec!["atd".into(), "tensor".into()],
            iters: 12,
            epsilon: 1e-16,
            strict: true,
            radius: None,
        };
        let dir_a = scratch_dir("matrix_a");
        let dir_b = scratch_dir("matrix_b");
        let summary = run_matrix(std::slice::from_ref(&spec), &dir_a).unwrap();
        assert_eq!(summary.cells.len(), 2);
        for cell in &summary.cells {
            assert_eq!(cell.status, "ok");
            assert_eq!(cell.violation_total, Some(0));
            let trace = read_trace(&dir_a.join(cell.trace_file.as_ref().unwrap())).unwrap();
            // The summary's oracle totals are the trace's final cumulative count.
            assert_eq!(
                trace.last().unwrap().oracle_calls_cum,
                cell.oracle_calls.unwrap().expansions
            );
            for rec in &trace {
                if let (Some(g), Some(c)) = (rec.gap, rec.certificate) {
                    assert!(g <= c * (1.0 + 1e-6));
                }
            }
        }
        let atd_cell = summary.cells.iter().find(|c| c.method == "atd").unwrap();
        assert_eq!(atd_cell.probes_within_cap, Some(true));
        assert_eq!(atd_cell.bisect_iters.as_ref().unwrap().len(), 12);

        run_matrix(std::slice::from_ref(&spec), &dir_b).unwrap();
        for name in ["summary.json", "power_d4_m8_p2_s3_atd.csv", "power_d4_m8_p2_s3_tensor.csv"] {
            let a = fs::read(dir_a.join(name)).unwrap();
            let b = fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
        let _ = fs::remove_dir_all(&dir_a);
        let _ = fs::remove_dir_all(&dir_b);
    }

    #[test]
    fn matrix_captures_cell_errors_and_continues() {
        let good = RunSpec {
            instance: InstanceSpec {
                family: "quadratic".into(),
                d: 3,
                m: 6,
                p: 1,
                seed: 1,
                target_norm: Some(1.0),
            },
            methods: vec!["gd".into(), "no_such_method".into()],
            iters: 5,
            epsilon: 1e-16,
            strict: false,
            radius: None,
        };
        let dir = scratch_dir("matrix_err");
        let summary = run_matrix(std::slice::from_ref(&good), &dir).unwrap();
        let ok: Vec<_> = summary.cells.iter().filter(|c| c.status == "ok").collect();
        let err: Vec<_> = summary.cells.iter().filter(|c| c.status == "error").collect();
        assert_eq!(ok.len(), 1);
        assert_eq!(err.len(), 1);
        assert!(err[0].error.as_ref().unwrap().contains("no_such_method"));
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn empty_methods_rejected() {
        let spec = RunSpec {
            instance: InstanceSpec {
                family: "power".into(),
                d: 2,
                m: 4,
                p: 1,
                seed: 0,
                target_norm: Some(1.0),
            },
            methods: vec![],
            iters: 5,
            epsilon: 1e-16,
            strict: false,
            radius: None,
        };
        let dir = scratch_dir("matrix_empty");
        assert!(run_matrix(std::slice::from_ref(&spec), &dir).is_err());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn unknown_family_rejected_per_cell() {
        let spec = InstanceSpec {
            family: "cubic_spline".into(),
            d: 2,
            m: 4,
            p: 1,
            seed: 0,
            target_norm: Some(1.0),
        };
        assert!(spec.build().is_err());
    }
}
