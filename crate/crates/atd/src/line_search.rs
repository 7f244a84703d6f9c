//! The per-iteration step-size search.
//!
//! Everything is parameterized by theta in (0, 1) through
//!
//!   x~(theta) = (1 - theta) x_k + theta y_k,
//!   lambda(theta) = ((1 - theta)^2 / theta) A_k,
//!
//! which makes the coupling lambda A_{k+1} = a_{k+1}^2 hold identically in
//! theta. A probe solves the regularized model subproblem at x~(theta) and
//! scores it by
//!
//!   zeta(theta) = lambda(theta) L_p ||z(theta)||^(p-1) / (p-1)!,
//!
//! which runs from +inf at theta -> 0 to 0 at theta -> 1. The search bisects
//! on sign(zeta - target) and accepts any probe with zeta in
//! [1/2, p/(p+1)]. Every probe is also gap-tested so a run can stop the
//! moment some candidate is provably epsilon-optimal, which is what makes the
//! total probe budget of 30 p log2(p) + log2(ceil(L S / eps)) per iteration
//! meaningful.
//!
//! Order 1 needs no search at all: zeta = lambda L_1 there, so the window
//! collapses to lambda = 1/(2 L_1) and theta has a closed form.

use serde::{Deserialize, Serialize};

use crate::engine::SolverState;
use crate::error::AtdError;
use crate::oracle::{Point, ProblemOracle};
use crate::subsolver::{solve_subproblem, SubproblemSolution};
use crate::Result;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Inputs the search needs beyond the solver state.
#[derive(Debug, Clone)]
pub struct LineSearchSettings {
    /// Bisection target inside the window; 7/12 unless configured otherwise.
    pub target: f64,
    pub epsilon: f64,
    pub tol_sub: f64,
    /// Upper bound on ||x*|| for the distance-based gap bound; optional.
    pub radius: Option<f64>,
    /// Known optimal value, for exact gap tests; optional.
    pub f_star: Option<f64>,
    /// Hard cap on probes for this iteration.
    pub probe_cap: usize,
    /// Accepted theta from the previous iteration, probed first.
    pub warm_theta: Option<f64>,
}

/// One probe of the search, kept for diagnostics and failure reports.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub theta: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub z_norm: f64,
}

/// An accepted step.
#[derive(Debug, Clone)]
pub struct LineSearchResult {
    pub theta: f64,
    pub lambda: f64,
    pub x_tilde: Point,
    pub y: Point,
    pub z: Point,
    pub zeta: f64,
    /// Probes consumed this iteration.
    pub iterations: usize,
    pub subsolve_residual: f64,
    pub probes: Vec<ProbeRecord>,
}

/// A probe whose candidate point is provably epsilon-optimal.
#[derive(Debug, Clone)]
pub struct CertifiedPoint {
    pub point: Point,
    pub value: f64,
    pub gap: f64,
    pub probes: usize,
}

pub enum SearchOutcome {
    Accepted(LineSearchResult),
    EarlyExit(CertifiedPoint),
}

/// Gap bound from the step norm alone: if ||x*|| <= R, the candidate at a
/// probe with step z satisfies f(y) - f* <= L (p+2)(12 p^3 + 4) R ||z||^p / p!.
pub fn gap_bound(z_norm: f64, p: usize, lipschitz: f64, radius: f64) -> f64 {
    lipschitz * (p as f64 + 2.0) * (12.0 * (p as f64).powi(3) + 4.0) * radius * z_norm.powi(p as i32)
        / factorial(p)
}

/// Probe the search objective at one theta. Returns (zeta, subproblem
/// solution, x~(theta), lambda(theta)). Costs one model expansion.
pub fn eval_zeta(
    oracle: &ProblemOracle,
    state: &SolverState,
    theta: f64,
    tol_sub: f64,
) -> Result<(f64, SubproblemSolution, Point, f64)> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(AtdError::InvalidArgument(format!(
            "theta must lie strictly inside (0, 1), got {theta}"
        )));
    }
    if !(state.total_a > 0.0) {
        return Err(AtdError::InvalidArgument(
            "zeta is undefined before the first step (A = 0)".into(),
        ));
    }
    let p = oracle.order();
    let lambda = (1.0 - theta) * (1.0 - theta) / theta * state.total_a;
    let x_tilde = state.x.scale(1.0 - theta) + state.y.scale(theta);
    let sol = solve_subproblem(oracle, &x_tilde, tol_sub)?;
    let zeta =
        lambda * oracle.lipschitz() * sol.z.norm().powi(p as i32 - 1) / factorial(p - 1);
    Ok((zeta, sol, x_tilde, lambda))
}

struct GapTester<'a> {
    oracle: &'a ProblemOracle,
    settings: &'a LineSearchSettings,
}

impl GapTester<'_> {
    /// Certify y if we can prove its gap is at most epsilon. The exact test
    /// uses f* when known; otherwise the step-norm bound stands in, at the
    /// price of one more value query only when it fires.
    fn test(&self, y: &Point, z_norm: f64, probes: usize) -> Result<Option<CertifiedPoint>> {
        if let Some(fs) = self.settings.f_star {
            let v = self.oracle.value(y)?;
            let gap = (v - fs).max(0.0);
            if gap <= self.settings.epsilon {
                return Ok(Some(CertifiedPoint { point: y.clone(), value: v, gap, probes }));
            }
        } else if let Some(r) = self.settings.radius {
            let bound = gap_bound(z_norm, self.oracle.order(), self.oracle.lipschitz(), r);
            if bound <= self.settings.epsilon {
                let v = self.oracle.value(y)?;
                return Ok(Some(CertifiedPoint { point: y.clone(), value: v, gap: bound, probes }));
            }
        }
        Ok(None)
    }
}

/// Find (lambda, y) for the next iteration: a probe whose zeta lands in
/// [1/2, p/(p+1)], or a certified epsilon-optimal point, whichever comes
/// first.
pub fn find_lambda(
    oracle: &ProblemOracle,
    state: &SolverState,
    settings: &LineSearchSettings,
) -> Result<SearchOutcome> {
    let p = oracle.order();
    let lip = oracle.lipschitz();
    let fact = factorial(p - 1);
    let tester = GapTester { oracle, settings };

    // First iteration: A = 0 makes the momentum point x_0 for every theta,
    // so one subproblem solve fixes y_1 and lambda_1 is set directly on
    // target. No search happens.
    if state.k == 0 {
        let x_tilde = state.x.clone();
        let sol = solve_subproblem(oracle, &x_tilde, settings.tol_sub)?;
        let z_norm = sol.z.norm();
        let y = &x_tilde + &sol.z;
        if z_norm == 0.0 {
            // Stationary start: x_0 is already optimal.
            let value = oracle.value(&y)?;
            let gap = settings.f_star.map_or(0.0, |fs| (value - fs).max(0.0));
            return Ok(SearchOutcome::EarlyExit(CertifiedPoint { point: y, value, gap, probes: 1 }));
        }
        if let Some(cert) = tester.test(&y, z_norm, 1)? {
            return Ok(SearchOutcome::EarlyExit(cert));
        }
        let target = if p == 1 { 0.5 } else { settings.target };
        let lambda = target * fact / (lip * z_norm.powi(p as i32 - 1));
        let zeta = lambda * lip * z_norm.powi(p as i32 - 1) / fact;
        let probes = vec![ProbeRecord { theta: 0.5, lambda, zeta, z_norm }];
        return Ok(SearchOutcome::Accepted(LineSearchResult {
            theta: 0.5,
            lambda,
            x_tilde,
            y,
            z: sol.z.clone(),
            zeta,
            iterations: 1,
            subsolve_residual: sol.stationarity_residual,
            probes,
        }));
    }

    // Order 1: ||z||^(p-1) = 1 collapses the window to lambda = 1/(2 L_1),
    // and theta solves theta^2 - (2 + c) theta + 1 = 0 with c = lambda / A_k.
    // The complementary root formula keeps 1 - theta accurate as theta -> 1.
    if p == 1 {
        let lambda = 0.5 / lip;
        let c = lambda / state.total_a;
        let one_minus_theta = 0.5 * ((c * (4.0 + c)).sqrt() - c);
        let theta = 1.0 - one_minus_theta;
        let x_tilde = state.x.scale(one_minus_theta) + state.y.scale(theta);
        let sol = solve_subproblem(oracle, &x_tilde, settings.tol_sub)?;
        let z_norm = sol.z.norm();
        let y = &x_tilde + &sol.z;
        let zeta = lambda * lip;
        if z_norm == 0.0 {
            let value = oracle.value(&y)?;
            let gap = settings.f_star.map_or(0.0, |fs| (value - fs).max(0.0));
            return Ok(SearchOutcome::EarlyExit(CertifiedPoint { point: y, value, gap, probes: 1 }));
        }
        if let Some(cert) = tester.test(&y, z_norm, 1)? {
            return Ok(SearchOutcome::EarlyExit(cert));
        }
        let probes = vec![ProbeRecord { theta, lambda, zeta, z_norm }];
        return Ok(SearchOutcome::Accepted(LineSearchResult {
            theta,
            lambda,
            x_tilde,
            y,
            z: sol.z.clone(),
            zeta,
            iterations: 1,
            subsolve_residual: sol.stationarity_residual,
            probes,
        }));
    }

    // Orders >= 2: bisection on sign(zeta - target). The bracket endpoints
    // start at the representable edges of (0, 1) where the signs are known
    // analytically (zeta -> +inf and 0 respectively), so they are never
    // probed; the first real probe is the warm start from the previous
    // iteration when one exists.
    let window_hi = p as f64 / (p as f64 + 1.0);
    let mut lo = 2f64.powi(-52);
    let mut hi = 1.0 - 2f64.powi(-52);
    let mut theta = match settings.warm_theta {
        Some(t) if t > lo && t < hi => t,
        _ => 0.5,
    };
    let mut probes: Vec<ProbeRecord> = Vec::new();

    loop {
        if probes.len() >= settings.probe_cap {
            return Err(AtdError::LineSearchFailure {
                iter: state.k,
                reason: format!(
                    "probe budget {} exhausted with bracket [{lo}, {hi}]",
                    settings.probe_cap
                ),
                probes: format!("{probes:?}"),
            });
        }
        let (zeta, sol, x_tilde, lambda) = eval_zeta(oracle, state, theta, settings.tol_sub)?;
        let z_norm = sol.z.norm();
        probes.push(ProbeRecord { theta, lambda, zeta, z_norm });
        let y = &x_tilde + &sol.z;

        if z_norm == 0.0 {
            // The momentum point itself is stationary, hence optimal.
            let value = oracle.value(&y)?;
            let gap = settings.f_star.map_or(0.0, |fs| (value - fs).max(0.0));
            return Ok(SearchOutcome::EarlyExit(CertifiedPoint {
                point: y,
                value,
                gap,
                probes: probes.len(),
            }));
        }
        if let Some(cert) = tester.test(&y, z_norm, probes.len())? {
            return Ok(SearchOutcome::EarlyExit(cert));
        }
        if zeta >= 0.5 && zeta <= window_hi {
            return Ok(SearchOutcome::Accepted(LineSearchResult {
                theta,
                lambda,
                x_tilde,
                y,
                z: sol.z.clone(),
                zeta,
                iterations: probes.len(),
                subsolve_residual: sol.stationarity_residual,
                probes,
            }));
        }
        if zeta > settings.target {
            lo = theta;
        } else {
            hi = theta;
        }
        let next = 0.5 * (lo + hi);
        if !(next > lo && next < hi) {
            return Err(AtdError::LineSearchFailure {
                iter: state.k,
                reason: format!("bracket [{lo}, {hi}] collapsed without landing in the window"),
                probes: format!("{probes:?}"),
            });
        }
        theta = next;
    }
}

/// Sanity bounds every probe of a sound search must satisfy when R really is
/// an upper bound on ||x*||: step norms stay below 12 p^3 R, successive step
/// norms move at most 5 (p+1)^2 R per unit theta, and the accepted momentum
/// point stays within 4 ||x*|| of the optimum. Purely diagnostic; returns
/// human-readable findings instead of erroring, so a deliberately understated
/// R shows up as flags rather than a crash.
pub fn diagnostics(
    probes: &[ProbeRecord],
    x_tilde: &Point,
    p: usize,
    radius: f64,
    x_star: Option<&Point>,
) -> Vec<String> {
    let mut findings = Vec::new();
    let pf = p as f64;
    let z_cap = 12.0 * pf.powi(3) * radius * (1.0 + 1e-6);
    for pr in probes {
        if pr.z_norm > z_cap {
            findings.push(format!(
                "step norm {} at theta {} exceeds the 12 p^3 R bound {z_cap}",
                pr.z_norm, pr.theta
            ));
        }
    }
    let speed = 5.0 * (pf + 1.0) * (pf + 1.0) * radius;
    for w in probes.windows(2) {
        let dz = (w[1].z_norm - w[0].z_norm).abs();
        let allowed = speed * (w[1].theta - w[0].theta).abs() * (1.0 + 1e-6) + 1e-12;
        if dz > allowed {
            findings.push(format!(
                "step norm moved {dz} between theta {} and {}, above the drift bound {allowed}",
                w[0].theta, w[1].theta
            ));
        }
    }
    if let Some(xs) = x_star {
        let bound = 4.0 * xs.norm() * (1.0 + 1e-6);
        let dist = (x_tilde - xs).norm();
        if dist > bound {
            findings.push(format!(
                "momentum point sits {dist} from the optimum, above the diameter bound {bound}"
            ));
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_atd, SolverConfig};
    use crate::oracle::{make_power_regression, power_instance_from_rows};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    // f(t) = |t|^3 / 6 as a one-row power family instance; L_2 = 1.
    fn cube_sixth() -> crate::oracle::ProblemInstance {
        let rows = DMatrix::from_row_slice(1, 1, &[0.5f64.powf(1.0 / 3.0)]);
        power_instance_from_rows(rows, DVector::from_column_slice(&[0.0]), 2, 2, 1.0).unwrap()
    }

    fn hand_state(total_a: f64, x: f64, y: f64) -> SolverState {
        SolverState {
            k: 1,
            total_a,
            x: Point::from_column_slice(&[x]),
            y: Point::from_column_slice(&[y]),
            potential: 0.0,
            tradeoff_sum: 0.0,
            lambda_history: vec![1.0],
            f_y: 0.0,
        }
    }

    #[test]
    fn zeta_matches_scalar_recomputation() {
        // theta = 1/2 from (A, x, y) = (1, 1, 3): x~ = 2, lambda = 1/2, the
        // model step at 2 is z = -2/3, so zeta = (1/2) * (2/3) = 1/3.
        let inst = cube_sixth();
        let state = hand_state(1.0, 1.0, 3.0);
        let (zeta, sol, x_tilde, lambda) =
            eval_zeta(&inst.oracle, &state, 0.5, 1e-10).unwrap();
        assert_relative_eq!(x_tilde[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(lambda, 0.5, epsilon = 1e-12);
        assert_relative_eq!(sol.z[0], -2.0 / 3.0, epsilon = 1e-8);
        assert_relative_eq!(zeta, 1.0 / 3.0, epsilon = 1e-8);
    }

    #[test]
    fn zeta_rejects_degenerate_theta() {
        let inst = cube_sixth();
        let state = hand_state(1.0, 1.0, 3.0);
        assert!(eval_zeta(&inst.oracle, &state, 0.0, 1e-10).is_err());
        assert!(eval_zeta(&inst.oracle, &state, 1.0, 1e-10).is_err());
    }

    #[test]
    fn gap_bound_worked_example() {
        // p = 2, L = 1, R = 1, ||z|| = 0.1: (4 * 100 / 2) * 0.01 = 2.
        assert_relative_eq!(gap_bound(0.1, 2, 1.0, 1.0), 2.0, epsilon = 1e-12);
        assert_eq!(gap_bound(0.0, 2, 1.0, 1.0), 0.0);
    }

    #[test]
    fn search_accepts_inside_the_window() {
        let inst = make_power_regression(6, 12, 2, 17, 1.0).unwrap();
        let report = run_atd(&inst, 25, &SolverConfig::default()).unwrap();
        for rec in &report.records[1..] {
            let zeta = rec.zeta.unwrap();
            assert!(zeta >= 0.5 - 1e-9 && zeta <= 2.0 / 3.0 + 1e-9, "zeta {zeta}");
        }
    }

    #[test]
    fn order_one_needs_single_probe_and_pins_lambda() {
        let inst = make_power_regression(6, 12, 1, 4, 1.0).unwrap();
        let report = run_atd(&inst, 20, &SolverConfig::default()).unwrap();
        let lip = inst.oracle.lipschitz();
        for (i, rec) in report.records[1..].iter().enumerate() {
            assert_eq!(rec.bisect_iters.unwrap(), 1, "iteration {}", i + 1);
            if i > 0 {
                // lambda = 1/(2 L_1) exactly from the second iteration on;
                // the first is set from the step at the origin.
                assert_relative_eq!(rec.lambda.unwrap(), 0.5 / lip, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn first_order_initial_lambda_hits_half_window() {
        let inst = make_power_regression(6, 12, 1, 4, 1.0).unwrap();
        let report = run_atd(&inst, 2, &SolverConfig::default()).unwrap();
        // zeta = lambda L_1 = 1/2 on the very first step too.
        let zeta = report.records[1].zeta.unwrap();
        assert_relative_eq!(zeta, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn warm_start_keeps_probe_counts_low() {
        let inst = make_power_regression(8, 16, 2, 23, 1.0).unwrap();
        let report = run_atd(&inst, 40, &SolverConfig::default()).unwrap();
        let cap = report.probe_cap.unwrap();
        let counts: Vec<u64> =
            report.records[1..].iter().map(|r| r.bisect_iters.unwrap()).collect();
        assert!(counts.iter().all(|&c| (c as usize) <= cap));
        // After warm-up the search should rarely need more than a handful
        // of probes; insist the tail median stays small.
        let mut tail: Vec<u64> = counts[counts.len() / 2..].to_vec();
        tail.sort_unstable();
        assert!(tail[tail.len() / 2] <= 8, "median tail probes {tail:?}");
    }

    #[test]
    fn diagnostics_flag_understated_radius() {
        let probes = vec![
            ProbeRecord { theta: 0.4, lambda: 1.0, zeta: 0.7, z_norm: 0.5 },
            ProbeRecord { theta: 0.41, lambda: 0.9, zeta: 0.6, z_norm: 1.0 },
        ];
        let x_tilde = Point::from_column_slice(&[0.0, 0.0]);
        let xs = Point::from_column_slice(&[1.0, 0.0]);
        // R honest: no step-norm findings, but theta barely moved while the
        // step norm jumped, so the drift bound fires.
        let honest = diagnostics(&probes, &x_tilde, 2, 1.0, Some(&xs));
        assert_eq!(honest.len(), 1);
        assert!(honest[0].contains("drift"));
        // R understated by three orders of magnitude: everything fires.
        let flagged = diagnostics(&probes, &x_tilde, 2, 1e-3, Some(&xs));
        assert!(flagged.len() >= 3, "expected pervasive flags, got {flagged:?}");
    }

    #[test]
    fn understated_radius_surfaces_in_run_violations() {
        // No ground truth on this instance, so the configured radius is the
        // only scale reference; set it far below the true optimum norm and
        // the search diagnostics must flag it.
        let rows = DMatrix::from_fn(8, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin());
        let shifts = DVector::from_fn(8, |i, _| 1.0 + (i as f64 * 0.61).cos());
        // Generous L keeps every window invariant honest; only the radius lies.
        let inst = power_instance_from_rows(rows, shifts, 2, 2, 200.0).unwrap();
        let cfg = SolverConfig { radius: Some(1e-5), ..SolverConfig::default() };
        let report = run_atd(&inst, 10, &cfg).unwrap();
        assert!(
            report.violations.iter().any(|v| v.check == "search_diagnostics"),
            "expected diagnostic flags, got {:?}",
            report.violations
        );
    }

    #[test]
    fn early_exit_fires_once_the_gap_is_certified() {
        let inst = make_power_regression(5, 10, 2, 31, 1.0).unwrap();
        let lip = inst.oracle.lipschitz();
        let eps = 1e-8 * lip;
        let cfg = SolverConfig { epsilon: eps, ..SolverConfig::default() };
        let report = run_atd(&inst, 400, &cfg).unwrap();
        match report.termination {
            crate::engine::Termination::CertifiedGap { gap, at_iter } => {
                assert!(gap <= eps);
                assert!(at_iter < 400, "should certify well before the cap");
            }
            ref t => panic!("expected certified exit, got {t:?}"),
        }
    }
}
