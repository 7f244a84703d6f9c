//! Regularized Taylor-model minimization.
//!
//! Each accelerated iteration needs the exact minimizer of
//!
//!   F(z) = f_p(center + z; center) + (L_p / p!) ||z||^(p+1)
//!
//! where f_p is the order-p Taylor model served by the oracle. F is convex:
//! the model Hessian can dip below zero by at most (L_p/(p-1)!)||z||^(p-1),
//! and the regularizer Hessian contributes (p+1)(L_p/p!)||z||^(p-1) on the
//! identity, which more than covers it. The minimizer is characterized by the
//! stationarity condition
//!
//!   grad f_p(center + z; center) + (L_p (p+1) / p!) ||z||^(p-1) z = 0
//!
//! and the norm of that left side is the certificate this module returns:
//! anyone holding the oracle can recompute it with one model-gradient query.
//!
//! Strategy by order: p = 1 is a closed form; p = 2 reduces to a scalar
//! secular equation in r = ||z|| through an eigendecomposition of the
//! Hessian; p = 3 runs damped Newton on F itself, which is safe because F is
//! convex with an explicitly known Hessian.

use nalgebra::{DMatrix, DVector};

use crate::error::AtdError;
use crate::oracle::{Point, ProblemOracle};
use crate::Result;

/// Default relative stationarity tolerance. The acceleration analysis
/// assumes exact minimizers; solving three or four orders below the
/// line-search tolerances keeps the inexactness invisible there, and the
/// achieved residual is surfaced in traces rather than assumed.
pub const DEFAULT_TOL_SUB: f64 = 1e-10;

const MAX_INNER: usize = 200;

/// Minimizer of the regularized Taylor model at one center.
#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    /// The step z = y - center.
    pub z: Point,
    /// F(z), the regularized model value at the solution.
    pub model_value: f64,
    /// Norm of the stationarity condition's left side at z.
    pub stationarity_residual: f64,
    /// Inner iterations spent (0 when a closed form applied).
    pub inner_iterations: usize,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// F(z) for a candidate step.
fn model_value(oracle: &ProblemOracle, center: &Point, z: &Point) -> Result<f64> {
    let p = oracle.order();
    let kappa = oracle.lipschitz() / factorial(p);
    let y = center + z;
    Ok(oracle.taylor_value(center, &y)? + kappa * z.norm().powi(p as i32 + 1))
}

/// Gradient of F at z; its norm is the stationarity certificate.
fn model_gradient(oracle: &ProblemOracle, center: &Point, z: &Point) -> Result<Point> {
    let p = oracle.order();
    let kappa = oracle.lipschitz() / factorial(p);
    let y = center + z;
    let mut g = oracle.taylor_grad(center, &y)?;
    let n = z.norm();
    if n > 0.0 {
        g.axpy(kappa * (p as f64 + 1.0) * n.powi(p as i32 - 1), z, 1.0);
    }
    Ok(g)
}

/// Dense model Hessian at center + z (Taylor part only), built column by
/// column from the directional applicator. Dense factorizations are fine at
/// the dimensions this library targets.
fn dense_taylor_hessian(oracle: &ProblemOracle, center: &Point, y: &Point) -> Result<DMatrix<f64>> {
    let d = oracle.dimension();
    let mut h = DMatrix::zeros(d, d);
    for j in 0..d {
        let e = Point::from_fn(d, |i, _| if i == j { 1.0 } else { 0.0 });
        h.set_column(j, &oracle.taylor_hess_apply(center, y, &e)?);
    }
    // Symmetrize away the last bits of rounding so eigen/Cholesky behave.
    h = (h.clone() + h.transpose()).scale(0.5);
    Ok(h)
}

/// Solve the order-p subproblem at `center` to the given relative tolerance.
///
/// The returned residual satisfies
/// `stationarity_residual <= tol_sub * max(1, ||grad f(center)||)`,
/// and the model value never exceeds F(0) = f(center).
pub fn solve_subproblem(oracle: &ProblemOracle, center: &Point, tol_sub: f64) -> Result<SubproblemSolution> {
    if !(tol_sub.is_finite() && tol_sub > 0.0) {
        return Err(AtdError::InvalidArgument(format!("tol_sub must be positive, got {tol_sub}")));
    }
    let g = oracle.true_gradient(center)?;
    let tol = tol_sub * g.norm().max(1.0);
    let p = oracle.order();

    if g.norm() == 0.0 {
        return Ok(SubproblemSolution {
            z: Point::zeros(oracle.dimension()),
            model_value: oracle.value(center)?,
            stationarity_residual: 0.0,
            inner_iterations: 0,
        });
    }

    match p {
        1 => {
            // F(z) = f + g.z + L ||z||^2, minimized in closed form.
            let z = g.scale(-1.0 / (2.0 * oracle.lipschitz()));
            let residual = model_gradient(oracle, center, &z)?.norm();
            Ok(SubproblemSolution {
                model_value: model_value(oracle, center, &z)?,
                stationarity_residual: residual,
                inner_iterations: 0,
                z,
            })
        }
        2 => solve_p2_secular(oracle, center, &g, tol),
        _ => solve_generic_newton(oracle, center, &g, tol),
    }
}

/// p = 2: stationarity says (H + (3 L2 / 2) r I) z = -g with r = ||z||, so the
/// solution norm is the unique root of psi(r) = ||z(r)|| - r. With H = Q D Q^T
/// the map r -> ||z(r)|| is explicit and strictly decreasing, so a bracketing
/// bisection always converges; Newton steps on psi polish the root once the
/// bracket is tight.
fn solve_p2_secular(
    oracle: &ProblemOracle,
    center: &Point,
    g: &Point,
    tol: f64,
) -> Result<SubproblemSolution> {
    let l2 = oracle.lipschitz();
    let c = 1.5 * l2;
    let h = dense_taylor_hessian(oracle, center, center)?;
    let eig = h.clone().symmetric_eigen();
    let ghat = eig.eigenvectors.tr_mul(g);
    let eigs = &eig.eigenvalues;

    // ||z(r)||^2 = sum_i ghat_i^2 / (lambda_i + c r)^2; convexity of f means
    // lambda_i >= 0 up to rounding, so the map is finite for every r > 0.
    let norm_z = |r: f64| -> f64 {
        (0..ghat.len())
            .map(|i| {
                let denom = eigs[i].max(0.0) + c * r;
                (ghat[i] / denom).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    };
    let dnorm_z = |r: f64, nz: f64| -> f64 {
        let s: f64 = (0..ghat.len())
            .map(|i| {
                let denom = eigs[i].max(0.0) + c * r;
                ghat[i].powi(2) / denom.powi(3)
            })
            .sum();
        -c * s / nz
    };

    // Bracket: psi(0+) > 0 always; the upper end comes from
    // ||z|| <= ||g|| / (c ||z||), padded by a factor sqrt(2).
    let mut lo = 0.0_f64;
    let mut hi = (2.0 * g.norm() / c).sqrt() * std::f64::consts::SQRT_2;
    while norm_z(hi) > hi {
        hi *= 2.0;
    }

    let build = |r: f64| -> Point {
        let scaled = DVector::from_fn(ghat.len(), |i, _| -ghat[i] / (eigs[i].max(0.0) + c * r));
        &eig.eigenvectors * scaled
    };

    let mut r = 0.5 * hi;
    let mut iterations = 0;
    let mut best: Option<(f64, Point)> = None;
    while iterations < MAX_INNER {
        iterations += 1;
        let nz = norm_z(r);
        let z = build(r);
        // Direct certificate: the KKT left side evaluated with matrix algebra,
        // independent of the secular parameterization.
        let residual = (g + &h * &z + z.scale(c * z.norm())).norm();
        if best.as_ref().map_or(true, |(b, _)| residual < *b) {
            best = Some((residual, z));
        }
        if residual <= tol {
            break;
        }
        if nz > r {
            lo = r;
        } else {
            hi = r;
        }
        // Newton on psi(r) = ||z(r)|| - r, safeguarded by the bracket.
        let step = (nz - r) / (dnorm_z(r, nz) - 1.0);
        let newton = r - step;
        r = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }

    let (residual, z) = best.expect("secular loop ran at least once");
    if residual > tol {
        return Err(AtdError::SubsolveFailure { residual, iterations });
    }
    Ok(SubproblemSolution {
        model_value: model_value(oracle, center, &z)?,
        stationarity_residual: residual,
        inner_iterations: iterations,
        z,
    })
}

/// p >= 3: damped Newton on F directly. The regularizer Hessian
/// kappa [(p+1) ||z||^(p-1) I + (p+1)(p-1) ||z||^(p-3) z z^T]
/// is exact, and F is convex, so Cholesky with a Levenberg fallback plus
/// monotone line search is globally convergent; near the solution a full
/// Newton step that contracts the gradient is taken outright, where value
/// comparisons would be rounding-limited.
fn solve_generic_newton(
    oracle: &ProblemOracle,
    center: &Point,
    g0: &Point,
    tol: f64,
) -> Result<SubproblemSolution> {
    let d = oracle.dimension();
    let p = oracle.order();
    let kappa = oracle.lipschitz() / factorial(p);
    let mut z = Point::zeros(d);
    let mut fz = model_value(oracle, center, &z)?;
    let mut grad = g0.clone();
    let mut best_residual = grad.norm();

    for iterations in 0..MAX_INNER {
        let gn = grad.norm();
        best_residual = best_residual.min(gn);
        if gn <= tol {
            return Ok(SubproblemSolution {
                model_value: fz,
                stationarity_residual: gn,
                inner_iterations: iterations,
                z,
            });
        }

        let y = center + &z;
        let mut hess = dense_taylor_hessian(oracle, center, &y)?;
        let n = z.norm();
        let diag = kappa * (p as f64 + 1.0) * n.powi(p as i32 - 1);
        for i in 0..d {
            hess[(i, i)] += diag;
        }
        if n > 0.0 {
            let outer_coeff = kappa * ((p + 1) * (p - 1)) as f64 * n.powi(p as i32 - 3);
            hess += (&z * z.transpose()).scale(outer_coeff);
        }

        let scale = hess.diagonal().amax().max(1e-12);
        let mut shift = 0.0_f64;
        let step = loop {
            let shifted = if shift == 0.0 { hess.clone() } else { &hess + DMatrix::identity(d, d).scale(shift) };
            if let Some(chol) = shifted.cholesky() {
                break chol.solve(&(-&grad));
            }
            shift = if shift == 0.0 { 1e-12 * scale } else { shift * 10.0 };
            if shift > 1e12 * scale {
                return Err(AtdError::SubsolveFailure { residual: best_residual, iterations });
            }
        };

        let full = &z + &step;
        let g_full = model_gradient(oracle, center, &full)?;
        if g_full.norm() <= 0.9 * gn {
            z = full;
            grad = g_full;
            fz = model_value(oracle, center, &z)?;
            continue;
        }

        let slope = grad.dot(&step);
        let mut t = 1.0_f64;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &z + step.scale(t);
            let fc = model_value(oracle, center, &cand)?;
            if fc <= fz + 1e-4 * t * slope {
                z = cand;
                fz = fc;
                grad = model_gradient(oracle, center, &z)?;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            let gn = grad.norm();
            if gn <= tol {
                return Ok(SubproblemSolution {
                    model_value: fz,
                    stationarity_residual: gn,
                    inner_iterations: iterations,
                    z,
                });
            }
            return Err(AtdError::SubsolveFailure { residual: best_residual, iterations });
        }
    }
    Err(AtdError::SubsolveFailure { residual: best_residual, iterations: MAX_INNER })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{make_power_regression, make_quadratic, power_instance_from_rows, ProblemInstance};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn cube_sixth(order: usize) -> ProblemInstance {
        let a = 2.0_f64.powf(-1.0 / 3.0);
        power_instance_from_rows(
            DMatrix::from_row_slice(1, 1, &[a]),
            DVector::zeros(1),
            2,
            order,
            1.0,
        )
        .unwrap()
    }

    /// Nested-grid minimizer of F over a box, the brute-force reference.
    fn grid_minimize<F: Fn(&Point) -> f64>(f: F, dim: usize, half0: f64, rounds: usize) -> Point {
        let n = 20usize;
        let mut center = Point::zeros(dim);
        let mut half = half0;
        for _ in 0..rounds {
            let mut best = center.clone();
            let mut best_f = f64::INFINITY;
            let total: usize = (n + 1).pow(dim as u32);
            for idx in 0..total {
                let mut rem = idx;
                let mut pt = Point::zeros(dim);
                for j in 0..dim {
                    let i = rem % (n + 1);
                    rem /= n + 1;
                    pt[j] = center[j] - half + 2.0 * half * i as f64 / n as f64;
                }
                let v = f(&pt);
                if v < best_f {
                    best_f = v;
                    best = pt;
                }
            }
            center = best;
            half = 4.0 * half / n as f64;
        }
        center
    }

    #[test]
    fn p2_cube_sixth_center_one_steps_to_two_thirds() {
        // Model at center 1: 1/6 + h/2 + h^2/2 + |h|^3/2, minimized at -1/3.
        let inst = cube_sixth(2);
        let center = Point::from_element(1, 1.0);
        let sol = solve_subproblem(&inst.oracle, &center, 1e-10).unwrap();
        assert!((sol.z[0] + 1.0 / 3.0).abs() <= 1e-8, "z = {}", sol.z[0]);
        assert!(sol.stationarity_residual <= 1e-10);
    }

    #[test]
    fn p2_identity_hessian_secular_root() {
        // f(x) = ||x||^2 / 2 shifted so grad = (5, 0) at the query center,
        // exposed with L2 = 2: the secular equation is 3r^2 + r - 5 = 0.
        let rows = DMatrix::identity(2, 2);
        let shifts = DVector::from_column_slice(&[-5.0, 0.0]);
        let inst = power_instance_from_rows(rows, shifts, 1, 2, 2.0).unwrap();
        let center = Point::zeros(2);
        let sol = solve_subproblem(&inst.oracle, &center, 1e-12).unwrap();
        let r = (-1.0 + 61.0_f64.sqrt()) / 6.0;
        assert_relative_eq!(sol.z.norm(), r, max_relative = 1e-10);
        assert_relative_eq!(sol.z[0], -5.0 / (1.0 + 3.0 * r), max_relative = 1e-10);
        assert!(sol.z[1].abs() <= 1e-12);
    }

    #[test]
    fn p2_dense_2d_matches_grid() {
        let inst = make_quadratic(2, 5, 2, 31, 1.0).unwrap();
        let center = Point::from_column_slice(&[0.8, -0.6]);
        let sol = solve_subproblem(&inst.oracle, &center, 1e-10).unwrap();
        let f = |z: &Point| model_value(&inst.oracle, &center, z).unwrap();
        let gz = grid_minimize(f, 2, 3.0, 8);
        assert!((&sol.z - &gz).norm() <= 1e-4, "secular {:?} vs grid {:?}", sol.z, gz);
    }

    #[test]
    fn p3_quartic_1d_matches_grid() {
        // f(t) = t^4 / 4 at center 1, L3 = 6.
        let inst = power_instance_from_rows(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::zeros(1),
            3,
            3,
            6.0,
        )
        .unwrap();
        let center = Point::from_element(1, 1.0);
        let sol = solve_subproblem(&inst.oracle, &center, 1e-10).unwrap();
        let f = |z: &Point| model_value(&inst.oracle, &center, z).unwrap();
        let gz = grid_minimize(f, 1, 3.0, 10);
        assert!((sol.z[0] - gz[0]).abs() <= 1e-6, "newton {} vs grid {}", sol.z[0], gz[0]);
        assert!(sol.stationarity_residual <= 1e-10 * 1.0_f64.max(1.0));
    }

    #[test]
    fn p3_dense_2d_matches_grid() {
        let inst = make_power_regression(2, 4, 3, 13, 1.0).unwrap();
        let center = Point::from_column_slice(&[0.5, 0.4]);
        let sol = solve_subproblem(&inst.oracle, &center, 1e-10).unwrap();
        let f = |z: &Point| model_value(&inst.oracle, &center, z).unwrap();
        let gz = grid_minimize(f, 2, 2.0, 8);
        assert!((&sol.z - &gz).norm() <= 1e-4, "newton {:?} vs grid {:?}", sol.z, gz);
    }

    #[test]
    fn p1_closed_form_step() {
        let inst = make_quadratic(3, 6, 1, 7, 1.0).unwrap();
        let center = Point::from_element(3, 0.5);
        let g = inst.oracle.true_gradient(&center).unwrap();
        let sol = solve_subproblem(&inst.oracle, &center, 1e-10).unwrap();
        let expect = g.scale(-1.0 / (2.0 * inst.oracle.lipschitz()));
        assert_relative_eq!((&sol.z - &expect).norm(), 0.0, epsilon = 1e-14);
        assert_eq!(sol.inner_iterations, 0);
    }

    #[test]
    fn stationary_center_returns_zero_step() {
        let inst = make_power_regression(4, 8, 2, 3, 0.0).unwrap();
        // Planted target is the origin, so the gradient there is exactly 0.
        let sol = solve_subproblem(&inst.oracle, &Point::zeros(4), 1e-10).unwrap();
        assert_eq!(sol.z.norm(), 0.0);
        assert_eq!(sol.stationarity_residual, 0.0);
    }

    proptest! {
        #[test]
        fn kkt_certificate_and_descent_hold(
            p in 1usize..=3,
            seed in 0u64..500,
            scale in 0.1f64..2.0,
        ) {
            let inst = make_power_regression(3, 6, p, seed, 1.0).unwrap();
            let mut center = Point::zeros(3);
            let mut s = seed;
            for i in 0..3 {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                center[i] = scale * (((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0);
            }
            let sol = solve_subproblem(&inst.oracle, &center, 1e-10).unwrap();
            let g = inst.oracle.true_gradient(&center).unwrap();
            prop_assert!(sol.stationarity_residual <= 1e-10 * g.norm().max(1.0));
            let f_center = inst.oracle.value(&center).unwrap();
            prop_assert!(sol.model_value <= f_center + 1e-12 * f_center.abs().max(1.0));
            // Certificate is recomputable from the public surface.
            let check = model_gradient(&inst.oracle, &center, &sol.z).unwrap().norm();
            prop_assert!((check - sol.stationarity_residual).abs() <= 1e-9 * check.max(1.0));
        }
    }
}
