//! Seeded instance families with known ground truth.
//!
//! Three families cover the benchmark matrix:
//!
//! * `power`: f(x) = sum_i |a_i.x - b_i|^(p+1) / (p+1) with a planted
//!   minimizer, so f* = 0 exactly. The exponent tracks the oracle order, which
//!   makes the order-p derivative exactly p!-Lipschitz per unit row.
//! * `quadratic`: the same construction with exponent 2 regardless of oracle
//!   order. Derivatives above the second vanish, so any positive constant is
//!   a valid L_p; the stored one keeps step sizes on the same scale as the
//!   power family.
//! * `logsumexp`: f(x) = log sum_i exp(a_i.x - b_i) with mean-centered rows,
//!   which guarantees a finite minimizer; ground truth is located by a damped
//!   Newton solve to 1e-12 gradient norm.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::AtdError;
use crate::Result;

use super::{InstanceDescriptor, Objective, Point, ProblemInstance, ProblemOracle};

/// Residual-power objective: f(x) = sum_i |a_i.x - b_i|^(q+1) / (q+1).
///
/// `exponent` is q above. q = 1 is linear least squares; q = 2 has a
/// Lipschitz Hessian but no third derivative at zero residual; q = 3 is a
/// smooth quartic.
pub struct PowerRegression {
    rows: DMatrix<f64>,
    shifts: DVector<f64>,
    exponent: usize,
}

impl PowerRegression {
    pub fn new(rows: DMatrix<f64>, shifts: DVector<f64>, exponent: usize) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(AtdError::InvalidArgument("power regression needs at least one row and one column".into()));
        }
        if rows.nrows() != shifts.len() {
            return Err(AtdError::InvalidArgument("row count and shift count differ".into()));
        }
        if !(1..=3).contains(&exponent) {
            return Err(AtdError::InvalidArgument(format!("unsupported residual exponent {exponent}")));
        }
        Ok(Self { rows, shifts, exponent })
    }

    fn residuals(&self, x: &Point) -> DVector<f64> {
        &self.rows * x - &self.shifts
    }

    // phi(t) = |t|^(q+1) / (q+1) and its derivatives. phi''' uses the
    // almost-everywhere value (0 at a kink), which only matters for q = 2
    // instances queried at order 3 exactly on a kink.
    fn phi(&self, t: f64) -> f64 {
        t.abs().powi(self.exponent as i32 + 1) / (self.exponent as f64 + 1.0)
    }

    fn phi1(&self, t: f64) -> f64 {
        t.abs().powi(self.exponent as i32 - 1) * t
    }

    fn phi2(&self, t: f64) -> f64 {
        self.exponent as f64 * t.abs().powi(self.exponent as i32 - 1)
    }

    fn phi3(&self, t: f64) -> f64 {
        let q = self.exponent as f64;
        match self.exponent {
            1 => 0.0,
            2 => q * (q - 1.0) * t.signum() * if t == 0.0 { 0.0 } else { 1.0 },
            _ => q * (q - 1.0) * t.abs().powi(self.exponent as i32 - 3) * t,
        }
    }
}

impl Objective for PowerRegression {
    fn dimension(&self) -> usize {
        self.rows.ncols()
    }

    fn value(&self, x: &Point) -> f64 {
        self.residuals(x).iter().map(|&r| self.phi(r)).sum()
    }

    fn gradient(&self, x: &Point) -> Point {
        let r = self.residuals(x).map(|t| self.phi1(t));
        self.rows.tr_mul(&r)
    }

    fn hessian_apply(&self, x: &Point, v: &Point) -> Point {
        let r = self.residuals(x);
        let av = &self.rows * v;
        let weighted = DVector::from_fn(r.len(), |i, _| self.phi2(r[i]) * av[i]);
        self.rows.tr_mul(&weighted)
    }

    fn third_apply(&self, x: &Point, u: &Point, v: &Point) -> Point {
        let r = self.residuals(x);
        let au = &self.rows * u;
        let av = &self.rows * v;
        let weighted = DVector::from_fn(r.len(), |i, _| self.phi3(r[i]) * au[i] * av[i]);
        self.rows.tr_mul(&weighted)
    }
}

/// Soft-max potential: f(x) = log sum_i exp(a_i.x - b_i).
pub struct LogSumExp {
    rows: DMatrix<f64>,
    shifts: DVector<f64>,
}

impl LogSumExp {
    pub fn new(rows: DMatrix<f64>, shifts: DVector<f64>) -> Result<Self> {
        if rows.nrows() < 2 {
            return Err(AtdError::InvalidArgument(
                "logsumexp needs at least two rows; with one row the objective is affine and unbounded below".into(),
            ));
        }
        if rows.nrows() != shifts.len() {
            return Err(AtdError::InvalidArgument("row count and shift count differ".into()));
        }
        Ok(Self { rows, shifts })
    }

    /// Soft-max weights at x, computed with the usual max-shift so large
    /// arguments cannot overflow.
    fn weights(&self, x: &Point) -> (DVector<f64>, f64) {
        let t = &self.rows * x - &self.shifts;
        let mx = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w = t.map(|ti| (ti - mx).exp());
        let s: f64 = w.iter().sum();
        w /= s;
        (w, mx + s.ln())
    }

    fn max_row_norm(&self) -> f64 {
        (0..self.rows.nrows())
            .map(|i| self.rows.row(i).norm())
            .fold(0.0, f64::max)
    }
}

impl Objective for LogSumExp {
    fn dimension(&self) -> usize {
        self.rows.ncols()
    }

    fn value(&self, x: &Point) -> f64 {
        self.weights(x).1
    }

    fn gradient(&self, x: &Point) -> Point {
        let (w, _) = self.weights(x);
        self.rows.tr_mul(&w)
    }

    // The directional derivatives of log-sum-exp are cumulants of the row
    // activations under the soft-max weights; through third order, cumulants
    // equal central moments, which is what the two applications below compute.
    fn hessian_apply(&self, x: &Point, v: &Point) -> Point {
        let (w, _) = self.weights(x);
        let r = &self.rows * v;
        let mean = w.dot(&r);
        let weighted = DVector::from_fn(r.len(), |i, _| w[i] * (r[i] - mean));
        self.rows.tr_mul(&weighted)
    }

    fn third_apply(&self, x: &Point, u: &Point, v: &Point) -> Point {
        let (w, _) = self.weights(x);
        let s = &self.rows * u;
        let r = &self.rows * v;
        let ms = w.dot(&s);
        let mr = w.dot(&r);
        let c = DVector::from_fn(s.len(), |i, _| w[i] * (s[i] - ms) * (r[i] - mr));
        let total: f64 = c.iter().sum();
        let mean_row = self.rows.tr_mul(&w);
        self.rows.tr_mul(&c) - mean_row.scale(total)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// One standard normal draw via Box-Muller; keeps the dependency surface to
/// plain uniform sampling, which the seeded generator provides portably.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| standard_normal(rng))
}

/// Rows drawn as unit-norm gaussian directions: row norms are exactly 1, so
/// the conservative constants below have a clean closed form.
fn unit_rows<R: Rng>(rng: &mut R, m: usize, d: usize) -> DMatrix<f64> {
    let mut rows = DMatrix::zeros(m, d);
    for i in 0..m {
        let mut g = gaussian_vector(rng, d);
        let mut n = g.norm();
        while n < 1e-12 {
            g = gaussian_vector(rng, d);
            n = g.norm();
        }
        g /= n;
        rows.set_row(i, &g.transpose());
    }
    rows
}

fn planted_target<R: Rng>(rng: &mut R, d: usize, target_norm: f64) -> Point {
    if target_norm == 0.0 {
        return Point::zeros(d);
    }
    let mut g = gaussian_vector(rng, d);
    let mut n = g.norm();
    while n < 1e-12 {
        g = gaussian_vector(rng, d);
        n = g.norm();
    }
    g * (target_norm / n)
}

fn check_family_params(d: usize, m: usize, p: usize, target_norm: f64) -> Result<()> {
    if d == 0 || m == 0 {
        return Err(AtdError::InvalidArgument("d and m must be at least 1".into()));
    }
    if !(1..=3).contains(&p) {
        return Err(AtdError::InvalidArgument(format!("order p must be 1, 2, or 3, got {p}")));
    }
    if !(target_norm.is_finite() && target_norm >= 0.0) {
        return Err(AtdError::InvalidArgument(format!("target_norm must be finite and nonnegative, got {target_norm}")));
    }
    Ok(())
}

/// Seeded power-regression instance with a planted minimizer of the requested
/// norm. The residual exponent equals the oracle order, f* = 0 exactly, and
/// L_p = p! * m bounds the order-p derivative variation row by row.
pub fn make_power_regression(d: usize, m: usize, p: usize, seed: u64, target_norm: f64) -> Result<ProblemInstance> {
    check_family_params(d, m, p, target_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = unit_rows(&mut rng, m, d);
    let x_star = planted_target(&mut rng, d, target_norm);
    let shifts = &rows * &x_star;
    let lipschitz = factorial(p) * m as f64;
    let l1 = if p == 1 { Some(m as f64) } else { None };
    let objective = Arc::new(PowerRegression::new(rows, shifts, p)?);
    let oracle = ProblemOracle::new(objective, p, lipschitz)?;
    let descriptor = InstanceDescriptor {
        family: "power".into(),
        d,
        m,
        p,
        seed,
        target_norm: Some(target_norm),
        l_p: lipschitz,
        f_star: Some(0.0),
    };
    ProblemInstance::new(oracle, Some(x_star), Some(0.0), l1, descriptor)
}

/// Seeded least-squares instance (residual exponent 2) exposed at an
/// arbitrary oracle order. Derivatives of order >= 3 are identically zero, so
/// the stored L_p is trivially valid for p >= 2; at p = 1 the row-sum bound
/// dominates the largest Hessian eigenvalue.
pub fn make_quadratic(d: usize, m: usize, p: usize, seed: u64, target_norm: f64) -> Result<ProblemInstance> {
    check_family_params(d, m, p, target_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = unit_rows(&mut rng, m, d);
    let x_star = planted_target(&mut rng, d, target_norm);
    let shifts = &rows * &x_star;
    let lipschitz = factorial(p) * m as f64;
    let objective = Arc::new(PowerRegression::new(rows, shifts, 1)?);
    let oracle = ProblemOracle::new(objective, p, lipschitz)?;
    let descriptor = InstanceDescriptor {
        family: "quadratic".into(),
        d,
        m,
        p,
        seed,
        target_norm: Some(target_norm),
        l_p: lipschitz,
        f_star: Some(0.0),
    };
    ProblemInstance::new(oracle, Some(x_star), Some(0.0), Some(m as f64), descriptor)
}

/// Derivative-variation bounds for log-sum-exp in terms of the largest row
/// norm M: the directional derivatives are cumulants of row activations, and
/// |kappa_2| <= M^2, |kappa_3| <= 2 M^3, |kappa_4| <= 4 M^4.
fn logsumexp_lipschitz(p: usize, max_row_norm: f64) -> f64 {
    let m = max_row_norm;
    match p {
        1 => m * m,
        2 => 2.0 * m * m * m,
        _ => 4.0 * m * m * m * m,
    }
}

/// Seeded log-sum-exp instance. Rows are mean-centered gaussians, which puts
/// the zero vector strictly inside their convex hull (almost surely, given
/// m >= d + 1) and so guarantees the minimizer exists; it is then located by
/// the trusted Newton solve below.
pub fn make_logsumexp(d: usize, m: usize, p: usize, seed: u64) -> Result<ProblemInstance> {
    check_family_params(d, m, p, 0.0)?;
    if m < 2 {
        return Err(AtdError::InvalidArgument(
            "logsumexp needs m >= 2; a single row is affine and unbounded below".into(),
        ));
    }
    if m < d + 1 {
        return Err(AtdError::InvalidArgument(format!(
            "logsumexp needs m >= d + 1 rows for a finite minimizer (got m = {m}, d = {d})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = DMatrix::zeros(m, d);
    for i in 0..m {
        rows.set_row(i, &gaussian_vector(&mut rng, d).transpose());
    }
    let mean = rows.row_mean();
    for i in 0..m {
        let centered = rows.row(i) - &mean;
        rows.set_row(i, &centered);
    }
    let shifts = gaussian_vector(&mut rng, m);
    logsumexp_instance(rows, shifts, p, seed)
}

/// Log-sum-exp instance from explicit rows, for hand-built test geometries.
pub fn logsumexp_from_rows(rows: DMatrix<f64>, shifts: DVector<f64>, p: usize) -> Result<ProblemInstance> {
    check_family_params(rows.ncols(), rows.nrows(), p, 0.0)?;
    logsumexp_instance(rows, shifts, p, 0)
}

fn logsumexp_instance(rows: DMatrix<f64>, shifts: DVector<f64>, p: usize, seed: u64) -> Result<ProblemInstance> {
    let d = rows.ncols();
    let m = rows.nrows();
    let objective = Arc::new(LogSumExp::new(rows, shifts)?);
    let max_row_norm = objective.max_row_norm();
    if max_row_norm == 0.0 {
        return Err(AtdError::InvalidArgument("logsumexp rows are all zero".into()));
    }
    let lipschitz = logsumexp_lipschitz(p, max_row_norm);
    let l1 = Some(max_row_norm * max_row_norm);
    let x_star = newton_minimize(objective.as_ref(), &Point::zeros(d), 1e-12, 200)?;
    let f_star = objective.value(&x_star);
    let oracle = ProblemOracle::new(objective, p, lipschitz)?;
    let descriptor = InstanceDescriptor {
        family: "logsumexp".into(),
        d,
        m,
        p,
        seed,
        target_norm: None,
        l_p: lipschitz,
        f_star: Some(f_star),
    };
    ProblemInstance::new(oracle, Some(x_star), Some(f_star), l1, descriptor)
}

/// Power-regression instance from explicit rows with caller-supplied order
/// and Lipschitz constant. Intended for hand-built 1D and 2D test problems;
/// no ground truth is attached.
pub fn power_instance_from_rows(
    rows: DMatrix<f64>,
    shifts: DVector<f64>,
    exponent: usize,
    order: usize,
    lipschitz: f64,
) -> Result<ProblemInstance> {
    let d = rows.ncols();
    let m = rows.nrows();
    let objective = Arc::new(PowerRegression::new(rows, shifts, exponent)?);
    let oracle = ProblemOracle::new(objective, order, lipschitz)?;
    let descriptor = InstanceDescriptor {
        family: "power".into(),
        d,
        m,
        p: order,
        seed: 0,
        target_norm: None,
        l_p: lipschitz,
        f_star: None,
    };
    ProblemInstance::new(oracle, None, None, None, descriptor)
}

/// Damped Newton minimization of a smooth strictly convex objective, used as
/// the trusted reference solver when an instance family cannot plant its
/// minimizer algebraically. Levenberg-style shifts keep the factorization
/// alive near flat regions; an Armijo backtrack keeps descent monotone.
pub(crate) fn newton_minimize(
    objective: &dyn Objective,
    start: &Point,
    grad_tol: f64,
    max_iter: usize,
) -> Result<Point> {
    let d = objective.dimension();
    let mut x = start.clone();
    let mut fx = objective.value(&x);
    for _ in 0..max_iter {
        let g = objective.gradient(&x);
        if g.norm() <= grad_tol {
            return Ok(x);
        }
        let mut h = DMatrix::zeros(d, d);
        for j in 0..d {
            let e = Point::from_fn(d, |i, _| if i == j { 1.0 } else { 0.0 });
            h.set_column(j, &objective.hessian_apply(&x, &e));
        }
        h = (h.clone() + h.transpose()).scale(0.5);
        let scale = h.diagonal().amax().max(1e-12);
        let mut shift = 0.0;
        let step = loop {
            let shifted = &h + DMatrix::identity(d, d).scale(shift);
            if let Some(chol) = shifted.cholesky() {
                break chol.solve(&(-&g));
            }
            shift = if shift == 0.0 { 1e-12 * scale } else { shift * 10.0 };
            if shift > 1e12 * scale {
                return Err(AtdError::Estimation("newton_minimize: hessian factorization failed".into()));
            }
        };
        // Near the optimum, f-value comparisons drown in rounding noise while
        // the Newton step still contracts the gradient quadratically, so a
        // full step that shrinks the gradient norm is accepted outright.
        let full = &x + &step;
        let g_full = objective.gradient(&full);
        if g_full.norm() <= 0.9 * g.norm() {
            x = full;
            fx = objective.value(&x);
            continue;
        }
        let mut t = 1.0;
        let slope = g.dot(&step);
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &x + step.scale(t);
            let fc = objective.value(&cand);
            if fc <= fx + 1e-4 * t * slope {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(AtdError::Estimation("newton_minimize: line search stalled".into()));
        }
    }
    let g = objective.gradient(&x);
    if g.norm() <= grad_tol {
        Ok(x)
    } else {
        Err(AtdError::Estimation(format!(
            "newton_minimize: gradient norm {:.3e} above tolerance {grad_tol:.3e} after {max_iter} iterations",
            g.norm()
        )))
    }
}
