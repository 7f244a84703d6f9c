//! Independent checks that an oracle is telling the truth.
//!
//! Everything here goes through the public oracle surface only: values,
//! true gradients, and Taylor queries. The checks are the ones a skeptical
//! consumer could run without access to the family internals:
//!
//! 1. Taylor remainder: |f(y) - T_p(y; x)| <= L_p ||y - x||^(p+1) / (p+1)!
//! 2. Gradient remainder: ||grad f(y) - grad T_p(y; x)|| <= L_p ||y - x||^p / p!
//! 3. The reported gradient matches central differences of the value.
//! 4. The Taylor operators are internally consistent: differentiating the
//!    model value numerically reproduces the model gradient, and likewise the
//!    model gradient reproduces the model Hessian action.
//!
//! Checks 1 and 2 are how an overstated smoothness constant gets caught: on
//! the residual-power family the remainder bound is tight, so halving L_p
//! pushes the observed ratio to about 2.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::AtdError;
use crate::Result;

use super::{Point, ProblemOracle};

/// Central-difference gradient of a scalar function, one coordinate at a
/// time. Shared by the validator and by tests that need a reference gradient
/// for ad hoc functions.
pub fn central_diff_gradient<F: Fn(&Point) -> f64>(f: F, x: &Point, h: f64) -> Point {
    let d = x.len();
    Point::from_fn(d, |i, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Outcome of a validation sweep. Ratios are observed error divided by the
/// advertised bound, so anything materially above 1 means the oracle lied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub radius: f64,
    /// max over samples of |f(y) - T_p(y; x)| / (L_p ||y-x||^(p+1) / (p+1)!)
    pub value_remainder_ratio: f64,
    /// max over samples of ||grad f(y) - grad T_p(y; x)|| / (L_p ||y-x||^p / p!)
    pub grad_remainder_ratio: f64,
    /// max relative disagreement between the analytic and finite-difference gradient
    pub fd_gradient_error: f64,
    /// max relative disagreement between model gradient and differenced model value
    pub model_gradient_error: f64,
    /// max relative disagreement between model Hessian action and differenced model gradient
    pub model_hessian_error: f64,
    pub ok: bool,
    pub failures: Vec<String>,
}

const REMAINDER_SLACK: f64 = 1.0 + 1e-6;
const FD_TOL: f64 = 1e-5;

fn ball_point<R: Rng>(rng: &mut R, d: usize, radius: f64) -> Point {
    // Uniform direction, radius scaled by u^(1/d): uniform over the ball.
    let mut g = Point::from_fn(d, |_, _| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    });
    let n = g.norm();
    if n < 1e-12 {
        g = Point::from_element(d, 1.0 / (d as f64).sqrt());
        return g * radius;
    }
    let u: f64 = rng.gen::<f64>();
    g * (radius * u.powf(1.0 / d as f64) / n)
}

/// Sample the oracle at `samples` center/query pairs inside a ball of the
/// given radius and check every contract it advertises. Returns the report
/// even when checks fail (`ok = false`); hard errors are reserved for
/// malformed inputs.
pub fn validate_oracle(
    oracle: &ProblemOracle,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(AtdError::InvalidArgument(format!("validation radius must be positive, got {radius}")));
    }
    if samples == 0 {
        return Err(AtdError::InvalidArgument("validation needs at least one sample".into()));
    }
    let d = oracle.dimension();
    let p = oracle.order();
    let lip = oracle.lipschitz();
    let fact_p: f64 = (1..=p).map(|i| i as f64).product();
    let fact_p1 = fact_p * (p as f64 + 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut report = ValidationReport {
        samples,
        radius,
        value_remainder_ratio: 0.0,
        grad_remainder_ratio: 0.0,
        fd_gradient_error: 0.0,
        model_gradient_error: 0.0,
        model_hessian_error: 0.0,
        ok: true,
        failures: Vec::new(),
    };

    for _ in 0..samples {
        let x = ball_point(&mut rng, d, radius);
        let mut y = ball_point(&mut rng, d, radius);
        if (&y - &x).norm() < 1e-8 * radius {
            y += Point::from_element(d, 0.1 * radius / (d as f64).sqrt());
        }
        let step = (&y - &x).norm();

        let fy = oracle.value(&y)?;
        let ty = oracle.taylor_value(&x, &y)?;
        let value_bound = lip * step.powi(p as i32 + 1) / fact_p1;
        report.value_remainder_ratio = report.value_remainder_ratio.max((fy - ty).abs() / value_bound);

        let gy = oracle.true_gradient(&y)?;
        let tg = oracle.taylor_grad(&x, &y)?;
        let grad_bound = lip * step.powi(p as i32) / fact_p;
        report.grad_remainder_ratio = report.grad_remainder_ratio.max((&gy - &tg).norm() / grad_bound);

        // Finite differences of the true value against the reported gradient.
        let h = 1e-5 * radius.max(1.0);
        let fd = central_diff_gradient(|z| oracle.value(z).expect("value query failed"), &y, h);
        report.fd_gradient_error = report
            .fd_gradient_error
            .max((&fd - &gy).norm() / (1.0 + gy.norm()));

        // The model is a polynomial we assembled ourselves; differencing it
        // must reproduce the model gradient to near machine precision.
        let mfd = central_diff_gradient(|z| oracle.taylor_value(&x, z).expect("model query failed"), &y, h);
        report.model_gradient_error = report
            .model_gradient_error
            .max((&mfd - &tg).norm() / (1.0 + tg.norm()));

        if p >= 2 {
            let v = ball_point(&mut rng, d, 1.0);
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp.axpy(h, &v, 1.0);
            ym.axpy(-h, &v, 1.0);
            let hg = (oracle.taylor_grad(&x, &yp)? - oracle.taylor_grad(&x, &ym)?) / (2.0 * h);
            let hv = oracle.taylor_hess_apply(&x, &y, &v)?;
            report.model_hessian_error = report
                .model_hessian_error
                .max((&hg - &hv).norm() / (1.0 + hv.norm()));
        }
    }

    if report.value_remainder_ratio > REMAINDER_SLACK {
        report.failures.push(format!(
            "value remainder exceeds advertised bound: ratio {:.6e}",
            report.value_remainder_ratio
        ));
    }
    if report.grad_remainder_ratio > REMAINDER_SLACK {
        report.failures.push(format!(
            "gradient remainder exceeds advertised bound: ratio {:.6e}",
            report.grad_remainder_ratio
        ));
    }
    if report.fd_gradient_error > FD_TOL {
        report.failures.push(format!(
            "analytic gradient disagrees with central differences: {:.6e}",
            report.fd_gradient_error
        ));
    }
    if report.model_gradient_error > FD_TOL {
        report.failures.push(format!(
            "taylor gradient disagrees with differenced taylor value: {:.6e}",
            report.model_gradient_error
        ));
    }
    if report.model_hessian_error > FD_TOL {
        report.failures.push(format!(
            "taylor hessian action disagrees with differenced taylor gradient: {:.6e}",
            report.model_hessian_error
        ));
    }
    report.ok = report.failures.is_empty();
    Ok(report)
}
