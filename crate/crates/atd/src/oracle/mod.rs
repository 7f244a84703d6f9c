//! Problem oracles: Taylor-expansion data through directional applicators.
//!
//! An [`Objective`] supplies raw derivative actions (gradient, Hessian-vector,
//! third-derivative bilinear applications). A [`ProblemOracle`] wraps one with
//! its expansion order `p`, the Lipschitz constant of the p-th derivative, and
//! thread-safe call counters, and exposes the Taylor model operations the
//! solvers consume. Order-p tensors are never materialized; everything is a
//! directional application, so a query costs O(m d) for the built-in families.

mod families;
mod validate;

pub use families::{
    logsumexp_from_rows, make_logsumexp, make_power_regression, make_quadratic,
    power_instance_from_rows, LogSumExp, PowerRegression,
};
pub use validate::{central_diff_gradient, validate_oracle, ValidationReport};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::AtdError;
use crate::Result;

/// Dense point in R^d. All solver state lives in this representation.
pub type Point = DVector<f64>;

/// Raw derivative actions of a smooth convex function.
///
/// Implementations must be pure: evaluation is read-only and safe to call
/// concurrently. `third_apply` is only ever invoked when the enclosing oracle
/// has order 3; order-1 and order-2 objectives may return zeros.
pub trait Objective: Send + Sync {
    fn dimension(&self) -> usize;
    /// f(x)
    fn value(&self, x: &Point) -> f64;
    /// grad f(x)
    fn gradient(&self, x: &Point) -> Point;
    /// Hessian-vector product (D^2 f)(x)[v]
    fn hessian_apply(&self, x: &Point, v: &Point) -> Point;
    /// Third-derivative bilinear application (D^3 f)(x)[u, v, .] as a vector.
    fn third_apply(&self, x: &Point, u: &Point, v: &Point) -> Point;
}

/// Cumulative query counts, one per query kind plus the expansion count.
///
/// `expansions` counts distinct consecutive query centers: repeated queries at
/// one center are a single oracle call, matching how the per-iteration call
/// budget is accounted.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct CallCounts {
    pub expansions: u64,
    pub values: u64,
    pub gradients: u64,
    pub taylor_values: u64,
    pub taylor_grads: u64,
    pub taylor_hess_applies: u64,
}

#[derive(Debug, Default)]
struct CallCounters {
    expansions: AtomicU64,
    values: AtomicU64,
    gradients: AtomicU64,
    taylor_values: AtomicU64,
    taylor_grads: AtomicU64,
    taylor_hess_applies: AtomicU64,
    last_center: Mutex<Option<Vec<f64>>>,
}

impl CallCounters {
    fn note_center(&self, center: &Point) {
        let mut guard = self.last_center.lock().expect("counter mutex poisoned");
        let same = guard
            .as_ref()
            .map(|prev| prev.len() == center.len() && prev.iter().zip(center.iter()).all(|(a, b)| a == b))
            .unwrap_or(false);
        if !same {
            *guard = Some(center.as_slice().to_vec());
            self.expansions.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn snapshot(&self) -> CallCounts {
        CallCounts {
            expansions: self.expansions.load(Ordering::Relaxed),
            values: self.values.load(Ordering::Relaxed),
            gradients: self.gradients.load(Ordering::Relaxed),
            taylor_values: self.taylor_values.load(Ordering::Relaxed),
            taylor_grads: self.taylor_grads.load(Ordering::Relaxed),
            taylor_hess_applies: self.taylor_hess_applies.load(Ordering::Relaxed),
        }
    }
}

/// A p-th order Taylor oracle for one objective.
///
/// Invariants: `1 <= order <= 3`, `lipschitz > 0` and finite, and `lipschitz`
/// is a valid Lipschitz constant for the order-p derivative of the wrapped
/// objective (the constructors of the built-in families guarantee this;
/// [`validate_oracle`] spot-checks it).
pub struct ProblemOracle {
    objective: Arc<dyn Objective>,
    order: usize,
    dimension: usize,
    lipschitz: f64,
    counters: CallCounters,
}

impl ProblemOracle {
    pub fn new(objective: Arc<dyn Objective>, order: usize, lipschitz: f64) -> Result<Self> {
        if !(1..=3).contains(&order) {
            return Err(AtdError::InvalidArgument(format!(
                "expansion order must be 1, 2, or 3, got {order}"
            )));
        }
        if !(lipschitz.is_finite() && lipschitz > 0.0) {
            return Err(AtdError::InvalidArgument(format!(
                "lipschitz constant must be finite and positive, got {lipschitz}"
            )));
        }
        let dimension = objective.dimension();
        if dimension == 0 {
            return Err(AtdError::InvalidArgument("dimension must be at least 1".into()));
        }
        Ok(Self { objective, order, dimension, lipschitz, counters: CallCounters::default() })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Lipschitz constant of the order-p derivative.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn call_counts(&self) -> CallCounts {
        self.counters.snapshot()
    }

    fn check_point(&self, name: &str, x: &Point) -> Result<()> {
        if x.len() != self.dimension {
            return Err(AtdError::InvalidArgument(format!(
                "{name}: dimension mismatch (expected {}, got {})",
                self.dimension,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AtdError::InvalidArgument(format!("{name}: non-finite entry")));
        }
        Ok(())
    }

    /// True objective value f(x).
    pub fn value(&self, x: &Point) -> Result<f64> {
        self.check_point("value", x)?;
        self.counters.note_center(x);
        self.counters.values.fetch_add(1, Ordering::Relaxed);
        Ok(self.objective.value(x))
    }

    /// True gradient grad f(x).
    pub fn true_gradient(&self, x: &Point) -> Result<Point> {
        self.check_point("true_gradient", x)?;
        self.counters.note_center(x);
        self.counters.gradients.fetch_add(1, Ordering::Relaxed);
        Ok(self.objective.gradient(x))
    }

    /// Order-p Taylor model value at `y`, expanded around `center`.
    pub fn taylor_value(&self, center: &Point, y: &Point) -> Result<f64> {
        self.check_point("taylor_value center", center)?;
        self.check_point("taylor_value y", y)?;
        self.counters.note_center(center);
        self.counters.taylor_values.fetch_add(1, Ordering::Relaxed);
        let u = y - center;
        let mut total = self.objective.value(center);
        total += self.objective.gradient(center).dot(&u);
        if self.order >= 2 {
            total += 0.5 * self.objective.hessian_apply(center, &u).dot(&u);
        }
        if self.order >= 3 {
            total += self.objective.third_apply(center, &u, &u).dot(&u) / 6.0;
        }
        Ok(total)
    }

    /// Gradient of the order-p Taylor model at `y`, taken in `y`.
    pub fn taylor_grad(&self, center: &Point, y: &Point) -> Result<Point> {
        self.check_point("taylor_grad center", center)?;
        self.check_point("taylor_grad y", y)?;
        self.counters.note_center(center);
        self.counters.taylor_grads.fetch_add(1, Ordering::Relaxed);
        let u = y - center;
        let mut g = self.objective.gradient(center);
        if self.order >= 2 {
            g += self.objective.hessian_apply(center, &u);
        }
        if self.order >= 3 {
            g += self.objective.third_apply(center, &u, &u).scale(0.5);
        }
        Ok(g)
    }

    /// Hessian (in `y`) of the order-p Taylor model, applied to `v`.
    pub fn taylor_hess_apply(&self, center: &Point, y: &Point, v: &Point) -> Result<Point> {
        self.check_point("taylor_hess_apply center", center)?;
        self.check_point("taylor_hess_apply y", y)?;
        self.check_point("taylor_hess_apply v", v)?;
        self.counters.note_center(center);
        self.counters.taylor_hess_applies.fetch_add(1, Ordering::Relaxed);
        if self.order == 1 {
            return Ok(Point::zeros(self.dimension));
        }
        let mut h = self.objective.hessian_apply(center, v);
        if self.order >= 3 {
            let u = y - center;
            h += self.objective.third_apply(center, &u, v);
        }
        Ok(h)
    }
}

impl std::fmt::Debug for ProblemOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemOracle")
            .field("order", &self.order)
            .field("dimension", &self.dimension)
            .field("lipschitz", &self.lipschitz)
            .field("counts", &self.counters.snapshot())
            .finish()
    }
}

/// Serialized instance description, written next to benchmark results.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceDescriptor {
    pub family: String,
    pub d: usize,
    pub m: usize,
    pub p: usize,
    pub seed: u64,
    pub target_norm: Option<f64>,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    pub f_star: Option<f64>,
}

/// A benchmark problem: the oracle plus whatever ground truth is known.
///
/// The solver start point is always the origin; constructed instances are
/// arranged so that is meaningful (planted minimizers are measured from 0).
pub struct ProblemInstance {
    pub oracle: ProblemOracle,
    pub x_star: Option<Point>,
    pub f_star: Option<f64>,
    pub norm_x_star: Option<f64>,
    /// Global first-order smoothness constant, when one exists. Gradient
    /// descent and AGD baselines require it.
    pub l1: Option<f64>,
    pub descriptor: InstanceDescriptor,
}

impl ProblemInstance {
    /// Assembles an instance, checking that claimed ground truth is coherent:
    /// `f_star` must match the oracle at `x_star` to 1e-10 relative when both
    /// are present.
    pub fn new(
        oracle: ProblemOracle,
        x_star: Option<Point>,
        f_star: Option<f64>,
        l1: Option<f64>,
        descriptor: InstanceDescriptor,
    ) -> Result<Self> {
        let norm_x_star = x_star.as_ref().map(|x| x.norm());
        if let (Some(xs), Some(fs)) = (&x_star, f_star) {
            // Bypass the counting wrapper: ground-truth bookkeeping is not an
            // oracle call made by any solver.
            oracle.check_point("x_star", xs)?;
            let at = oracle.objective.value(xs);
            let scale = 1.0_f64.max(fs.abs());
            if (at - fs).abs() > 1e-10 * scale {
                return Err(AtdError::InvalidArgument(format!(
                    "f_star {fs} disagrees with oracle value {at} at x_star"
                )));
            }
        }
        Ok(Self { oracle, x_star, f_star, norm_x_star, l1, descriptor })
    }

    pub fn dimension(&self) -> usize {
        self.oracle.dimension()
    }

    pub fn order(&self) -> usize {
        self.oracle.order()
    }

    /// Optimality gap of `value`, when f* is known.
    pub fn gap_of(&self, value: f64) -> Option<f64> {
        self.f_star.map(|fs| value - fs)
    }
}

impl std::fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("descriptor", &self.descriptor)
            .field("norm_x_star", &self.norm_x_star)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // f(t) = |t|^3 / 6 as a power-regression row: a = 2^(-1/3) gives
    // |a t|^3 / 3 = |t|^3 / 6, with stored L_2 = 2 * |a|^3 = 1 matching the
    // true Lipschitz constant of f'' = |t|.
    fn cube_sixth(order: usize) -> ProblemInstance {
        let a = 2.0_f64.powf(-1.0 / 3.0);
        power_instance_from_rows(
            nalgebra::DMatrix::from_row_slice(1, 1, &[a]),
            nalgebra::DVector::from_element(1, 0.0),
            2,
            order,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn taylor_value_first_order_is_tangent_line() {
        // f(t) = t^2 via a quadratic row with |a| = sqrt(2).
        let inst = power_instance_from_rows(
            nalgebra::DMatrix::from_row_slice(1, 1, &[2.0_f64.sqrt()]),
            nalgebra::DVector::from_element(1, 0.0),
            1,
            1,
            2.0,
        )
        .unwrap();
        let x = Point::from_element(1, 0.0);
        let y = Point::from_element(1, 1.0);
        let m = inst.oracle.taylor_value(&x, &y).unwrap();
        assert_relative_eq!(m, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn taylor_value_second_order_exact_on_quadratics() {
        let inst = make_quadratic(4, 7, 2, 42, 1.0).unwrap();
        let x = Point::from_fn(4, |i, _| 0.3 * (i as f64) - 0.5);
        let y = Point::from_fn(4, |i, _| -0.2 * (i as f64) + 0.9);
        let model = inst.oracle.taylor_value(&x, &y).unwrap();
        let truth = inst.oracle.value(&y).unwrap();
        assert_relative_eq!(model, truth, max_relative = 1e-12);
    }

    #[test]
    fn taylor_value_cube_sixth_worked_example() {
        let inst = cube_sixth(2);
        let x = Point::from_element(1, 1.0);
        let y = Point::from_element(1, 2.0 / 3.0);
        // f(1) + f'(1)(-1/3) + f''(1)/2 * (1/9) = 1/6 - 1/6 + 1/18
        let m = inst.oracle.taylor_value(&x, &y).unwrap();
        assert_relative_eq!(m, 1.0 / 18.0, epsilon = 1e-14);
    }

    #[test]
    fn taylor_grad_at_center_is_gradient() {
        let inst = make_power_regression(5, 9, 3, 7, 1.0).unwrap();
        let x = Point::from_fn(5, |i, _| (i as f64) * 0.1 - 0.2);
        let g = inst.oracle.true_gradient(&x).unwrap();
        let tg = inst.oracle.taylor_grad(&x, &x).unwrap();
        assert_relative_eq!((g - tg).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn taylor_grad_cube_sixth_worked_example() {
        let inst = cube_sixth(2);
        let x = Point::from_element(1, 1.0);
        let y = Point::from_element(1, 2.0 / 3.0);
        // f'(1) + f''(1)(y - x) = 1/2 - 1/3 = 1/6
        let g = inst.oracle.taylor_grad(&x, &y).unwrap();
        assert_relative_eq!(g[0], 1.0 / 6.0, epsilon = 1e-14);
    }

    #[test]
    fn taylor_hess_apply_linear_in_offset_at_order_three() {
        // f(t) = |t|^3/6 queried at order 3 away from the kink:
        // model Hessian at y is f''(1) + f'''(1)(y - 1) = 1 + 1 = 2 for y = 2.
        let inst = cube_sixth(3);
        let x = Point::from_element(1, 1.0);
        let y = Point::from_element(1, 2.0);
        let v = Point::from_element(1, 1.0);
        let h = inst.oracle.taylor_hess_apply(&x, &y, &v).unwrap();
        assert_relative_eq!(h[0], 2.0, epsilon = 1e-13);
    }

    #[test]
    fn taylor_hess_apply_order_one_is_zero() {
        let inst = make_quadratic(3, 5, 1, 3, 1.0).unwrap();
        let x = Point::zeros(3);
        let v = Point::from_element(3, 1.0);
        let h = inst.oracle.taylor_hess_apply(&x, &x, &v).unwrap();
        assert_eq!(h.norm(), 0.0);
    }

    #[test]
    fn true_gradient_vanishes_at_planted_minimizer() {
        let inst = make_power_regression(6, 12, 2, 5, 1.0).unwrap();
        let xs = inst.x_star.clone().unwrap();
        let g = inst.oracle.true_gradient(&xs).unwrap();
        assert!(g.norm() <= 1e-10, "gradient at planted minimizer: {}", g.norm());
    }

    #[test]
    fn expansion_counter_counts_distinct_centers_once() {
        let inst = make_quadratic(3, 4, 2, 1, 1.0).unwrap();
        let a = Point::from_element(3, 0.25);
        let b = Point::from_element(3, -1.0);
        let v = Point::from_element(3, 1.0);
        inst.oracle.value(&a).unwrap();
        inst.oracle.taylor_grad(&a, &b).unwrap();
        inst.oracle.taylor_hess_apply(&a, &b, &v).unwrap();
        assert_eq!(inst.oracle.call_counts().expansions, 1);
        inst.oracle.value(&b).unwrap();
        assert_eq!(inst.oracle.call_counts().expansions, 2);
        inst.oracle.taylor_value(&a, &b).unwrap();
        assert_eq!(inst.oracle.call_counts().expansions, 3);
        let counts = inst.oracle.call_counts();
        assert_eq!(counts.values, 2);
        assert_eq!(counts.taylor_grads, 1);
        assert_eq!(counts.taylor_hess_applies, 1);
        assert_eq!(counts.taylor_values, 1);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let inst = make_quadratic(3, 4, 2, 1, 1.0).unwrap();
        let bad = Point::zeros(2);
        assert!(matches!(inst.oracle.value(&bad), Err(AtdError::InvalidArgument(_))));
        let ok = Point::zeros(3);
        assert!(inst.oracle.taylor_value(&bad, &ok).is_err());
        assert!(inst.oracle.taylor_value(&ok, &bad).is_err());
    }

    #[test]
    fn descriptor_roundtrips_through_json() {
        let inst = make_power_regression(10, 20, 2, 11, 1.0).unwrap();
        let text = serde_json::to_string(&inst.descriptor).unwrap();
        assert!(text.contains("\"L_p\""));
        let back: InstanceDescriptor = serde_json::from_str(&text).unwrap();
        assert_eq!(back, inst.descriptor);
    }
}
