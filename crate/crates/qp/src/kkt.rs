//! Independent KKT residual evaluation.
//!
//! Everything here is recomputed from the problem triplets with plain loops;
//! nothing is shared with the solver's scaled internals.

use crate::{QpProblem, QpSolution};

/// Infinity-norm residuals of the optimality conditions
///
/// ```text
/// P x + q + Aᵀ y + w = 0
/// A x = b,  lower ≤ x ≤ upper
/// w⁺ ⟂ (upper − x),  w⁻ ⟂ (x − lower)
/// ```
///
/// with `w = w⁺ − w⁻` the signed bound multipliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub equality: f64,
    pub bounds: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.equality).max(self.bounds).max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

pub fn check_kkt(qp: &QpProblem, sol: &QpSolution) -> KktReport {
    check_kkt_raw(qp, &sol.x, &sol.y_eq, &sol.w_bound)
}

pub fn check_kkt_raw(qp: &QpProblem, x: &[f64], y: &[f64], w: &[f64]) -> KktReport {
    let n = qp.num_vars();
    assert_eq!(x.len(), n, "primal dimension");
    assert_eq!(y.len(), qp.num_eq(), "equality multiplier dimension");
    assert_eq!(w.len(), n, "bound multiplier dimension");

    let mut grad = qp.q.clone();
    for &(i, j, v) in &qp.p.entries {
        grad[i] += v * x[j];
        if i != j {
            grad[j] += v * x[i];
        }
    }
    for &(i, j, v) in &qp.a.entries {
        grad[j] += v * y[i];
    }
    let mut stationarity = 0.0f64;
    for j in 0..n {
        stationarity = stationarity.max((grad[j] + w[j]).abs());
    }

    let mut ax = vec![0.0; qp.num_eq()];
    for &(i, j, v) in &qp.a.entries {
        ax[i] += v * x[j];
    }
    let equality = ax.iter().zip(&qp.b).map(|(l, r)| (l - r).abs()).fold(0.0, f64::max);

    let mut bounds = 0.0f64;
    let mut complementarity = 0.0f64;
    for j in 0..n {
        let (lo, hi) = (qp.lower[j], qp.upper[j]);
        bounds = bounds.max(lo - x[j]).max(x[j] - hi);
        if w[j] > 0.0 {
            let gap = if hi.is_finite() { (hi - x[j]).abs() * w[j] } else { w[j] };
            complementarity = complementarity.max(gap);
        } else if w[j] < 0.0 {
            let gap = if lo.is_finite() { (x[j] - lo).abs() * -w[j] } else { -w[j] };
            complementarity = complementarity.max(gap);
        }
    }
    KktReport { stationarity, equality, bounds: bounds.max(0.0), complementarity }
}
