//! Central finite-difference oracle for tape-built functions.

use nalgebra::DMatrix;

use super::tape::{GradMatrix, NodeId, Tape};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Outcome of comparing reverse-mode derivatives against central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub analytic: GradMatrix,
    pub numeric: GradMatrix,
    pub max_abs_err: f64,
    /// `|ad - fd| / max(|fd|, 1e-3)`, maximized over entries.
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Central differences of an arbitrary vector function.
pub fn central_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> GradMatrix {
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        let up = f(&xp);
        xp[k] = x[k] - h;
        let dn = f(&xp);
        xp[k] = x[k];
        for r in 0..m {
            j[(r, k)] = (up[r] - dn[r]) / (2.0 * h);
        }
    }
    j
}

/// Build `f` on a fresh tape at `x` (a column-vector input), differentiate
/// in reverse mode, and compare with central differences of the forward value.
///
/// Never panics on a bad match; the report says whether `max_rel_err <= tol`.
pub fn fd_check<F>(f: F, x: &[f64], tol: f64) -> FdReport
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    let forward = |xs: &[f64]| -> Vec<f64> {
        let mut t = Tape::new();
        let xi = t.input_vector(xs);
        let y = f(&mut t, xi);
        t.value(y).iter().copied().collect()
    };
    let mut t = Tape::new();
    let xi = t.input_vector(x);
    let y = f(&mut t, xi);
    let analytic = t
        .jacobian(y, xi)
        .unwrap_or_else(|_| DMatrix::from_element(t.len_of(y), x.len(), f64::NAN));
    let numeric = central_jacobian(forward, x, FD_STEP);
    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let abs = (a - n).abs();
        let rel = abs / n.abs().max(1e-3);
        // NaN compares false with max; force it through.
        max_abs_err = if abs.is_nan() { f64::NAN } else { max_abs_err.max(abs) };
        max_rel_err = if rel.is_nan() || max_rel_err.is_nan() {
            f64::NAN
        } else {
            max_rel_err.max(rel)
        };
    }
    let passed = max_rel_err <= tol;
    FdReport {
        analytic,
        numeric,
        max_abs_err,
        max_rel_err,
        passed,
    }
}
