//! Cholesky factorization and its reverse-mode rule.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Lower Cholesky factor reading only the lower triangle of `a`.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(Error::Shape {
            op: "cholesky",
            lhs: a.shape(),
            rhs: a.shape(),
        });
    }
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solve `L X = B` for lower-triangular `L`.
pub(crate) fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve `L^T X = B` for lower-triangular `L`.
pub(crate) fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Lower triangle with the diagonal halved.
fn phi(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = a.lower_triangle();
    for i in 0..p.nrows() {
        p[(i, i)] *= 0.5;
    }
    p
}

/// Pull an adjoint `L̄` on the Cholesky factor back to `Σ̄`.
///
/// Uses `Σ̄ = ½ L^{-T} (Φ(LᵀL̄) + Φ(LᵀL̄)ᵀ) L^{-1}`. The result is symmetric:
/// a symmetric perturbation `dΣ` changes the objective by `tr(Σ̄ dΣ)`, so
/// off-diagonal entries carry half of the derivative with respect to the
/// shared off-diagonal value.
pub fn chol_grad(sigma: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if upstream.shape() != sigma.shape() {
        return Err(Error::Shape {
            op: "chol_grad",
            lhs: sigma.shape(),
            rhs: upstream.shape(),
        });
    }
    let l = cholesky_lower(sigma)?;
    let a = l.transpose() * upstream.lower_triangle();
    let p = phi(&a);
    let b = &p + p.transpose();
    // L^{-T} B L^{-1} = L^{-T} (L^{-T} B^T)^T
    let y = solve_lower_transpose(&l, &b);
    let z = solve_lower_transpose(&l, &y.transpose());
    let s = z * 0.5;
    Ok((&s + s.transpose()) * 0.5)
}
