use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ad::chol_grad;
use crate::error::{Error, Result};
use crate::gaussian::{cholesky_jittered, GaussianParams};
use crate::rollout::{Cost, ExpectedCost};

/// Options for Gaussian shaping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GsConfig {
    /// Subtract the batch importance weighted baseline from the shaped return.
    pub use_lr_baseline: bool,
    /// Draws used when the expected cost has no closed form.
    pub cost_expectation_samples: usize,
}

impl Default for GsConfig {
    fn default() -> Self {
        Self {
            use_lr_baseline: false,
            cost_expectation_samples: 64,
        }
    }
}

impl GsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cost_expectation_samples < 2 {
            return Err(Error::Config("cost_expectation_samples must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-particle shaped signals at one time step.
#[derive(Debug, Clone)]
pub struct GsSignals {
    /// Scalar `g_i` replacing the cost in the return.
    pub g: Vec<f64>,
    /// `P · dE[c]/dx_i`, the pathwise term at particle scale.
    pub direct: Vec<DVector<f64>>,
    /// `μ` and `Σ = E[xxᵀ] − μμᵀ`.
    pub fit: GaussianParams,
    pub expected: ExpectedCost,
}

/// Fit the Gaussian marginal of the particles and turn the expected cost's
/// gradient into per-particle signals:
/// `g_i = dE/dμ·m_i + dE/dΣ : (v_i − 2w_i)` with `m_i = x_i − μ`,
/// `v_i = x_i x_iᵀ − E[xxᵀ]`, `w_i = m_i μᵀ`.
pub fn gs_signals(xs: &[DVector<f64>], cost: &dyn Cost) -> Result<GsSignals> {
    let p = xs.len();
    let d = xs.first().ok_or(Error::TooFewParticles { needed: 1, got: 0 })?.len();
    let mut mu = DVector::zeros(d);
    let mut exx = DMatrix::zeros(d, d);
    for x in xs {
        mu += x;
        exx += x * x.transpose();
    }
    mu /= p as f64;
    exx /= p as f64;
    let mut sigma = &exx - &mu * mu.transpose();
    sigma = (&sigma + sigma.transpose()) * 0.5;
    let fit = GaussianParams { mu, sigma };
    let ec = cost.expected(&fit)?;
    let mut g = Vec::with_capacity(p);
    let mut direct = Vec::with_capacity(p);
    for x in xs {
        let m = x - &fit.mu;
        let v = x * x.transpose() - &exx;
        let w = &m * fit.mu.transpose();
        g.push(ec.dmu.dot(&m) + ec.dsigma.dot(&(v - w * 2.0)));
        direct.push(&ec.dmu + &ec.dsigma * &m * 2.0);
    }
    Ok(GsSignals {
        g,
        direct,
        fit,
        expected: ec,
    })
}

/// `E[1 − exp(−(x−t)ᵀQ(x−t))]` under `N(μ, Σ)` in closed form.
pub fn exp_quadratic_expected_cost(g: &GaussianParams, q: &DMatrix<f64>, target: &DVector<f64>) -> Result<ExpectedCost> {
    let d = g.dim();
    if q.shape() != (d, d) || target.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: target.len(),
        });
    }
    let r = psd_sqrt(q);
    let a = DMatrix::identity(d, d) + &r * &g.sigma * &r * 2.0;
    let lu = a.clone().lu();
    let ainv = lu.try_inverse().ok_or(Error::Singular)?;
    let z = &r * (&g.mu - target);
    let y = &ainv * &z;
    let f = a.determinant().powf(-0.5) * (-z.dot(&y)).exp();
    let ry = &r * &y;
    Ok(ExpectedCost {
        value: 1.0 - f,
        dmu: &ry * (2.0 * f),
        dsigma: (&r * ainv * &r - &ry * ry.transpose() * 2.0) * f,
    })
}

fn psd_sqrt(q: &DMatrix<f64>) -> DMatrix<f64> {
    let is_diag = (0..q.nrows()).all(|i| (0..q.ncols()).all(|j| i == j || q[(i, j)] == 0.0));
    if is_diag {
        return DMatrix::from_diagonal(&q.diagonal().map(|v| v.max(0.0).sqrt()));
    }
    let e = q.clone().symmetric_eigen();
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Reparameterized Monte-Carlo estimate of an expected cost with fixed
/// standard-normal draws `eps`.
pub fn mc_expected_cost(
    f: impl Fn(&DVector<f64>) -> (f64, DVector<f64>),
    g: &GaussianParams,
    eps: &[DVector<f64>],
) -> Result<ExpectedCost> {
    if eps.is_empty() {
        return Err(Error::Config("no Monte-Carlo draws".into()));
    }
    let d = g.dim();
    let l = cholesky_jittered(&g.sigma)?;
    let n = eps.len() as f64;
    let mut value = 0.0;
    let mut dmu = DVector::zeros(d);
    let mut lbar = DMatrix::zeros(d, d);
    for e in eps {
        let (c, dc) = f(&(&g.mu + &l * e));
        value += c;
        dmu += &dc;
        lbar += &dc * e.transpose();
    }
    let sigma_used = &l * l.transpose();
    let dsigma = chol_grad(&sigma_used, &(lbar / n).lower_triangle())?;
    Ok(ExpectedCost {
        value: value / n,
        dmu: dmu / n,
        dsigma,
    })
}
