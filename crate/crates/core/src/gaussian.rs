//! Gaussian toolkit: reparameterized sampling, log-densities and scores,
//! the second-order Gaussian identity, and uniform mixtures.
//!
//! Gradients with respect to a covariance use the symmetric convention: a
//! returned `S` means `d f = tr(S dΣ)` for symmetric perturbations `dΣ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ad::{cholesky_lower, solve_lower, solve_lower_transpose, NodeId, Tape};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn lsolve(l: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(v).expect("cholesky factor has a positive diagonal")
}

fn ltsolve(l: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(v).expect("cholesky factor has a positive diagonal")
}

/// Full-covariance Gaussian parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Log-density with its derivatives in `μ` and (symmetric) `Σ`.
#[derive(Debug, Clone)]
pub struct Score {
    pub logp: f64,
    pub score_mu: DVector<f64>,
    pub score_sigma: DMatrix<f64>,
}

/// Cholesky factor, retrying once with `1e-9·tr(Σ)/d` on the diagonal.
pub fn cholesky_jittered(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match cholesky_lower(sigma) {
        Ok(l) => Ok(l),
        Err(_) => {
            let d = sigma.nrows().max(1) as f64;
            let jitter = (1e-9 * sigma.trace() / d).max(f64::MIN_POSITIVE);
            let mut s = sigma.clone();
            for k in 0..sigma.nrows() {
                s[(k, k)] += jitter;
            }
            log::debug!("cholesky failed; retrying with jitter {jitter:e}");
            cholesky_lower(&s)
        }
    }
}

impl GaussianParams {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
            return Err(Error::Dimension {
                expected: mu.len(),
                got: sigma.nrows(),
            });
        }
        Ok(Self { mu, sigma })
    }

    pub fn isotropic(mu: DVector<f64>, var: f64) -> Self {
        let d = mu.len();
        Self {
            mu,
            sigma: DMatrix::identity(d, d) * var,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn chol(&self) -> Result<DMatrix<f64>> {
        cholesky_jittered(&self.sigma)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        Ok(&self.mu + self.chol()? * eps)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let l = self.chol()?;
        Ok(log_density_with_chol(&self.mu, &l, x))
    }

    pub fn log_density_grad(&self, x: &DVector<f64>) -> Result<Score> {
        log_density_grad(self, x)
    }
}

fn log_density_with_chol(mu: &DVector<f64>, l: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let z = lsolve(l, &(x - mu));
    let logdet: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (z.norm_squared() + logdet + mu.len() as f64 * LN_2PI)
}

/// `log N(x; μ, Σ)`, `Σ⁻¹(x−μ)` and `½(Σ⁻¹rrᵀΣ⁻¹ − Σ⁻¹)`.
pub fn log_density_grad(p: &GaussianParams, x: &DVector<f64>) -> Result<Score> {
    if x.len() != p.dim() {
        return Err(Error::Dimension {
            expected: p.dim(),
            got: x.len(),
        });
    }
    let l = cholesky_lower(&p.sigma).map_err(|_| Error::Singular)?;
    let r = x - &p.mu;
    let logp = log_density_with_chol(&p.mu, &l, x);
    let score_mu = ltsolve(&l, &lsolve(&l, &r));
    let id = DMatrix::identity(p.dim(), p.dim());
    let sinv = solve_lower_transpose(&l, &solve_lower(&l, &id));
    let score_sigma = (&score_mu * score_mu.transpose() - sinv) * 0.5;
    Ok(Score {
        logp,
        score_mu,
        score_sigma,
    })
}

/// A reparameterized draw recorded on a tape, so that `x` can be
/// differentiated with respect to `μ` and `Σ`.
pub struct RpSample {
    pub x: DVector<f64>,
    pub tape: Tape,
    pub mu: NodeId,
    pub sigma: NodeId,
    pub out: NodeId,
}

impl RpSample {
    /// `dx/dμ`.
    pub fn dx_dmu(&self) -> Result<DMatrix<f64>> {
        self.tape.jacobian(self.out, self.mu)
    }

    /// `dx/d vec(Σ)` (column-major), symmetric convention.
    pub fn dx_dsigma(&self) -> Result<DMatrix<f64>> {
        self.tape.jacobian(self.out, self.sigma)
    }
}

/// `x = μ + chol(Σ)·ε` on a fresh tape.
pub fn rp_sample(p: &GaussianParams, eps: &DVector<f64>) -> Result<RpSample> {
    if eps.len() != p.dim() {
        return Err(Error::Dimension {
            expected: p.dim(),
            got: eps.len(),
        });
    }
    let mut tape = Tape::new();
    let mu = tape.input(DMatrix::from_column_slice(p.dim(), 1, p.mu.as_slice()));
    let sigma = tape.input(p.sigma.clone());
    let l = tape.cholesky(sigma)?;
    let e = tape.constant(DMatrix::from_column_slice(p.dim(), 1, eps.as_slice()));
    let le = tape.matmul(l, e);
    let out = tape.add(mu, le);
    let x = DVector::from_column_slice(tape.value(out).as_slice());
    Ok(RpSample {
        x,
        tape,
        mu,
        sigma,
        out,
    })
}

/// Independent per-dimension Gaussian, the fast path used in rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl DiagGaussian {
    pub fn new(mean: DVector<f64>, var: DVector<f64>) -> Self {
        assert_eq!(mean.len(), var.len());
        Self { mean, var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `x = μ + √v·ε`.
    pub fn rp_sample(&self, eps: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |k, _| self.mean[k] + self.var[k].sqrt() * eps[k])
    }

    /// Diagonal of `dx/dv`, i.e. `ε / (2√v)`. `dx/dμ` is the identity.
    pub fn dx_dvar(&self, eps: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |k, _| eps[k] / (2.0 * self.var[k].sqrt()))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        (0..self.dim())
            .map(|k| {
                let r = x[k] - self.mean[k];
                -0.5 * (r * r / self.var[k] + self.var[k].ln() + LN_2PI)
            })
            .sum()
    }

    /// Scores with respect to the mean and the variances.
    pub fn score(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let r = x - &self.mean;
        let dm = r.component_div(&self.var);
        let dv = DVector::from_fn(self.dim(), |k, _| 0.5 * (r[k] * r[k] / self.var[k] - 1.0) / self.var[k]);
        (dm, dv)
    }

    pub fn to_full(&self) -> GaussianParams {
        GaussianParams {
            mu: self.mean.clone(),
            sigma: DMatrix::from_diagonal(&self.var),
        }
    }
}

/// `dE[φ]/dΣ = ½ E[∇²φ]`, estimated from Hessian samples drawn under the
/// Gaussian. Returned as a `d×d` matrix (symmetric convention).
pub fn gaussian_identity_sigma_grad(hessians: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = hessians.first().ok_or(Error::Dimension { expected: 1, got: 0 })?;
    let shape = first.shape();
    let mut acc = DMatrix::zeros(shape.0, shape.1);
    for h in hessians {
        if h.shape() != shape {
            return Err(Error::Dimension {
                expected: shape.0,
                got: h.nrows(),
            });
        }
        acc += h;
    }
    Ok(acc * (0.5 / hessians.len() as f64))
}

/// Uniform mixture `(1/P) Σ_k N(·; μ_k, Σ_k)`.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    pub components: Vec<GaussianParams>,
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mixture_log_density(m: &MixtureParams, x: &DVector<f64>) -> Result<f64> {
    if m.components.is_empty() {
        return Err(Error::Dimension { expected: 1, got: 0 });
    }
    let logs = m
        .components
        .iter()
        .map(|c| c.log_density(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&logs) - (m.components.len() as f64).ln())
}

pub fn mixture_density(m: &MixtureParams, x: &DVector<f64>) -> Result<f64> {
    mixture_log_density(m, x).map(f64::exp)
}

/// Sample mean and covariance of the columns of `xs`. The covariance is
/// divided by `P-1` when `unbiased`, else by `P`.
pub fn fit_moments(xs: &[DVector<f64>], unbiased: bool) -> Result<GaussianParams> {
    let p = xs.len();
    let first = xs.first().ok_or(Error::TooFewParticles { needed: 1, got: 0 })?;
    let d = first.len();
    let denom = if unbiased { p as f64 - 1.0 } else { p as f64 };
    if denom <= 0.0 {
        return Err(Error::TooFewParticles { needed: 2, got: p });
    }
    let mut mu = DVector::zeros(d);
    for x in xs {
        mu += x;
    }
    mu /= p as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for x in xs {
        let r = x - &mu;
        sigma += &r * r.transpose();
    }
    sigma /= denom;
    Ok(GaussianParams { mu, sigma })
}
