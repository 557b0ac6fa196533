//! Particle rollouts through a learned (or stub) dynamics model.
//!
//! Every particle records what the estimators need: the sampled state, the
//! predicted per-dimension Gaussian `ζ`, the noise draw, the cost and its
//! gradient, and the local Jacobians `dζ_t/dx_{t-1}`, `dζ_t/du_{t-1}` and
//! `du_t/dθ`. All noise is drawn up front from one seeded stream, so the
//! result does not depend on how particles are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{cholesky_jittered, fit_moments, DiagGaussian, GaussianParams};

/// States whose magnitude exceeds this are flagged and frozen.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// One-step predictive distribution with its input Jacobians.
#[derive(Debug, Clone)]
pub struct Transition {
    pub next: DiagGaussian,
    pub dmean_dx: DMatrix<f64>,
    pub dmean_du: DMatrix<f64>,
    pub dvar_dx: DMatrix<f64>,
    pub dvar_du: DMatrix<f64>,
}

pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> Transition;
}

/// Deterministic action with its Jacobians.
#[derive(Debug, Clone)]
pub struct Action {
    pub u: DVector<f64>,
    pub du_dx: DMatrix<f64>,
    pub du_dtheta: DMatrix<f64>,
}

pub trait Policy: Sync {
    fn n_params(&self) -> usize;
    fn act(&self, x: &DVector<f64>) -> Action;
}

/// `E[c]` under a Gaussian and its derivatives (symmetric convention in `Σ`).
#[derive(Debug, Clone)]
pub struct ExpectedCost {
    pub value: f64,
    pub dmu: DVector<f64>,
    pub dsigma: DMatrix<f64>,
}

pub trait Cost: Sync {
    /// Cost and gradient at a state.
    fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>);
    /// Expected cost under `N(μ, Σ)`.
    fn expected(&self, g: &GaussianParams) -> Result<ExpectedCost>;
}

#[derive(Debug, Clone)]
pub struct ActionRecord {
    pub u: DVector<f64>,
    pub du_dtheta: DMatrix<f64>,
}

/// Everything recorded when particle `i` moves into `x_t`.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub zeta: DiagGaussian,
    pub eps: DVector<f64>,
    /// The draw from `zeta`.
    pub x_pre: DVector<f64>,
    /// The state carried forward; differs from `x_pre` only under resampling.
    pub x: DVector<f64>,
    /// `dζ_t/dx_{t-1}`, including the path through the policy. Rows are the
    /// means followed by the variances.
    pub dzeta_dx_prev: DMatrix<f64>,
    pub dzeta_du_prev: DMatrix<f64>,
    pub cost: f64,
    pub dcost_dx: DVector<f64>,
    pub diverged: bool,
}

/// Gaussian refit used when resampling at a step.
#[derive(Debug, Clone)]
pub struct ResampleRecord {
    /// Unbiased fit of the pre-resample particles.
    pub fit: GaussianParams,
    pub chol: DMatrix<f64>,
    pub eps: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct ParticleBatch {
    pub x0: Vec<DVector<f64>>,
    /// `actions[t][i]` is `u_t` for `t` in `0..H`.
    pub actions: Vec<Vec<ActionRecord>>,
    /// `steps[t-1][i]` describes `x_t` for `t` in `1..=H`.
    pub steps: Vec<Vec<StepRecord>>,
    pub resample: Vec<Option<ResampleRecord>>,
    pub n_params: usize,
}

impl ParticleBatch {
    pub fn n_particles(&self) -> usize {
        self.x0.len()
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn state_dim(&self) -> usize {
        self.x0.first().map_or(0, |x| x.len())
    }

    /// Particle states at time `t` (`0..=H`).
    pub fn states(&self, t: usize) -> Vec<DVector<f64>> {
        if t == 0 {
            self.x0.clone()
        } else {
            self.steps[t - 1].iter().map(|s| s.x.clone()).collect()
        }
    }

    /// Sample mean and unbiased sample covariance at `t`.
    pub fn moments(&self, t: usize) -> Result<GaussianParams> {
        fit_moments(&self.states(t), true)
    }

    /// `E[x xᵀ]` over particles at `t`.
    pub fn second_moment(&self, t: usize) -> DMatrix<f64> {
        let xs = self.states(t);
        let d = self.state_dim();
        let mut m = DMatrix::zeros(d, d);
        for x in &xs {
            m += x * x.transpose();
        }
        m / xs.len() as f64
    }

    /// Per-particle return `Σ_{t=1}^H c_t`.
    pub fn returns(&self) -> Vec<f64> {
        (0..self.n_particles())
            .map(|i| self.steps.iter().map(|s| s[i].cost).sum())
            .collect()
    }

    /// Monte-Carlo estimate of the objective `E[Σ_{t=1}^H c_t]`.
    pub fn mean_return(&self) -> f64 {
        let r = self.returns();
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn n_diverged(&self) -> usize {
        (0..self.n_particles())
            .filter(|&i| self.steps.iter().any(|s| s[i].diverged))
            .count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    pub particles: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Refit a Gaussian to the particles and resample from it every step.
    pub resample: bool,
}

fn normals(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Sample `P` particle trajectories with ancestral sampling.
pub fn rollout_particles(
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    cost: &dyn Cost,
    start: &GaussianParams,
    cfg: &RolloutConfig,
) -> Result<ParticleBatch> {
    let (p, h, d) = (cfg.particles, cfg.horizon, dynamics.state_dim());
    if p == 0 {
        return Err(Error::TooFewParticles { needed: 1, got: 0 });
    }
    if h == 0 {
        return Err(Error::EmptyHorizon);
    }
    if start.dim() != d {
        return Err(Error::Dimension { expected: d, got: start.dim() });
    }
    if cfg.resample && p < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: p });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps0: Vec<_> = (0..p).map(|_| normals(&mut rng, d)).collect();
    let eps: Vec<Vec<_>> = (0..h).map(|_| (0..p).map(|_| normals(&mut rng, d)).collect()).collect();
    let eps_rs: Vec<Vec<_>> = if cfg.resample {
        (0..h).map(|_| (0..p).map(|_| normals(&mut rng, d)).collect()).collect()
    } else {
        Vec::new()
    };

    let l0 = start.chol()?;
    let x0: Vec<DVector<f64>> = eps0.iter().map(|e| &start.mu + &l0 * e).collect();
    let mut current = x0.clone();
    let mut frozen = vec![false; p];
    let mut actions = Vec::with_capacity(h);
    let mut steps = Vec::with_capacity(h);
    let mut resample = Vec::with_capacity(h);

    for t in 0..h {
        let advanced: Vec<(ActionRecord, StepRecord)> = (0..p)
            .into_par_iter()
            .map(|i| advance(dynamics, policy, &current[i], &eps[t][i], frozen[i]))
            .collect();
        let (acts, mut recs): (Vec<_>, Vec<_>) = advanced.into_iter().unzip();

        let rs = if cfg.resample {
            let pre: Vec<DVector<f64>> = recs.iter().map(|r| r.x_pre.clone()).collect();
            let fit = fit_moments(&pre, true)?;
            let chol = cholesky_jittered(&fit.sigma)?;
            for (r, e) in recs.iter_mut().zip(&eps_rs[t]) {
                r.x = &fit.mu + &chol * e;
            }
            Some(ResampleRecord {
                fit,
                chol,
                eps: eps_rs[t].clone(),
            })
        } else {
            None
        };

        for (i, r) in recs.iter_mut().enumerate() {
            if frozen[i] || r.x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                if !frozen[i] {
                    log::warn!("particle {i} diverged at step {}", t + 1);
                }
                frozen[i] = true;
                r.diverged = true;
                r.x = current[i].clone();
                r.x_pre = current[i].clone();
            }
            let (c, dc) = cost.eval(&r.x);
            r.cost = c;
            r.dcost_dx = dc;
            current[i] = r.x.clone();
        }
        actions.push(acts);
        steps.push(recs);
        resample.push(rs);
    }

    Ok(ParticleBatch {
        x0,
        actions,
        steps,
        resample,
        n_params: policy.n_params(),
    })
}

fn advance(
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    x: &DVector<f64>,
    eps: &DVector<f64>,
    frozen: bool,
) -> (ActionRecord, StepRecord) {
    let d = x.len();
    let a = policy.act(x);
    let tr = dynamics.predict(x, &a.u);
    let f = a.u.len();
    let mut dzeta_dx = DMatrix::zeros(2 * d, d);
    let mut dzeta_du = DMatrix::zeros(2 * d, f);
    if !frozen {
        dzeta_dx
            .rows_mut(0, d)
            .copy_from(&(&tr.dmean_dx + &tr.dmean_du * &a.du_dx));
        dzeta_dx.rows_mut(d, d).copy_from(&(&tr.dvar_dx + &tr.dvar_du * &a.du_dx));
        dzeta_du.rows_mut(0, d).copy_from(&tr.dmean_du);
        dzeta_du.rows_mut(d, d).copy_from(&tr.dvar_du);
    }
    let x_pre = tr.next.rp_sample(eps);
    let step = StepRecord {
        zeta: tr.next,
        eps: eps.clone(),
        x: x_pre.clone(),
        x_pre,
        dzeta_dx_prev: dzeta_dx,
        dzeta_du_prev: dzeta_du,
        cost: 0.0,
        dcost_dx: DVector::zeros(d),
        diverged: false,
    };
    (
        ActionRecord {
            u: a.u,
            du_dtheta: a.du_dtheta,
        },
        step,
    )
}

/// Small stand-ins used by tests and benchmarks: linear-Gaussian dynamics,
/// an affine policy, and a quadratic cost.
pub mod toy {
    use super::*;

    /// `x' ~ N(A x + B u, diag(noise))`.
    #[derive(Debug, Clone)]
    pub struct LinearGaussian {
        pub a: DMatrix<f64>,
        pub b: DMatrix<f64>,
        pub noise: DVector<f64>,
    }

    impl Dynamics for LinearGaussian {
        fn state_dim(&self) -> usize {
            self.a.nrows()
        }

        fn action_dim(&self) -> usize {
            self.b.ncols()
        }

        fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> Transition {
            let d = self.state_dim();
            Transition {
                next: DiagGaussian::new(&self.a * x + &self.b * u, self.noise.clone()),
                dmean_dx: self.a.clone(),
                dmean_du: self.b.clone(),
                dvar_dx: DMatrix::zeros(d, d),
                dvar_du: DMatrix::zeros(d, self.b.ncols()),
            }
        }
    }

    /// `u = K x + k`, parameters `θ = [vec(K) (column-major); k]`.
    #[derive(Debug, Clone)]
    pub struct AffinePolicy {
        pub gain: DMatrix<f64>,
        pub offset: DVector<f64>,
    }

    impl AffinePolicy {
        pub fn from_params(f: usize, d: usize, theta: &[f64]) -> Self {
            Self {
                gain: DMatrix::from_column_slice(f, d, &theta[..f * d]),
                offset: DVector::from_column_slice(&theta[f * d..f * d + f]),
            }
        }

        pub fn params(&self) -> Vec<f64> {
            self.gain.iter().chain(self.offset.iter()).copied().collect()
        }
    }

    impl Policy for AffinePolicy {
        fn n_params(&self) -> usize {
            self.gain.len() + self.offset.len()
        }

        fn act(&self, x: &DVector<f64>) -> Action {
            let (f, d) = self.gain.shape();
            let mut du_dtheta = DMatrix::zeros(f, self.n_params());
            for c in 0..d {
                for r in 0..f {
                    du_dtheta[(r, r + c * f)] = x[c];
                }
            }
            for r in 0..f {
                du_dtheta[(r, f * d + r)] = 1.0;
            }
            Action {
                u: &self.gain * x + &self.offset,
                du_dx: self.gain.clone(),
                du_dtheta,
            }
        }
    }

    /// `c(x) = xᵀ W x + wᵀ x`, with a closed-form Gaussian expectation.
    #[derive(Debug, Clone)]
    pub struct QuadraticCost {
        pub w: DMatrix<f64>,
        pub lin: DVector<f64>,
    }

    impl Cost for QuadraticCost {
        fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
            let ws = &self.w + self.w.transpose();
            ((x.transpose() * &self.w * x)[0] + self.lin.dot(x), &ws * x + &self.lin)
        }

        fn expected(&self, g: &GaussianParams) -> Result<ExpectedCost> {
            let ws = &self.w + self.w.transpose();
            let value = (g.mu.transpose() * &self.w * &g.mu)[0] + (&self.w * &g.sigma).trace() + self.lin.dot(&g.mu);
            Ok(ExpectedCost {
                value,
                dmu: &ws * &g.mu + &self.lin,
                dsigma: ws * 0.5,
            })
        }
    }
}
