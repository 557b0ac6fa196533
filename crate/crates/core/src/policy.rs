//! Saturated RBF policy and the variance-normalized optimizer.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::estimators::GradientEstimate;
use crate::rollout::{Action, Policy};

/// `9 sin(u)/8 + sin(3u)/8`, mapping onto `[−1, 1]`.
pub fn sat(u: f64) -> f64 {
    (9.0 * u.sin() + (3.0 * u).sin()) / 8.0
}

pub fn sat_deriv(u: f64) -> f64 {
    (9.0 * u.cos() + 3.0 * (3.0 * u).cos()) / 8.0
}

/// `u = u_max · sat(Σ_c w_c exp(−½ Σ_k (x_k − c_ck)² / ℓ_k²))`.
///
/// Parameters are laid out as the centers row by row, then the weights,
/// then `ln ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfPolicy {
    pub centers: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub log_ell: DVector<f64>,
    pub u_max: f64,
}

impl RbfPolicy {
    /// Centers drawn around `mean` with per-dimension spread `spread`,
    /// weights from `N(0, 0.1²)`, unit lengthscales.
    pub fn random(n: usize, mean: &DVector<f64>, spread: &DVector<f64>, u_max: f64, seed: u64) -> Self {
        let d = mean.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = DMatrix::from_fn(n, d, |_, k| mean[k] + spread[k] * rng.sample::<f64, _>(StandardNormal));
        let weights = DVector::from_fn(n, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        Self {
            centers,
            weights,
            log_ell: DVector::zeros(d),
            u_max,
        }
    }

    pub fn n_centers(&self) -> usize {
        self.centers.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn params(&self) -> DVector<f64> {
        let (n, d) = (self.n_centers(), self.input_dim());
        let mut p = DVector::zeros(n * d + n + d);
        for c in 0..n {
            for k in 0..d {
                p[c * d + k] = self.centers[(c, k)];
            }
        }
        p.rows_mut(n * d, n).copy_from(&self.weights);
        p.rows_mut(n * d + n, d).copy_from(&self.log_ell);
        p
    }

    pub fn set_params(&mut self, p: &DVector<f64>) -> Result<()> {
        let (n, d) = (self.n_centers(), self.input_dim());
        if p.len() != n * d + n + d {
            return Err(Error::Dimension {
                expected: n * d + n + d,
                got: p.len(),
            });
        }
        for c in 0..n {
            for k in 0..d {
                self.centers[(c, k)] = p[c * d + k];
            }
        }
        self.weights.copy_from(&p.rows(n * d, n));
        self.log_ell.copy_from(&p.rows(n * d + n, d));
        Ok(())
    }

    /// Unsaturated output and its gradients in `x` and `θ`.
    pub fn raw(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        let (n, d) = (self.n_centers(), self.input_dim());
        let inv_l2 = self.log_ell.map(|l| (-2.0 * l).exp());
        let mut out = 0.0;
        let mut dx = DVector::zeros(d);
        let mut dth = DVector::zeros(n * d + n + d);
        for c in 0..n {
            let mut q = 0.0;
            for k in 0..d {
                let r = x[k] - self.centers[(c, k)];
                q += r * r * inv_l2[k];
            }
            let phi = (-0.5 * q).exp();
            let wphi = self.weights[c] * phi;
            out += wphi;
            dth[n * d + c] = phi;
            for k in 0..d {
                let r = x[k] - self.centers[(c, k)];
                let g = wphi * r * inv_l2[k];
                dx[k] -= g;
                dth[c * d + k] = g;
                dth[n * d + n + k] += g * r;
            }
        }
        (out, dx, dth)
    }

    /// Record `u` on a tape from a state node and a parameter node.
    pub fn record(&self, tape: &mut Tape, x: NodeId, theta: NodeId) -> NodeId {
        let (n, d) = (self.n_centers(), self.input_dim());
        let xs: Vec<NodeId> = (0..d).map(|k| tape.entry(x, k, 0)).collect();
        let inv_l2: Vec<NodeId> = (0..d)
            .map(|k| {
                let l = tape.entry(theta, n * d + n + k, 0);
                let m = tape.scale(l, -2.0);
                tape.exp(m)
            })
            .collect();
        let mut acc = tape.constant_scalar(0.0);
        for c in 0..n {
            let mut q = tape.constant_scalar(0.0);
            for k in 0..d {
                let ck = tape.entry(theta, c * d + k, 0);
                let r = tape.sub(xs[k], ck);
                let r2 = tape.mul(r, r);
                let t = tape.mul(r2, inv_l2[k]);
                q = tape.add(q, t);
            }
            let h = tape.scale(q, -0.5);
            let phi = tape.exp(h);
            let w = tape.entry(theta, n * d + c, 0);
            let wphi = tape.mul(w, phi);
            acc = tape.add(acc, wphi);
        }
        let s1 = tape.sin(acc);
        let a3 = tape.scale(acc, 3.0);
        let s3 = tape.sin(a3);
        let s1 = tape.scale(s1, 9.0 / 8.0);
        let s3 = tape.scale(s3, 1.0 / 8.0);
        let s = tape.add(s1, s3);
        tape.scale(s, self.u_max)
    }

    pub fn checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            encoding: "raw-state".into(),
            n_centers: self.n_centers(),
            input_dim: self.input_dim(),
            u_max: self.u_max,
            params: self.params().as_slice().to_vec(),
        }
    }

    pub fn from_checkpoint(c: &PolicyCheckpoint) -> Result<Self> {
        let mut p = Self {
            centers: DMatrix::zeros(c.n_centers, c.input_dim),
            weights: DVector::zeros(c.n_centers),
            log_ell: DVector::zeros(c.input_dim),
            u_max: c.u_max,
        };
        p.set_params(&DVector::from_column_slice(&c.params))?;
        Ok(p)
    }
}

impl Policy for RbfPolicy {
    fn n_params(&self) -> usize {
        self.n_centers() * (self.input_dim() + 1) + self.input_dim()
    }

    fn act(&self, x: &DVector<f64>) -> Action {
        let (v, dx, dth) = self.raw(x);
        let s = self.u_max * sat_deriv(v);
        Action {
            u: DVector::from_element(1, self.u_max * sat(v)),
            du_dx: DMatrix::from_row_slice(1, dx.len(), (dx * s).as_slice()),
            du_dtheta: DMatrix::from_row_slice(1, dth.len(), (dth * s).as_slice()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub encoding: String,
    pub n_centers: usize,
    pub input_dim: usize,
    pub u_max: f64,
    pub params: Vec<f64>,
}

impl PolicyCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 5e-4,
            gamma: 0.9,
            eps: 1e-8,
        }
    }
}

/// RMSprop-like descent whose second-moment accumulator also absorbs the
/// sampling variance of the mean gradient:
/// `v ← γv + (1−γ)(ĝ² + s²/P)`, `θ ← θ − α ĝ / √(v̂ + ε)`,
/// with `v̂` the bias-corrected accumulator.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    v: DVector<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n: usize) -> Self {
        Self {
            cfg,
            v: DVector::zeros(n),
            t: 0,
        }
    }

    pub fn accumulator(&self) -> &DVector<f64> {
        &self.v
    }

    /// Apply one descent step. Returns `false` and leaves `theta` untouched
    /// if the gradient is not finite.
    pub fn step(&mut self, theta: &mut DVector<f64>, est: &GradientEstimate) -> Result<bool> {
        let g = &est.grad;
        if g.len() != theta.len() {
            return Err(Error::Dimension {
                expected: theta.len(),
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            log::warn!("non-finite policy gradient, step skipped");
            return Ok(false);
        }
        let p = est.n_particles().max(1) as f64;
        let s2 = est.per_param_variance();
        let OptimizerConfig { alpha, gamma, eps } = self.cfg;
        self.t += 1;
        let corr = 1.0 - gamma.powi(self.t);
        for k in 0..g.len() {
            self.v[k] = gamma * self.v[k] + (1.0 - gamma) * (g[k] * g[k] + s2[k] / p);
            theta[k] -= alpha * g[k] / (self.v[k] / corr + eps).sqrt();
        }
        Ok(true)
    }
}
