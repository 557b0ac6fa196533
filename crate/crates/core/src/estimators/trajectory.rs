//! Backward pass over a particle rollout.
//!
//! Walking from the last step to the first, each particle carries the
//! derivative of its remaining return with respect to its own predicted
//! distribution `ζ_{i,t}`. At every step a pathwise (RP) and a score-function
//! (LR) version of that derivative are formed, mapped to the policy
//! parameters through `dζ/du · du/dθ`, weighted by their particle variances,
//! and the same weighted blend is passed on to the previous step.

use nalgebra::{DMatrix, DVector};

use super::shaping::{gs_signals, GsConfig};
use super::single::{biw_zeta_grads, del_adjoints, Baseline, BiwModel};
use super::{k_lr, mean, variance_trace, GradientEstimate};
use crate::ad::chol_grad;
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::rollout::{Cost, ParticleBatch, ResampleRecord, StepRecord};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// What plays the role of the per-step cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Signal {
    /// The sampled cost `c(x_{i,t})`.
    Cost,
    /// Gaussian-shaped signals from the fitted marginal at each step.
    Shaped(GsConfig),
    /// Density-estimation LR: the return is scored under a Gaussian fitted
    /// to the particles and the result is carried back pathwise.
    Density(Baseline),
}

/// How the LR and RP estimates are mixed at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Rp,
    Lr,
    /// Inverse-variance weighting per step.
    Tp,
}

/// Form of the score-function estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrMode {
    /// Batch importance weighted over the particle mixture.
    Biw { baseline: bool },
    /// Each particle scored under its own distribution only.
    Plain(Baseline),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryConfig {
    pub signal: Signal,
    pub weighting: Weighting,
    pub lr: LrMode,
}

impl TrajectoryConfig {
    pub fn new(signal: Signal, weighting: Weighting, lr: LrMode) -> Self {
        Self { signal, weighting, lr }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryGradient {
    /// Gradient of `E[Σ_{t=1}^H c_t]` with respect to the policy parameters.
    pub estimate: GradientEstimate,
    /// LR weight used at each step `t = 1..=H`.
    pub k_lr: Vec<f64>,
    /// Sample mean of the return.
    pub objective: f64,
}

struct DiagBiw<'a> {
    x: Vec<&'a DVector<f64>>,
    zeta: Vec<&'a DiagGaussian>,
    log_var_sum: Vec<f64>,
}

impl<'a> DiagBiw<'a> {
    fn new(steps: &'a [StepRecord]) -> Self {
        Self {
            x: steps.iter().map(|s| &s.x_pre).collect(),
            zeta: steps.iter().map(|s| &s.zeta).collect(),
            log_var_sum: steps.iter().map(|s| s.zeta.var.iter().map(|v| v.ln()).sum()).collect(),
        }
    }
}

impl BiwModel for DiagBiw<'_> {
    fn n(&self) -> usize {
        self.x.len()
    }

    fn zeta_dim(&self) -> usize {
        2 * self.x[0].len()
    }

    fn log_density(&self, j: usize, i: usize) -> f64 {
        let (x, z) = (self.x[j], self.zeta[i]);
        let mut quad = 0.0;
        for k in 0..x.len() {
            let r = x[k] - z.mean[k];
            quad += r * r / z.var[k];
        }
        -0.5 * (quad + self.log_var_sum[i] + x.len() as f64 * LN_2PI)
    }

    fn add_score(&self, j: usize, i: usize, w: f64, out: &mut [f64]) {
        let (x, z) = (self.x[j], self.zeta[i]);
        let d = x.len();
        for k in 0..d {
            let r = x[k] - z.mean[k];
            let v = z.var[k];
            out[k] += w * r / v;
            out[d + k] += w * 0.5 * (r * r / v - 1.0) / v;
        }
    }
}

fn validate(batch: &ParticleBatch, cfg: &TrajectoryConfig) -> Result<()> {
    if batch.horizon() == 0 {
        return Err(Error::EmptyHorizon);
    }
    let resampled = batch.resample.iter().any(Option::is_some);
    if resampled && (cfg.weighting != Weighting::Rp || cfg.signal != Signal::Cost) {
        return Err(Error::Config(
            "Gaussian resampling is only supported with the pathwise estimator".into(),
        ));
    }
    if matches!(cfg.signal, Signal::Density(_)) && cfg.weighting != Weighting::Rp {
        return Err(Error::Config("density-estimation LR is carried back pathwise only".into()));
    }
    if let Signal::Shaped(gs) = cfg.signal {
        gs.validate()?;
    }
    Ok(())
}

/// Adjoints on the pre-resample particles given adjoints `abar` on the
/// resampled ones, `x_i = μ + L ε'_i` with `(μ, LLᵀ)` fitted to `x_pre`.
fn through_resample(rs: &ResampleRecord, abar: &[DVector<f64>], x_pre: &[&DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let p = abar.len() as f64;
    let d = rs.fit.dim();
    let mut mu_bar = DVector::zeros(d);
    let mut l_bar = DMatrix::zeros(d, d);
    for (a, e) in abar.iter().zip(&rs.eps) {
        mu_bar += a;
        l_bar += a * e.transpose();
    }
    let sigma_used = &rs.chol * rs.chol.transpose();
    let s_bar = chol_grad(&sigma_used, &l_bar.lower_triangle())?;
    Ok(x_pre
        .iter()
        .map(|x| &mu_bar / p + &s_bar * (*x - &rs.fit.mu) * (2.0 / (p - 1.0)))
        .collect())
}

/// Gradient of the expected return with respect to the policy parameters.
pub fn trajectory_gradient(batch: &ParticleBatch, cost: &dyn Cost, cfg: &TrajectoryConfig) -> Result<TrajectoryGradient> {
    validate(batch, cfg)?;
    let (p, h, d, n) = (batch.n_particles(), batch.horizon(), batch.state_dim(), batch.n_params);
    let need_rp = cfg.weighting != Weighting::Lr;
    let need_lr = cfg.weighting != Weighting::Rp;

    let mut dgdz: Vec<DVector<f64>> = vec![DVector::zeros(2 * d); p];
    let mut g_next = vec![0.0; p];
    let mut per_particle: Vec<DVector<f64>> = vec![DVector::zeros(n); p];
    let mut k_hist = vec![0.0; h];

    for t in (1..=h).rev() {
        let steps = &batch.steps[t - 1];
        let acts = &batch.actions[t - 1];
        let live: Vec<bool> = steps.iter().map(|s| !s.diverged).collect();

        let (r, mut direct): (Vec<f64>, Vec<DVector<f64>>) = match cfg.signal {
            Signal::Cost => steps.iter().map(|s| (s.cost, s.dcost_dx.clone())).unzip(),
            Signal::Shaped(_) => {
                let xs: Vec<DVector<f64>> = steps.iter().map(|s| s.x.clone()).collect();
                let s = gs_signals(&xs, cost)?;
                (s.g, s.direct)
            }
            Signal::Density(_) => (steps.iter().map(|s| s.cost).collect(), Vec::new()),
        };
        let g: Vec<f64> = g_next.iter().zip(&r).map(|(a, b)| a + b).collect();
        if let Signal::Density(baseline) = cfg.signal {
            let xs: Vec<DVector<f64>> = steps.iter().map(|s| s.x.clone()).collect();
            direct = del_adjoints(&xs, &g, baseline)?
                .into_iter()
                .map(|a| a * p as f64)
                .collect();
        }

        let to_theta = |i: usize, z: &DVector<f64>| -> DVector<f64> {
            let du = steps[i].dzeta_du_prev.tr_mul(z);
            acts[i].du_dtheta.tr_mul(&du)
        };

        let rp_z: Vec<DVector<f64>> = if need_rp {
            let mut up: Vec<DVector<f64>> = (0..p)
                .map(|i| {
                    let mut u = direct[i].clone();
                    if t < h {
                        u += batch.steps[t][i].dzeta_dx_prev.tr_mul(&dgdz[i]);
                    }
                    u
                })
                .collect();
            if let Some(rs) = &batch.resample[t - 1] {
                let pre: Vec<&DVector<f64>> = steps.iter().map(|s| &s.x_pre).collect();
                up = through_resample(rs, &up, &pre)?;
            }
            (0..p)
                .map(|i| {
                    let dxdv = steps[i].zeta.dx_dvar(&steps[i].eps);
                    let mut z = DVector::zeros(2 * d);
                    z.rows_mut(0, d).copy_from(&up[i]);
                    z.rows_mut(d, d).copy_from(&up[i].component_mul(&dxdv));
                    z
                })
                .collect()
        } else {
            Vec::new()
        };

        let lr_z: Vec<DVector<f64>> = if need_lr {
            match cfg.lr {
                LrMode::Biw { baseline } => biw_zeta_grads(&DiagBiw::new(steps), &g, baseline)?,
                LrMode::Plain(baseline) => {
                    let b = baseline.values(&g)?;
                    steps
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let (dm, dv) = s.zeta.score(&s.x_pre);
                            let mut z = DVector::zeros(2 * d);
                            z.rows_mut(0, d).copy_from(&dm);
                            z.rows_mut(d, d).copy_from(&dv);
                            z * (g[i] - b[i])
                        })
                        .collect()
                }
            }
        } else {
            Vec::new()
        };

        let rp_th: Vec<DVector<f64>> = rp_z.iter().enumerate().map(|(i, z)| to_theta(i, z)).collect();
        let lr_th: Vec<DVector<f64>> = lr_z.iter().enumerate().map(|(i, z)| to_theta(i, z)).collect();
        let k = match cfg.weighting {
            Weighting::Rp => 0.0,
            Weighting::Lr => 1.0,
            Weighting::Tp => k_lr(
                variance_trace(&lr_th, &mean(&lr_th)),
                variance_trace(&rp_th, &mean(&rp_th)),
            ),
        };
        k_hist[t - 1] = k;

        for i in 0..p {
            let (mut z, mut th) = match cfg.weighting {
                Weighting::Rp => (rp_z[i].clone(), rp_th[i].clone()),
                Weighting::Lr => (lr_z[i].clone(), lr_th[i].clone()),
                Weighting::Tp => (&lr_z[i] * k + &rp_z[i] * (1.0 - k), &lr_th[i] * k + &rp_th[i] * (1.0 - k)),
            };
            if !live[i] {
                z.fill(0.0);
                th.fill(0.0);
            }
            per_particle[i] += th;
            dgdz[i] = z;
        }
        g_next = g;
    }

    Ok(TrajectoryGradient {
        estimate: GradientEstimate::from_particles(per_particle)?,
        k_lr: k_hist,
        objective: batch.mean_return(),
    })
}
