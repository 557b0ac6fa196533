//! Gradient estimators.
//!
//! One-shot estimators act on a batch of independent samples: pathwise
//! ([`rp_gradient`]), score function with optional baselines
//! ([`lr_gradient`]), batch importance weighted score function
//! ([`biw_lr_gradient`]) and density-estimation LR ([`del_gradient`]).
//! [`trajectory_gradient`] runs the same ideas backwards through a particle
//! rollout, optionally replacing the cost with Gaussian-shaped signals and
//! combining score-function and pathwise estimates per time step.

mod shaping;
mod single;
mod trajectory;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use shaping::{exp_quadratic_expected_cost, gs_signals, mc_expected_cost, GsConfig, GsSignals};
pub use single::{
    biw_baselines, biw_lr_gradient, biw_weights, del_adjoints, del_gradient, lr_gradient, rp_gradient, Baseline,
    BiwParticle, RpParticle,
};
pub use trajectory::{trajectory_gradient, LrMode, Signal, TrajectoryConfig, TrajectoryGradient, Weighting};

/// A gradient estimate with its per-particle decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: DVector<f64>,
    /// One contribution per particle; `grad` is their mean.
    pub per_particle: Vec<DVector<f64>>,
    /// Trace of the unbiased sample covariance of `per_particle`.
    pub variance_trace: f64,
}

impl GradientEstimate {
    pub fn from_particles(per_particle: Vec<DVector<f64>>) -> Result<Self> {
        let first = per_particle.first().ok_or(Error::TooFewParticles { needed: 1, got: 0 })?;
        let n = first.len();
        if let Some(bad) = per_particle.iter().find(|g| g.len() != n) {
            return Err(Error::Dimension {
                expected: n,
                got: bad.len(),
            });
        }
        let grad = mean(&per_particle);
        let variance_trace = variance_trace(&per_particle, &grad);
        Ok(Self {
            grad,
            per_particle,
            variance_trace,
        })
    }

    pub fn n_particles(&self) -> usize {
        self.per_particle.len()
    }

    /// Per-coordinate unbiased sample variance of the contributions.
    pub fn per_param_variance(&self) -> DVector<f64> {
        let p = self.per_particle.len();
        let mut v = DVector::zeros(self.grad.len());
        if p < 2 {
            return v;
        }
        for g in &self.per_particle {
            let r = g - &self.grad;
            v += r.component_mul(&r);
        }
        v / (p as f64 - 1.0)
    }
}

pub(crate) fn mean(xs: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(xs[0].len());
    for x in xs {
        m += x;
    }
    m / xs.len() as f64
}

pub(crate) fn variance_trace(xs: &[DVector<f64>], mean: &DVector<f64>) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.iter().map(|x| (x - mean).norm_squared()).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Inverse-variance weight on the score-function estimate,
/// `σ²_RP / (σ²_LR + σ²_RP)`. Both variances zero gives `0.5`.
pub fn k_lr(var_lr: f64, var_rp: f64) -> f64 {
    if var_lr == 0.0 && var_rp == 0.0 {
        0.5
    } else {
        var_rp / (var_lr + var_rp)
    }
}

/// Blend two estimates of the same gradient by their variance traces.
/// Returns `(k_lr, k_lr·lr + (1−k_lr)·rp)`.
pub fn total_propagation_combine(lr: &GradientEstimate, rp: &GradientEstimate) -> Result<(f64, DVector<f64>)> {
    if lr.grad.len() != rp.grad.len() {
        return Err(Error::Dimension {
            expected: lr.grad.len(),
            got: rp.grad.len(),
        });
    }
    let k = k_lr(lr.variance_trace, rp.variance_trace);
    Ok((k, &lr.grad * k + &rp.grad * (1.0 - k)))
}

/// The estimators used for policy optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Pathwise derivatives through the rollout.
    Rp,
    /// Batch importance weighted LR with its baseline.
    Lr,
    /// Total propagation of LR and RP.
    Tp,
    /// Density-estimation LR.
    Del,
    /// Gaussian shaping with the LR component.
    Glr,
    /// Gaussian shaping with total propagation.
    Gtp,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [Self::Rp, Self::Lr, Self::Tp, Self::Del, Self::Glr, Self::Gtp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rp => "rp",
            Self::Lr => "lr",
            Self::Tp => "tp",
            Self::Del => "del",
            Self::Glr => "glr",
            Self::Gtp => "gtp",
        }
    }

    /// Backward-pass configuration realizing this estimator.
    pub fn trajectory_config(self, gs: GsConfig) -> TrajectoryConfig {
        let biw = LrMode::Biw { baseline: true };
        match self {
            Self::Rp => TrajectoryConfig::new(Signal::Cost, Weighting::Rp, biw),
            Self::Lr => TrajectoryConfig::new(Signal::Cost, Weighting::Lr, biw),
            Self::Tp => TrajectoryConfig::new(Signal::Cost, Weighting::Tp, biw),
            Self::Del => TrajectoryConfig::new(Signal::Density(Baseline::Mean), Weighting::Rp, biw),
            Self::Glr => TrajectoryConfig::new(
                Signal::Shaped(gs),
                Weighting::Lr,
                LrMode::Biw {
                    baseline: gs.use_lr_baseline,
                },
            ),
            Self::Gtp => TrajectoryConfig::new(
                Signal::Shaped(gs),
                Weighting::Tp,
                LrMode::Biw {
                    baseline: gs.use_lr_baseline,
                },
            ),
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
