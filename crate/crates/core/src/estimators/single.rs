use nalgebra::{DMatrix, DVector};

use super::GradientEstimate;
use crate::ad::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::gaussian::{cholesky_jittered, fit_moments, log_sum_exp, GaussianParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Baseline subtracted from the per-particle objective in score-function
/// estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Baseline {
    #[default]
    None,
    /// Batch mean, including the particle itself.
    Mean,
    /// Mean of the other particles.
    LeaveOneOut,
}

impl Baseline {
    pub(crate) fn values(self, phi: &[f64]) -> Result<Vec<f64>> {
        let p = phi.len();
        let total: f64 = phi.iter().sum();
        Ok(match self {
            Baseline::None => vec![0.0; p],
            Baseline::Mean => vec![total / p as f64; p],
            Baseline::LeaveOneOut => {
                if p < 2 {
                    return Err(Error::TooFewParticles { needed: 2, got: p });
                }
                phi.iter().map(|f| (total - f) / (p as f64 - 1.0)).collect()
            }
        })
    }
}

/// A per-particle objective recorded on a tape against the parameters.
pub struct RpParticle {
    pub tape: Tape,
    pub objective: NodeId,
    pub theta: NodeId,
}

/// Mean of `dφ/dθ` over particles.
pub fn rp_gradient(particles: &[RpParticle]) -> Result<GradientEstimate> {
    let per = particles
        .iter()
        .map(|p| {
            if p.tape.path_crosses_stop(p.theta, p.objective) {
                return Err(Error::NotReparameterizable);
            }
            let j = p.tape.jacobian(p.objective, p.theta)?;
            if j.nrows() != 1 {
                return Err(Error::Shape {
                    op: "rp_gradient",
                    lhs: j.shape(),
                    rhs: (1, j.ncols()),
                });
            }
            Ok(DVector::from_iterator(j.ncols(), j.iter().copied()))
        })
        .collect::<Result<Vec<_>>>()?;
    GradientEstimate::from_particles(per)
}

/// Mean of `(φ_i − b_i)·d log p(x_i)/dθ`.
pub fn lr_gradient(scores: &[DVector<f64>], phi: &[f64], baseline: Baseline) -> Result<GradientEstimate> {
    if scores.len() != phi.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            got: phi.len(),
        });
    }
    let b = baseline.values(phi)?;
    let per = scores
        .iter()
        .zip(phi.iter().zip(&b))
        .map(|(s, (f, b))| s * (f - b))
        .collect();
    GradientEstimate::from_particles(per)
}

/// Normalized importance weights `c[j,i] = p(x_j;ζ_i) / Σ_k p(x_j;ζ_k)`,
/// held in log space.
#[derive(Debug, Clone)]
pub struct BiwWeights {
    pub log_c: DMatrix<f64>,
}

impl BiwWeights {
    /// From `logp[(j, i)] = log p(x_j; ζ_i)`.
    pub fn from_log_density(logp: &DMatrix<f64>) -> Self {
        let mut log_c = logp.clone();
        for j in 0..logp.nrows() {
            let row: Vec<f64> = logp.row(j).iter().copied().collect();
            let norm = log_sum_exp(&row);
            for i in 0..logp.ncols() {
                log_c[(j, i)] -= norm;
            }
        }
        Self { log_c }
    }

    pub fn c(&self) -> DMatrix<f64> {
        self.log_c.map(f64::exp)
    }

    /// `b_i = Σ_{j≠i} c_{j,i}φ_j / Σ_{j≠i} c_{j,i}`, stabilized by the
    /// largest weight in the column.
    pub fn baselines(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let p = self.log_c.nrows();
        if p < 2 {
            return Err(Error::TooFewParticles { needed: 2, got: p });
        }
        Ok((0..p)
            .map(|i| {
                let m = (0..p)
                    .filter(|&j| j != i)
                    .map(|j| self.log_c[(j, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return 0.0;
                }
                let (mut num, mut den) = (0.0, 0.0);
                for j in (0..p).filter(|&j| j != i) {
                    let w = (self.log_c[(j, i)] - m).exp();
                    num += w * phi[j];
                    den += w;
                }
                num / den
            })
            .collect())
    }
}

pub fn biw_weights(logp: &DMatrix<f64>) -> BiwWeights {
    BiwWeights::from_log_density(logp)
}

pub fn biw_baselines(logp: &DMatrix<f64>, phi: &[f64]) -> Result<Vec<f64>> {
    BiwWeights::from_log_density(logp).baselines(phi)
}

/// Pairwise densities and scores over a batch of sampled particles.
pub(crate) trait BiwModel {
    fn n(&self) -> usize;
    fn zeta_dim(&self) -> usize;
    /// `log p(x_j; ζ_i)`.
    fn log_density(&self, j: usize, i: usize) -> f64;
    /// `out += w · ∇_ζ log p(x_j; ζ)` at `ζ = ζ_i`.
    fn add_score(&self, j: usize, i: usize, w: f64, out: &mut [f64]);
}

/// Per-particle `Σ_j c_{j,i}(φ_j − b_i) ∇_{ζ_i} log p(x_j; ζ_i)`.
pub(crate) fn biw_zeta_grads(model: &impl BiwModel, phi: &[f64], baseline: bool) -> Result<Vec<DVector<f64>>> {
    let p = model.n();
    if p < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: p });
    }
    let logp = DMatrix::from_fn(p, p, |j, i| model.log_density(j, i));
    let w = BiwWeights::from_log_density(&logp);
    let b = if baseline { w.baselines(phi)? } else { vec![0.0; p] };
    Ok((0..p)
        .map(|i| {
            let mut out = vec![0.0; model.zeta_dim()];
            for j in 0..p {
                let c = w.log_c[(j, i)].exp();
                if c > 0.0 {
                    model.add_score(j, i, c * (phi[j] - b[i]), &mut out);
                }
            }
            DVector::from_vec(out)
        })
        .collect())
}

/// A sample `x` from `N(ζ)`, with `ζ = [μ; vec Σ]` a function of `θ`.
#[derive(Debug, Clone)]
pub struct BiwParticle {
    pub x: DVector<f64>,
    pub zeta: GaussianParams,
    /// `dζ/dθ`, `(d + d²) × n_θ`, column-major `vec Σ`.
    pub dzeta_dtheta: DMatrix<f64>,
}

struct FullBiw<'a> {
    parts: &'a [BiwParticle],
    prec: Vec<DMatrix<f64>>,
    logdet: Vec<f64>,
}

impl<'a> FullBiw<'a> {
    fn new(parts: &'a [BiwParticle]) -> Result<Self> {
        let mut prec = Vec::with_capacity(parts.len());
        let mut logdet = Vec::with_capacity(parts.len());
        for p in parts {
            let l = cholesky_jittered(&p.zeta.sigma)?;
            let linv = l
                .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
                .ok_or(Error::Singular)?;
            prec.push(linv.transpose() * linv);
            logdet.push(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>());
        }
        Ok(Self { parts, prec, logdet })
    }

    fn scaled_residual(&self, j: usize, i: usize, s: &mut [f64]) -> f64 {
        let (x, mu, prec) = (&self.parts[j].x, &self.parts[i].zeta.mu, &self.prec[i]);
        let d = x.len();
        let mut quad = 0.0;
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                acc += prec[(a, b)] * (x[b] - mu[b]);
            }
            s[a] = acc;
            quad += acc * (x[a] - mu[a]);
        }
        quad
    }
}

impl BiwModel for FullBiw<'_> {
    fn n(&self) -> usize {
        self.parts.len()
    }

    fn zeta_dim(&self) -> usize {
        let d = self.parts[0].x.len();
        d + d * d
    }

    fn log_density(&self, j: usize, i: usize) -> f64 {
        let d = self.parts[j].x.len();
        let mut s = vec![0.0; d];
        let quad = self.scaled_residual(j, i, &mut s);
        -0.5 * (quad + self.logdet[i] + d as f64 * LN_2PI)
    }

    fn add_score(&self, j: usize, i: usize, w: f64, out: &mut [f64]) {
        let d = self.parts[j].x.len();
        let mut s = vec![0.0; d];
        self.scaled_residual(j, i, &mut s);
        let prec = &self.prec[i];
        for a in 0..d {
            out[a] += w * s[a];
        }
        for b in 0..d {
            for a in 0..d {
                out[d + a + d * b] += w * 0.5 * (s[a] * s[b] - prec[(a, b)]);
            }
        }
    }
}

/// Batch importance weighted LR with the batch importance weighted baseline:
/// `(1/P) Σ_i Σ_j c_{j,i}(φ_j − b_i) d log p(x_j; ζ_i(θ))/dθ`.
pub fn biw_lr_gradient(particles: &[BiwParticle], phi: &[f64]) -> Result<GradientEstimate> {
    if particles.len() != phi.len() {
        return Err(Error::Dimension {
            expected: particles.len(),
            got: phi.len(),
        });
    }
    let model = FullBiw::new(particles)?;
    let z = biw_zeta_grads(&model, phi, true)?;
    let per = z
        .iter()
        .zip(particles)
        .map(|(z, p)| p.dzeta_dtheta.tr_mul(z))
        .collect();
    GradientEstimate::from_particles(per)
}

/// State-space adjoints `a_j` of the density-estimation LR objective
/// `Σ_i (G_i − b_i)/P · log q(x_i; μ̂, Σ̂)`, differentiated through the fitted
/// `μ̂` and unbiased `Σ̂` with each `x_i` in the log-density held fixed.
pub fn del_adjoints(xs: &[DVector<f64>], g: &[f64], baseline: Baseline) -> Result<Vec<DVector<f64>>> {
    let p = xs.len();
    let d = xs.first().map_or(0, |x| x.len());
    if p < d + 2 {
        return Err(Error::TooFewParticles { needed: d + 2, got: p });
    }
    if g.len() != p {
        return Err(Error::Dimension { expected: p, got: g.len() });
    }
    let fit = fit_moments(xs, true)?;
    if !(fit.sigma.trace() > 0.0) {
        return Err(Error::Degenerate("particles coincide; fitted covariance is zero".into()));
    }
    let l = cholesky_jittered(&fit.sigma)?;
    let linv = l.solve_lower_triangular(&DMatrix::identity(d, d)).ok_or(Error::Singular)?;
    let s = linv.transpose() * linv;
    let b = baseline.values(g)?;
    let r: Vec<DVector<f64>> = xs.iter().map(|x| x - &fit.mu).collect();
    let mut m_mu = DVector::zeros(d);
    let mut m_sigma = DMatrix::zeros(d, d);
    for i in 0..p {
        let w = (g[i] - b[i]) / p as f64;
        let sr = &s * &r[i];
        m_mu += &sr * w;
        m_sigma += (&sr * sr.transpose() - &s) * (0.5 * w);
    }
    Ok(r
        .iter()
        .map(|rj| &m_mu / p as f64 + &m_sigma * rj * (2.0 / (p as f64 - 1.0)))
        .collect())
}

/// Density-estimation LR for one set of particles `x_j(θ)` with pathwise
/// Jacobians `dx_j/dθ` (`d × n_θ`) and per-particle objectives `G_j`.
pub fn del_gradient(
    xs: &[DVector<f64>],
    dx_dtheta: &[DMatrix<f64>],
    g: &[f64],
    baseline: Baseline,
) -> Result<GradientEstimate> {
    if dx_dtheta.len() != xs.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            got: dx_dtheta.len(),
        });
    }
    let a = del_adjoints(xs, g, baseline)?;
    let p = xs.len() as f64;
    let per = a.iter().zip(dx_dtheta).map(|(a, j)| j.tr_mul(a) * p).collect();
    GradientEstimate::from_particles(per)
}
