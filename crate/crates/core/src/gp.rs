//! Gaussian process dynamics model.
//!
//! One independent GP per state dimension, each predicting the change
//! `Δx_a` from the encoded input `x̃ = [state features; action]`. Angle
//! dimensions are fed as `(sin, cos)` pairs. The kernel is
//! `s² exp(−(x̃−x̃')ᵀ Λ⁻¹ (x̃−x̃'))`, without the usual factor of one half.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky_jittered, DiagGaussian};
use crate::rollout::{Dynamics, Transition};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LOG_FLOOR: f64 = -18.420_680_743_952_367; // ln 1e-8
const LOG_CEIL: f64 = 18.420_680_743_952_367;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    /// Signal variance `s²`.
    pub s2: f64,
    /// Diagonal of `Λ`, in squared input units.
    pub lambda: DVector<f64>,
    /// Noise variance `σ_n²`.
    pub sigma_n2: f64,
}

impl GpHyperparams {
    fn to_log(&self) -> DVector<f64> {
        let e = self.lambda.len();
        let mut v = DVector::zeros(e + 2);
        v[0] = self.s2.ln();
        for k in 0..e {
            v[1 + k] = self.lambda[k].ln();
        }
        v[e + 1] = self.sigma_n2.ln();
        v
    }

    fn from_log(v: &DVector<f64>) -> Self {
        let e = v.len() - 2;
        let c = |x: f64| x.clamp(LOG_FLOOR, LOG_CEIL).exp();
        Self {
            s2: c(v[0]),
            lambda: DVector::from_fn(e, |k, _| c(v[1 + k])),
            sigma_n2: c(v[e + 1]),
        }
    }
}

/// Squared-exponential kernel.
pub fn kernel(x1: &DVector<f64>, x2: &DVector<f64>, h: &GpHyperparams) -> f64 {
    let mut q = 0.0;
    for k in 0..x1.len() {
        let r = x1[k] - x2[k];
        q += r * r / h.lambda[k];
    }
    h.s2 * (-q).exp()
}

/// Gradient of [`kernel`] with respect to `x1`.
pub fn kernel_grad(x1: &DVector<f64>, x2: &DVector<f64>, h: &GpHyperparams) -> DVector<f64> {
    let k = kernel(x1, x2, h);
    DVector::from_fn(x1.len(), |j, _| -2.0 * k * (x1[j] - x2[j]) / h.lambda[j])
}

/// Log marginal likelihood and its gradient in log-hyperparameter space
/// `(ln s², ln λ_1..ln λ_E, ln σ_n²)`. `y` must already be centred.
pub fn log_marginal_likelihood(x: &[DVector<f64>], y: &DVector<f64>, h: &GpHyperparams) -> Result<(f64, DVector<f64>)> {
    let n = x.len();
    let e = h.lambda.len();
    let mut kf = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&x[i], &x[j], h);
            kf[(i, j)] = v;
            kf[(j, i)] = v;
        }
    }
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += h.sigma_n2;
    }
    let chol = k.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let alpha = chol.solve(y);
    let kinv = chol.inverse();
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;

    // ½ tr((ααᵀ − K⁻¹) ∂K)
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad = DVector::zeros(e + 2);
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * kf[(i, j)];
            grad[0] += wk;
            for d in 0..e {
                let r = x[i][d] - x[j][d];
                grad[1 + d] += wk * r * r / h.lambda[d];
            }
        }
        grad[e + 1] += w[(i, i)] * h.sigma_n2;
    }
    Ok((lml, grad * 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpTrainConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for GpTrainConfig {
    fn default() -> Self {
        Self {
            restarts: 3,
            max_iters: 200,
            grad_tol: 1e-4,
            seed: 0,
        }
    }
}

/// Result of one hyperparameter search.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub hyp: GpHyperparams,
    pub lml: f64,
    /// Log marginal likelihood after every accepted step.
    pub accepted: Vec<f64>,
    pub grad_norm: f64,
}

/// Normalized gradient ascent with step halving from one start point.
fn ascend(x: &[DVector<f64>], y: &DVector<f64>, start: DVector<f64>, cfg: &GpTrainConfig) -> Result<TrainTrace> {
    let mut theta = start;
    let (mut lml, mut g) = log_marginal_likelihood(x, y, &GpHyperparams::from_log(&theta))?;
    let mut step = 0.5;
    let mut accepted = vec![lml];
    for _ in 0..cfg.max_iters {
        let norm = g.norm();
        if norm <= cfg.grad_tol || step < 1e-10 {
            break;
        }
        let cand = (&theta + &g * (step / norm)).map(|v| v.clamp(LOG_FLOOR, LOG_CEIL));
        match log_marginal_likelihood(x, y, &GpHyperparams::from_log(&cand)) {
            Ok((l, gc)) if l.is_finite() && l > lml => {
                theta = cand;
                lml = l;
                g = gc;
                accepted.push(l);
                step *= 1.2;
            }
            _ => step *= 0.5,
        }
    }
    Ok(TrainTrace {
        hyp: GpHyperparams::from_log(&theta),
        lml,
        accepted,
        grad_norm: g.norm(),
    })
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    v.map(|a| (a - m) * (a - m)).sum::<f64>() / n
}

fn default_init(x: &[DVector<f64>], y: &DVector<f64>) -> GpHyperparams {
    let e = x[0].len();
    let vy = variance(y.iter().copied()).max(1e-6);
    GpHyperparams {
        s2: vy,
        lambda: DVector::from_fn(e, |k, _| variance(x.iter().map(|p| p[k])).max(1e-2)),
        sigma_n2: vy / 100.0,
    }
}

/// Maximize the log marginal likelihood of one output dimension.
/// The first start is a data-scaled default, the others are random
/// perturbations of it in log space.
pub fn train_hyperparams(x: &[DVector<f64>], y: &DVector<f64>, cfg: &GpTrainConfig) -> Result<TrainTrace> {
    let init = default_init(x, y).to_log();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<TrainTrace> = None;
    for r in 0..cfg.restarts.max(1) {
        let start = if r == 0 {
            init.clone()
        } else {
            init.map(|v| v + rng.sample::<f64, _>(StandardNormal))
        };
        match ascend(x, y, start, cfg) {
            Ok(t) if best.as_ref().is_none_or(|b| t.lml > b.lml) => best = Some(t),
            Ok(_) => {}
            Err(e) => log::warn!("GP restart {r} failed: {e}"),
        }
    }
    match best {
        Some(b) => Ok(b),
        None => {
            log::warn!("all GP restarts failed, falling back to default hyperparameters");
            let mut h = default_init(x, y);
            h.sigma_n2 = h.sigma_n2.max(1e-2 * h.s2);
            let lml = log_marginal_likelihood(x, y, &h).map(|r| r.0).unwrap_or(f64::NEG_INFINITY);
            Ok(TrainTrace {
                hyp: h,
                lml,
                accepted: Vec::new(),
                grad_norm: f64::NAN,
            })
        }
    }
}

/// One trained output dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpDim {
    pub hyp: GpHyperparams,
    /// Constant prior mean.
    pub mean: f64,
    #[serde(skip)]
    alpha: DVector<f64>,
    #[serde(skip)]
    kinv: DMatrix<f64>,
}

impl GpDim {
    fn fit(x: &[DVector<f64>], y: &DVector<f64>, hyp: GpHyperparams, mean: f64) -> Result<Self> {
        let n = x.len();
        let mut k = DMatrix::from_fn(n, n, |i, j| kernel(&x[i], &x[j], &hyp));
        for i in 0..n {
            k[(i, i)] += hyp.sigma_n2;
        }
        let l = cholesky_jittered(&k)?;
        let chol = nalgebra::Cholesky::new(&l * l.transpose()).ok_or(Error::NotPositiveDefinite)?;
        let yc = y.map(|v| v - mean);
        Ok(Self {
            alpha: chol.solve(&yc),
            kinv: chol.inverse(),
            hyp,
            mean,
        })
    }
}

/// How states and actions are turned into GP inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputEncoding {
    pub state_dim: usize,
    pub action_dim: usize,
    /// State indices fed as `(sin, cos)` after the plain state features.
    pub angle_dims: Vec<usize>,
}

impl InputEncoding {
    pub fn dim(&self) -> usize {
        self.state_dim + self.angle_dims.len() + self.action_dim
    }

    /// `x̃` and `∂x̃/∂[x; u]`.
    pub fn encode(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (d, f) = (self.state_dim, self.action_dim);
        let mut out = DVector::zeros(self.dim());
        let mut jac = DMatrix::zeros(self.dim(), d + f);
        let mut row = 0;
        for k in (0..d).filter(|k| !self.angle_dims.contains(k)) {
            out[row] = x[k];
            jac[(row, k)] = 1.0;
            row += 1;
        }
        for &k in &self.angle_dims {
            let (s, c) = x[k].sin_cos();
            out[row] = s;
            jac[(row, k)] = c;
            out[row + 1] = c;
            jac[(row + 1, k)] = -s;
            row += 2;
        }
        for k in 0..f {
            out[row + k] = u[k];
            jac[(row + k, d + k)] = 1.0;
        }
        (out, jac)
    }
}

/// Per-output posterior at an encoded input.
#[derive(Debug, Clone)]
pub struct GpPrediction {
    pub mean: DVector<f64>,
    /// `max(σ_f², 0) + σ_n²·noise_mult`.
    pub var: DVector<f64>,
    pub dmean: DMatrix<f64>,
    pub dvar: DMatrix<f64>,
}

/// A trained model over state deltas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    pub encoding: InputEncoding,
    pub inputs: Vec<DVector<f64>>,
    /// Row `n` holds the target deltas of training point `n`.
    pub targets: Vec<DVector<f64>>,
    pub dims: Vec<GpDim>,
    /// Multiplier on `σ_n²` in predictions.
    pub noise_mult: f64,
}

impl GpModel {
    /// Train from `(x, u, x_next)` transitions.
    pub fn train(
        encoding: InputEncoding,
        data: &[(DVector<f64>, DVector<f64>, DVector<f64>)],
        cfg: &GpTrainConfig,
    ) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::NotEnoughData(data.len()));
        }
        let inputs: Vec<DVector<f64>> = data.iter().map(|(x, u, _)| encoding.encode(x, u).0).collect();
        let targets: Vec<DVector<f64>> = data.iter().map(|(x, _, xn)| xn - x).collect();
        let hyps = (0..encoding.state_dim)
            .map(|a| {
                let y = DVector::from_iterator(targets.len(), targets.iter().map(|t| t[a]));
                let m = y.mean();
                let c = GpTrainConfig {
                    seed: cfg.seed.wrapping_add(a as u64),
                    ..*cfg
                };
                Ok((train_hyperparams(&inputs, &y.map(|v| v - m), &c)?.hyp, m))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_hyperparams(encoding, inputs, targets, hyps)
    }

    /// Build a model with given hyperparameters and constant means.
    pub fn with_hyperparams(
        encoding: InputEncoding,
        inputs: Vec<DVector<f64>>,
        targets: Vec<DVector<f64>>,
        hyps: Vec<(GpHyperparams, f64)>,
    ) -> Result<Self> {
        if inputs.len() < 2 {
            return Err(Error::NotEnoughData(inputs.len()));
        }
        if hyps.len() != encoding.state_dim {
            return Err(Error::Dimension {
                expected: encoding.state_dim,
                got: hyps.len(),
            });
        }
        let dims = hyps
            .into_iter()
            .enumerate()
            .map(|(a, (h, m))| {
                let y = DVector::from_iterator(targets.len(), targets.iter().map(|t| t[a]));
                GpDim::fit(&inputs, &y, h, m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoding,
            inputs,
            targets,
            dims,
            noise_mult: 1.0,
        })
    }

    pub fn n_points(&self) -> usize {
        self.inputs.len()
    }

    /// Posterior of the deltas at an encoded input, with derivatives.
    pub fn predict_encoded(&self, q: &DVector<f64>) -> GpPrediction {
        let (n, e, a_n) = (self.inputs.len(), q.len(), self.dims.len());
        let mut out = GpPrediction {
            mean: DVector::zeros(a_n),
            var: DVector::zeros(a_n),
            dmean: DMatrix::zeros(a_n, e),
            dvar: DMatrix::zeros(a_n, e),
        };
        let mut kv = DVector::zeros(n);
        let mut dk = DMatrix::zeros(n, e);
        for (a, dim) in self.dims.iter().enumerate() {
            for j in 0..n {
                let xj = &self.inputs[j];
                let mut qd = 0.0;
                for k in 0..e {
                    let r = q[k] - xj[k];
                    qd += r * r / dim.hyp.lambda[k];
                }
                let kj = dim.hyp.s2 * (-qd).exp();
                kv[j] = kj;
                for k in 0..e {
                    dk[(j, k)] = -2.0 * kj * (q[k] - xj[k]) / dim.hyp.lambda[k];
                }
            }
            out.mean[a] = dim.mean + kv.dot(&dim.alpha);
            out.dmean.row_mut(a).copy_from(&dim.alpha.tr_mul(&dk));
            let b = &dim.kinv * &kv;
            let sf2 = dim.hyp.s2 - kv.dot(&b);
            out.var[a] = sf2.max(0.0) + dim.hyp.sigma_n2 * self.noise_mult;
            if sf2 > 0.0 {
                out.dvar.row_mut(a).copy_from(&(b.tr_mul(&dk) * -2.0));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Restore a model, refactorizing the kernel matrices.
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: GpModel = serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        let hyps = raw.dims.iter().map(|d| (d.hyp.clone(), d.mean)).collect();
        let mut m = Self::with_hyperparams(raw.encoding, raw.inputs, raw.targets, hyps)?;
        m.noise_mult = raw.noise_mult;
        Ok(m)
    }
}

impl Dynamics for GpModel {
    fn state_dim(&self) -> usize {
        self.encoding.state_dim
    }

    fn action_dim(&self) -> usize {
        self.encoding.action_dim
    }

    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> Transition {
        let d = self.encoding.state_dim;
        let f = self.encoding.action_dim;
        let (q, jac) = self.encoding.encode(x, u);
        let p = self.predict_encoded(&q);
        let dm = &p.dmean * &jac;
        let dv = &p.dvar * &jac;
        Transition {
            next: DiagGaussian::new(x + &p.mean, p.var),
            dmean_dx: DMatrix::identity(d, d) + dm.columns(0, d),
            dmean_du: dm.columns(d, f).into_owned(),
            dvar_dx: dv.columns(0, d).into_owned(),
            dvar_du: dv.columns(d, f).into_owned(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::central_jacobian;
    use nalgebra::dvector;

    fn h(e: usize) -> GpHyperparams {
        GpHyperparams {
            s2: 1.0,
            lambda: DVector::from_element(e, 1.0),
            sigma_n2: 0.01,
        }
    }

    #[test]
    fn kernel_values() {
        let a = dvector![0.3, -0.2];
        assert_eq!(kernel(&a, &a, &h(2)), 1.0);
        let b = dvector![1.3, -0.2];
        assert!((kernel(&a, &b, &h(2)) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_gradient_matches_fd() {
        let hp = GpHyperparams {
            s2: 2.0,
            lambda: dvector![0.5, 3.0],
            sigma_n2: 0.1,
        };
        let b = dvector![0.1, 0.7];
        let a = dvector![0.4, -0.3];
        let fd = central_jacobian(|v| vec![kernel(&DVector::from_column_slice(v), &b, &hp)], a.as_slice(), 1e-6);
        let g = kernel_grad(&a, &b, &hp);
        for k in 0..2 {
            assert!((fd[(0, k)] - g[k]).abs() < 1e-6);
        }
    }

    fn points(n: usize) -> Vec<DVector<f64>> {
        (0..n).map(|i| dvector![i as f64 * 0.37 - 3.0]).collect()
    }

    #[test]
    fn lml_gradient_matches_fd() {
        let x = points(12);
        let y = DVector::from_iterator(12, x.iter().map(|p| p[0].sin()));
        let hp = GpHyperparams {
            s2: 0.8,
            lambda: dvector![1.7],
            sigma_n2: 0.05,
        };
        let (_, g) = log_marginal_likelihood(&x, &y, &hp).unwrap();
        let f = |v: &[f64]| {
            let hh = GpHyperparams::from_log(&DVector::from_column_slice(v));
            vec![log_marginal_likelihood(&x, &y, &hh).unwrap().0]
        };
        let fd = central_jacobian(f, hp.to_log().as_slice(), 1e-6);
        for k in 0..3 {
            assert!((fd[(0, k)] - g[k]).abs() < 1e-5, "{k}: {} vs {}", fd[(0, k)], g[k]);
        }
    }

    #[test]
    fn training_is_monotone_and_deterministic() {
        let x = points(30);
        let y = DVector::from_iterator(30, x.iter().map(|p| p[0].sin()));
        let cfg = GpTrainConfig::default();
        let a = train_hyperparams(&x, &y, &cfg).unwrap();
        let b = train_hyperparams(&x, &y, &cfg).unwrap();
        assert_eq!(a.hyp, b.hyp);
        assert!(a.accepted.windows(2).all(|w| w[1] > w[0]));
    }

    fn one_d() -> InputEncoding {
        InputEncoding {
            state_dim: 1,
            action_dim: 1,
            angle_dims: vec![],
        }
    }

    #[test]
    fn sinusoid_fit() {
        let data: Vec<_> = (0..30)
            .map(|i| {
                let x = dvector![i as f64 * 0.2 - 3.0];
                let u = dvector![0.0];
                let xn = &x + dvector![x[0].sin()];
                (x, u, xn)
            })
            .collect();
        let m = GpModel::train(one_d(), &data, &GpTrainConfig::default()).unwrap();
        let mut se = 0.0;
        for k in 0..20 {
            let q = dvector![k as f64 * 0.29 - 2.9, 0.0];
            let p = m.predict_encoded(&q);
            se += (p.mean[0] - q[0].sin()).powi(2);
        }
        assert!((se / 20.0).sqrt() < 0.1);
    }

    #[test]
    fn constant_targets() {
        let data: Vec<_> = (0..15)
            .map(|i| {
                let x = dvector![i as f64 * 0.3];
                (x.clone(), dvector![0.0], &x + dvector![0.7])
            })
            .collect();
        let m = GpModel::train(one_d(), &data, &GpTrainConfig::default()).unwrap();
        assert!(m.dims[0].hyp.s2 < 1e-3, "{}", m.dims[0].hyp.s2);
        assert!((m.predict_encoded(&dvector![1.1, 0.0]).mean[0] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn encoding_jacobian() {
        let enc = InputEncoding {
            state_dim: 4,
            action_dim: 1,
            angle_dims: vec![1],
        };
        let x = dvector![0.1, 2.0, -0.3, 0.5];
        let u = dvector![1.5];
        let (q, jac) = enc.encode(&x, &u);
        assert_eq!(q.len(), 6);
        assert!((q[3] - 2.0f64.sin()).abs() < 1e-15 && (q[4] - 2.0f64.cos()).abs() < 1e-15);
        let f = |v: &[f64]| {
            let (q, _) = enc.encode(&DVector::from_column_slice(&v[..4]), &DVector::from_column_slice(&v[4..]));
            q.as_slice().to_vec()
        };
        let fd = central_jacobian(f, &[0.1, 2.0, -0.3, 0.5, 1.5], 1e-6);
        assert!((fd - jac).amax() < 1e-8);
    }

    #[test]
    fn serialization_round_trip() {
        let data: Vec<_> = (0..10)
            .map(|i| {
                let x = dvector![i as f64 * 0.5];
                (x.clone(), dvector![0.1 * i as f64], &x + dvector![x[0].cos()])
            })
            .collect();
        let m = GpModel::train(one_d(), &data, &GpTrainConfig::default()).unwrap();
        let r = GpModel::from_json(&m.to_json().unwrap()).unwrap();
        let q = dvector![1.3, 0.2];
        assert_eq!(m.predict_encoded(&q).mean, r.predict_encoded(&q).mean);
        assert_eq!(m.predict_encoded(&q).var, r.predict_encoded(&q).var);
    }
}
