//! Invariant checks shared by the property tests and the acceptance run.
//! Every check derives its inputs from a seed and reports the first
//! violation it finds.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use pcgrad::ad::{central_jacobian, fd_check, NodeId, Tape};
use pcgrad::cartpole::{AngleCost, CartPoleParams, CostKind, Task, TipCost};
use pcgrad::estimators::{
    gs_signals, lr_gradient, total_propagation_combine, trajectory_gradient, Baseline, EstimatorKind,
    GradientEstimate, GsConfig,
};
use pcgrad::experiment::run_seed;
use pcgrad::gaussian::{cholesky_jittered, log_density_grad, rp_sample, GaussianParams};
use pcgrad::gp::{train_hyperparams, GpHyperparams, GpModel, GpTrainConfig, InputEncoding};
use pcgrad::pcg::{
    all_valid_blocking_sets, composed_map, decompose_first_half, decompose_second_half, enumerate_paths,
    nodes_between, random_polynomial_dag, total_derivative_pathsum, validate_blocking_set, BlockingSet, PcgGraph,
};
use pcgrad::policy::{sat, sat_deriv, Optimizer, OptimizerConfig, RbfPolicy};
use pcgrad::rollout::toy::{AffinePolicy, LinearGaussian, QuadraticCost};
use pcgrad::rollout::{rollout_particles, Cost, Dynamics, Policy, RolloutConfig};
use pcgrad::{ExperimentConfig, ParticleBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

trait Ctx<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T> Ctx<T> for pcgrad::Result<T> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.sample(StandardNormal))
}

pub fn random_spd(r: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| 0.7 * r.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

/// `max |a − b| / max(|b|, 1e-3)`; anything non-finite counts as infinite.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let e = (x - y).abs() / y.abs().max(1e-3);
            if e.is_finite() {
                e
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

fn stack_rows(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.view_mut((r, 0), p.shape()).copy_from(*p);
        r += p.nrows();
    }
    out
}

// ---- ad ----

type Op = fn(&mut Tape, NodeId) -> NodeId;

fn spd_node(t: &mut Tape, x: NodeId) -> NodeId {
    let xt = t.transpose(x);
    let outer = t.matmul(x, xt);
    let n = t.len_of(x);
    let eye = t.constant(DMatrix::identity(n, n) * 2.0);
    t.add(outer, eye)
}

pub const AD_OPS: &[(&str, Op)] = &[
    ("add", |t, x| {
        let c = t.cos(x);
        t.add(x, c)
    }),
    ("sub", |t, x| {
        let s = t.sin(x);
        t.sub(x, s)
    }),
    ("mul", |t, x| {
        let c = t.cos(x);
        t.mul(x, c)
    }),
    ("div", |t, x| {
        let s = t.sin(x);
        t.div(s, x)
    }),
    ("neg", |t, x| t.neg(x)),
    ("scale", |t, x| t.scale(x, -2.5)),
    ("powi", |t, x| t.powi(x, 3)),
    ("powi_neg", |t, x| t.powi(x, -2)),
    ("exp", |t, x| t.exp(x)),
    ("log", |t, x| t.log(x)),
    ("sin", |t, x| t.sin(x)),
    ("cos", |t, x| t.cos(x)),
    ("sqrt", |t, x| t.sqrt(x)),
    ("matmul", |t, x| {
        let m = t.constant(dmatrix![1.0, -0.5, 2.0; 0.3, 0.7, -1.2]);
        t.matmul(m, x)
    }),
    ("transpose", |t, x| {
        let xt = t.transpose(x);
        t.matmul(xt, x)
    }),
    ("sum", |t, x| {
        let e = t.exp(x);
        t.sum(e)
    }),
    ("dot", |t, x| {
        let e = t.exp(x);
        t.dot(x, e)
    }),
    ("entry", |t, x| {
        let a = t.entry(x, 1, 0);
        let b = t.entry(x, 2, 0);
        t.mul(a, b)
    }),
    ("stack", |t, x| {
        let s = t.sin(x);
        let q = t.mul(x, x);
        t.stack(&[s, q])
    }),
    ("cholesky", |t, x| {
        let a = spd_node(t, x);
        t.cholesky(a).expect("spd by construction")
    }),
    ("solve", |t, x| {
        let a = spd_node(t, x);
        let b = t.sin(x);
        t.solve(a, b).expect("spd by construction")
    }),
];

pub fn ad_ops_match_fd(seed: u64) -> Check {
    let mut r = rng(seed);
    let x: Vec<f64> = (0..3).map(|_| r.gen_range(0.3..1.5)).collect();
    for (name, op) in AD_OPS {
        let rep = fd_check(op, &x, 1e-4);
        ensure!(rep.passed, "{name} at {x:?}: rel err {:.2e}", rep.max_rel_err);
    }
    Ok(())
}

pub fn ad_chain_rule(seed: u64) -> Check {
    let mut r = rng(seed);
    let x0: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut t = Tape::new();
    let x = t.input_vector(&x0);
    let s = t.sin(x);
    let q = t.mul(x, x);
    let m = t.stack(&[s, q]);
    let e = t.exp(m);
    let a = t.sum(e);
    let b = t.dot(m, m);
    let y = t.stack(&[a, b]);
    let whole = t.jacobian(y, x).ctx("dy/dx")?;
    let outer = t.jacobian(y, m).ctx("dy/dm")?;
    let inner = t.jacobian(m, x).ctx("dm/dx")?;
    let err = (&whole - outer * inner).amax();
    ensure!(err <= 1e-12 * (1.0 + whole.amax()), "chain rule off by {err:e}");
    Ok(())
}

// ---- pcg ----

pub fn random_dag(seed: u64) -> PcgGraph {
    let mut r = rng(seed);
    let n = r.gen_range(3..=8);
    random_polynomial_dag(&mut r, n, 0.5)
}

/// Compares the path sum, both decompositions over every valid blocking
/// set, and finite differences for every connected pair of one random DAG.
/// Returns the number of blocking sets checked.
pub fn pcg_case(seed: u64) -> Result<usize, String> {
    let g = random_dag(seed);
    let values = g.forward(&HashMap::new());
    let mut checked = 0;
    for j in 0..g.len() {
        for i in j + 1..g.len() {
            if enumerate_paths(&g, j, i, None).ctx("paths")?.is_empty() {
                continue;
            }
            let z0: Vec<f64> = values[j].iter().copied().collect();
            let fd = central_jacobian(|z| composed_map(&g, j, i, z), &z0, 1e-6);
            let ps = total_derivative_pathsum(&g, j, i).ctx("path sum")?;
            ensure!(rel_err(&ps, &fd) <= 1e-4, "{j}->{i}: path sum {ps} vs fd {fd}");
            let sets = all_valid_blocking_sets(&g, j, i).ctx("blocking sets")?;
            for set in &sets {
                let second = decompose_second_half(&g, set).ctx("second half")?.total();
                let first = decompose_first_half(&g, set).ctx("first half")?.total();
                for (name, d) in [("second half", &second), ("first half", &first)] {
                    ensure!(
                        rel_err(d, &fd) <= 1e-4 && rel_err(d, &ps) <= 1e-4,
                        "{j}->{i}, {name} over {:?}: {d} vs path sum {ps} vs fd {fd}",
                        set.members
                    );
                }
            }
            checked += sets.len();
        }
    }
    Ok(checked)
}

pub fn pcg_decompositions(seed: u64) -> Check {
    pcg_case(seed).map(|_| ())
}

fn random_pair(g: &PcgGraph, r: &mut ChaCha8Rng) -> (usize, usize) {
    let j = r.gen_range(0..g.len() - 1);
    (j, r.gen_range(j + 1..g.len()))
}

pub fn pcg_restriction_is_subset(seed: u64) -> Check {
    let g = random_dag(seed);
    let mut r = rng(seed ^ 0x5eed);
    let (j, i) = random_pair(&g, &mut r);
    let full = enumerate_paths(&g, j, i, None).ctx("paths")?;
    let between = nodes_between(&g, j, i).ctx("between")?;
    let ex: BTreeSet<usize> = between.into_iter().filter(|_| r.gen_bool(0.5)).collect();
    let restricted = enumerate_paths(&g, j, i, Some(&ex)).ctx("restricted paths")?;
    ensure!(restricted.len() <= full.len(), "restricted set is larger");
    for p in &restricted.paths {
        ensure!(full.contains(p), "{p:?} missing from the unrestricted enumeration");
        ensure!(
            p[1..p.len() - 1].iter().all(|n| !ex.contains(n)),
            "{p:?} passes through an excluded node"
        );
    }
    Ok(())
}

pub fn pcg_blocking_extremes(seed: u64) -> Check {
    let g = random_dag(seed);
    let mut r = rng(seed ^ 0xb10c);
    let (j, i) = random_pair(&g, &mut r);
    let has_path = !enumerate_paths(&g, j, i, None).ctx("paths")?.is_empty();
    let empty = validate_blocking_set(&g, &BlockingSet::new(j, i, [])).ctx("validate")?;
    ensure!(empty != has_path, "empty set judged {empty} with path present = {has_path}");
    let all = BlockingSet::new(j, i, nodes_between(&g, j, i).ctx("between")?);
    let blocks = validate_blocking_set(&g, &all).ctx("validate")?;
    // a direct edge has no interior node, so nothing can block it
    ensure!(
        blocks != g.has_edge(j, i),
        "all-between set judged {blocks}, direct edge = {}",
        g.has_edge(j, i)
    );
    Ok(())
}

// ---- gaussian ----

const DRAWS: usize = 100_000;

fn random_gaussian(r: &mut ChaCha8Rng, d: usize) -> GaussianParams {
    GaussianParams {
        mu: normals(r, d),
        sigma: random_spd(r, d),
    }
}

pub fn gaussian_rp_moments(seed: u64) -> Check {
    let mut r = rng(seed);
    let p = random_gaussian(&mut r, 3);
    let mut xs = Vec::with_capacity(DRAWS);
    for _ in 0..DRAWS {
        let eps = normals(&mut r, 3);
        xs.push(rp_sample(&p, &eps).ctx("rp_sample")?.x);
    }
    let n = DRAWS as f64;
    let mean = xs.iter().fold(DVector::zeros(3), |a, x| a + x) / n;
    let mut cov = DMatrix::zeros(3, 3);
    for x in &xs {
        let d = x - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    let s = &p.sigma;
    for a in 0..3 {
        let se = (s[(a, a)] / n).sqrt();
        ensure!((mean[a] - p.mu[a]).abs() <= 4.0 * se, "mean[{a}] {} vs {}", mean[a], p.mu[a]);
        for b in a..3 {
            let se = ((s[(a, a)] * s[(b, b)] + s[(a, b)] * s[(a, b)]) / n).sqrt();
            ensure!(
                (cov[(a, b)] - s[(a, b)]).abs() <= 4.0 * se,
                "cov[{a},{b}] {} vs {}",
                cov[(a, b)],
                s[(a, b)]
            );
        }
    }
    Ok(())
}

pub fn gaussian_score_zero_mean(seed: u64) -> Check {
    let mut r = rng(seed);
    let p = random_gaussian(&mut r, 3);
    let mut rows = Vec::with_capacity(DRAWS);
    for _ in 0..DRAWS {
        let x = p.sample(&mut r).ctx("sample")?;
        let sc = log_density_grad(&p, &x).ctx("score")?;
        let mut v: Vec<f64> = sc.score_mu.iter().copied().collect();
        for a in 0..3 {
            for b in a..3 {
                v.push(sc.score_sigma[(a, b)]);
            }
        }
        rows.push(v);
    }
    let n = DRAWS as f64;
    for k in 0..rows[0].len() {
        let m = rows.iter().map(|v| v[k]).sum::<f64>() / n;
        let var = rows.iter().map(|v| (v[k] - m) * (v[k] - m)).sum::<f64>() / (n - 1.0);
        ensure!(m.abs() <= 4.0 * (var / n).sqrt(), "score component {k} has mean {m:e}");
    }
    Ok(())
}

pub fn gaussian_density_grad_fd(seed: u64) -> Check {
    let mut r = rng(seed);
    let d = r.gen_range(1..=4);
    let p = random_gaussian(&mut r, d);
    let x = &p.mu + normals(&mut r, d);
    let sc = log_density_grad(&p, &x).ctx("score")?;
    let logp = |mu: &DVector<f64>, sigma: &DMatrix<f64>| {
        GaussianParams {
            mu: mu.clone(),
            sigma: sigma.clone(),
        }
        .log_density(&x)
        .expect("spd")
    };
    let fd_mu = central_jacobian(|m| vec![logp(&DVector::from_column_slice(m), &p.sigma)], p.mu.as_slice(), 1e-6);
    let an_mu = DMatrix::from_row_slice(1, d, sc.score_mu.as_slice());
    ensure!(rel_err(&an_mu, &fd_mu) <= 1e-5, "d/dmu {an_mu} vs {fd_mu}");
    let h = 1e-6;
    for a in 0..d {
        for b in a..d {
            let mut dir = DMatrix::zeros(d, d);
            dir[(a, b)] = 1.0;
            dir[(b, a)] = 1.0;
            let fd = (logp(&p.mu, &(&p.sigma + &dir * h)) - logp(&p.mu, &(&p.sigma - &dir * h))) / (2.0 * h);
            let an = if a == b {
                sc.score_sigma[(a, a)]
            } else {
                sc.score_sigma[(a, b)] + sc.score_sigma[(b, a)]
            };
            let e = (an - fd).abs() / fd.abs().max(1e-3);
            ensure!(e <= 1e-5, "d/dsigma[{a},{b}] {an} vs {fd}");
        }
    }
    Ok(())
}

// ---- estimators ----

pub struct Toy {
    pub dynamics: LinearGaussian,
    pub cost: QuadraticCost,
    pub start: GaussianParams,
    pub theta: Vec<f64>,
}

/// Two-dimensional linear-Gaussian system under an affine policy with a
/// quadratic cost.
pub fn toy(noise: f64) -> Toy {
    Toy {
        dynamics: LinearGaussian {
            a: dmatrix![1.0, 0.1; 0.0, 0.95],
            b: dmatrix![0.0; 0.1],
            noise: dvector![noise, noise],
        },
        cost: QuadraticCost {
            w: dmatrix![1.0, 0.2; 0.2, 0.5],
            lin: dvector![0.1, 0.0],
        },
        start: GaussianParams::isotropic(dvector![0.5, -0.3], 0.01),
        theta: vec![-0.4, -0.7, 0.3],
    }
}

pub fn toy_batch(t: &Toy, theta: &[f64], particles: usize, horizon: usize, seed: u64) -> pcgrad::Result<ParticleBatch> {
    let pol = AffinePolicy::from_params(1, 2, theta);
    let cfg = RolloutConfig {
        particles,
        horizon,
        seed,
        resample: false,
    };
    rollout_particles(&t.dynamics, &pol, &t.cost, &t.start, &cfg)
}

pub fn lr_baseline_shift(seed: u64) -> Check {
    let mut r = rng(seed);
    let p = random_gaussian(&mut r, 2);
    let n = 500;
    let mut scores = Vec::with_capacity(n);
    let mut phi = Vec::with_capacity(n);
    for _ in 0..n {
        let x = p.sample(&mut r).ctx("sample")?;
        let sc = log_density_grad(&p, &x).ctx("score")?;
        scores.push(DVector::from_iterator(6, sc.score_mu.iter().chain(sc.score_sigma.iter()).copied()));
        phi.push(x.norm_squared() + x[0]);
    }
    let c: f64 = r.gen_range(-5.0..5.0);
    let shifted: Vec<f64> = phi.iter().map(|f| f + c).collect();
    let a = lr_gradient(&scores, &phi, Baseline::None).ctx("lr")?;
    let b = lr_gradient(&scores, &shifted, Baseline::None).ctx("lr")?;
    let mean_score = GradientEstimate::from_particles(scores.clone()).ctx("score mean")?;
    let smax = scores.iter().map(|s| s.amax()).fold(0.0, f64::max);
    let fmax = shifted.iter().map(|f| f.abs()).fold(0.0, f64::max);
    let tol = 1e-12 * smax * (1.0 + fmax) * n as f64;
    let shift = &b.grad - &a.grad;
    ensure!((&shift - &mean_score.grad * c).amax() <= tol, "shift {shift} is not c times the mean score");
    let se = mean_score.per_param_variance().map(|v| (v / n as f64).sqrt());
    for k in 0..6 {
        ensure!(shift[k].abs() <= 4.0 * c.abs() * se[k], "shift[{k}] = {} exceeds 4 SE", shift[k]);
    }
    let la = lr_gradient(&scores, &phi, Baseline::LeaveOneOut).ctx("lr")?;
    let lb = lr_gradient(&scores, &shifted, Baseline::LeaveOneOut).ctx("lr")?;
    ensure!((&lb.grad - &la.grad).amax() <= tol, "leave-one-out estimate moved under a shift");
    Ok(())
}

fn random_estimate(r: &mut ChaCha8Rng, n: usize, scale: f64) -> GradientEstimate {
    let p = r.gen_range(2..30);
    let per = (0..p).map(|_| normals(r, n) * scale).collect();
    GradientEstimate::from_particles(per).expect("non-empty")
}

pub fn tp_swap_symmetry(seed: u64) -> Check {
    let mut r = rng(seed);
    let n = r.gen_range(1..6);
    let (lr, rp) = if seed % 5 == 0 {
        let g = normals(&mut r, n);
        let flat = |g: &DVector<f64>| GradientEstimate::from_particles(vec![g.clone(); 3]).expect("non-empty");
        (flat(&g), flat(&(g * 2.0)))
    } else {
        let s1 = r.gen_range(0.01..10.0);
        let s2 = r.gen_range(0.01..10.0);
        (random_estimate(&mut r, n, s1), random_estimate(&mut r, n, s2))
    };
    let (k1, g1) = total_propagation_combine(&lr, &rp).ctx("combine")?;
    let (k2, g2) = total_propagation_combine(&rp, &lr).ctx("combine")?;
    ensure!((k1 + k2 - 1.0).abs() <= 1e-12, "k {k1} and swapped k {k2}");
    let scale = 1.0 + lr.grad.amax() + rp.grad.amax();
    ensure!((&g1 - &g2).amax() <= 1e-12 * scale, "blends differ: {g1} vs {g2}");
    Ok(())
}

pub fn gs_signal_sums(seed: u64) -> Check {
    let mut r = rng(seed);
    let d = r.gen_range(2..=4);
    let p = r.gen_range(5..60);
    let centre = normals(&mut r, d) * 0.5;
    let xs: Vec<DVector<f64>> = (0..p).map(|_| &centre + normals(&mut r, d) * 0.3).collect();
    let cost: Box<dyn Cost> = if d == 4 && seed % 2 == 1 {
        Box::new(AngleCost::default())
    } else {
        Box::new(QuadraticCost {
            w: DMatrix::from_fn(d, d, |_, _| r.gen_range(-1.0..1.0)),
            lin: normals(&mut r, d),
        })
    };
    let s = gs_signals(&xs, cost.as_ref()).ctx("gs")?;
    let pf = p as f64;
    let mu = xs.iter().fold(DVector::zeros(d), |a, x| a + x) / pf;
    let exx = xs.iter().fold(DMatrix::zeros(d, d), |a, x| a + x * x.transpose()) / pf;
    let mut vw = DMatrix::zeros(d, d);
    let mut m_term = 0.0;
    let mut m_scale = 0.0;
    for x in &xs {
        let m = x - &mu;
        vw += x * x.transpose() - &exx - &m * mu.transpose() * 2.0;
        let t = s.expected.dmu.dot(&m);
        m_term += t;
        m_scale += t.abs();
    }
    vw /= pf;
    let lhs: f64 = s.g.iter().sum();
    let rhs = pf * s.expected.dsigma.dot(&vw);
    let g_scale: f64 = s.g.iter().map(|g| g.abs()).sum::<f64>() + 1.0;
    ensure!((lhs - rhs).abs() <= 1e-9 * g_scale, "sum of g {lhs:e} vs {rhs:e}");
    ensure!(m_term.abs() <= 1e-12 * (1.0 + m_scale), "m-term sums to {m_term:e}");
    Ok(())
}

fn all_gradients(t: &Toy, b: &ParticleBatch) -> Result<Vec<GradientEstimate>, String> {
    EstimatorKind::ALL
        .iter()
        .map(|k| {
            trajectory_gradient(b, &t.cost, &k.trajectory_config(GsConfig::default()))
                .map(|g| g.estimate)
                .ctx(k.name())
        })
        .collect()
}

pub fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}

pub fn estimators_deterministic(seed: u64) -> Check {
    let t = toy(0.05);
    let run = || -> Result<_, String> {
        let b = toy_batch(&t, &t.theta, 12, 3, seed).ctx("rollout")?;
        let g = all_gradients(&t, &b)?;
        Ok((b.returns(), g))
    };
    let first = run()?;
    ensure!(first == run()?, "repeat differs");
    ensure!(first == in_pool(1, run)?, "single-thread pool differs");
    ensure!(first == in_pool(3, run)?, "three-thread pool differs");
    Ok(())
}

// ---- gp ----

pub fn gp_encoding() -> InputEncoding {
    InputEncoding {
        state_dim: 2,
        action_dim: 1,
        angle_dims: vec![1],
    }
}

/// A model over 20 random transitions with random hyperparameters.
pub fn random_gp(seed: u64, n: usize) -> GpModel {
    let mut r = rng(seed);
    let enc = gp_encoding();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x = dvector![r.gen_range(-1.0..1.0), r.gen_range(-PI..PI)];
        let u = dvector![r.gen_range(-1.0..1.0)];
        inputs.push(enc.encode(&x, &u).0);
        targets.push(dvector![
            x[0].sin() + 0.3 * u[0] + 0.05 * r.sample::<f64, _>(StandardNormal),
            0.5 * x[1].cos() + 0.05 * r.sample::<f64, _>(StandardNormal)
        ]);
    }
    let hyps = (0..2)
        .map(|_| {
            (
                GpHyperparams {
                    s2: r.gen_range(0.5..2.0),
                    lambda: DVector::from_fn(enc.dim(), |_, _| r.gen_range(0.3..3.0)),
                    sigma_n2: r.gen_range(1e-3..1e-1),
                },
                r.gen_range(-0.5..0.5),
            )
        })
        .collect();
    GpModel::with_hyperparams(enc, inputs, targets, hyps).expect("well-posed model")
}

fn se_kernel(a: &DVector<f64>, b: &DVector<f64>, h: &GpHyperparams) -> f64 {
    let q: f64 = (0..a.len()).map(|k| (a[k] - b[k]).powi(2) / h.lambda[k]).sum();
    h.s2 * (-q).exp()
}

/// Textbook posterior through an LU solve: `(mean, var)` including noise.
pub fn naive_posterior(x: &[DVector<f64>], y: &DVector<f64>, h: &GpHyperparams, m: f64, q: &DVector<f64>) -> (f64, f64) {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| se_kernel(&x[i], &x[j], h) + if i == j { h.sigma_n2 } else { 0.0 });
    let ks = DVector::from_fn(n, |i, _| se_kernel(&x[i], q, h));
    let lu = k.lu();
    let alpha = lu.solve(&y.map(|v| v - m)).expect("invertible");
    let beta = lu.solve(&ks).expect("invertible");
    (m + ks.dot(&alpha), h.s2 - ks.dot(&beta) + h.sigma_n2)
}

/// Largest deviation of the model's posterior from [`naive_posterior`].
pub fn gp_closed_form_error(seed: u64) -> f64 {
    let model = random_gp(seed, 20);
    let mut r = rng(seed ^ 0x9e0);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = dvector![r.gen_range(-1.5..1.5), r.gen_range(-PI..PI)];
        let q = model.encoding.encode(&x, &dvector![r.gen_range(-1.5..1.5)]).0;
        let pred = model.predict_encoded(&q);
        for (a, dim) in model.dims.iter().enumerate() {
            let y = DVector::from_iterator(model.n_points(), model.targets.iter().map(|t| t[a]));
            let (m, v) = naive_posterior(&model.inputs, &y, &dim.hyp, dim.mean, &q);
            worst = worst.max((pred.mean[a] - m).abs()).max((pred.var[a] - v).abs());
        }
    }
    worst
}

pub fn gp_closed_form(seed: u64) -> Check {
    let e = gp_closed_form_error(seed);
    ensure!(e <= 1e-8, "posterior differs from the closed form by {e:e}");
    Ok(())
}

pub fn gp_variance_floor(seed: u64) -> Check {
    let model = random_gp(seed, 20);
    let mut r = rng(seed ^ 0xf100);
    let mut queries: Vec<DVector<f64>> = model.inputs.clone();
    for _ in 0..20 {
        queries.push(DVector::from_fn(model.encoding.dim(), |_, _| r.gen_range(-3.0..3.0)));
    }
    queries.push(DVector::from_element(model.encoding.dim(), 100.0));
    for q in &queries {
        let p = model.predict_encoded(q);
        for (a, dim) in model.dims.iter().enumerate() {
            ensure!(p.var[a] >= dim.hyp.sigma_n2, "var {} below noise {}", p.var[a], dim.hyp.sigma_n2);
        }
    }
    Ok(())
}

pub fn gp_lml_monotone(seed: u64) -> Check {
    let mut r = rng(seed);
    let x: Vec<DVector<f64>> = (0..15).map(|_| DVector::from_fn(3, |_, _| r.gen_range(-2.0..2.0))).collect();
    let y = DVector::from_iterator(15, x.iter().map(|p| p[0].sin() + 0.3 * p[1] * p[2] + 0.05 * r.sample::<f64, _>(StandardNormal)));
    let y = y.add_scalar(-y.mean());
    let cfg = GpTrainConfig {
        restarts: 2,
        max_iters: 60,
        seed,
        ..Default::default()
    };
    let tr = train_hyperparams(&x, &y, &cfg).ctx("train")?;
    for w in tr.accepted.windows(2) {
        ensure!(w[1] > w[0], "accepted step lowered the likelihood: {} -> {}", w[0], w[1]);
    }
    ensure!(tr.accepted.last() == Some(&tr.lml), "reported likelihood is not the last accepted one");
    Ok(())
}

fn prediction_vec(model: &GpModel, x: &[f64], u: &[f64]) -> Vec<f64> {
    let t = model.predict(&DVector::from_column_slice(x), &DVector::from_column_slice(u));
    t.next.mean.iter().chain(t.next.var.iter()).copied().collect()
}

pub fn gp_derivatives_fd(seed: u64) -> Check {
    let model = random_gp(seed, 20);
    let mut r = rng(seed ^ 0xd0d0);

    let q = DVector::from_fn(model.encoding.dim(), |_, _| r.gen_range(-1.0..1.0));
    let p = model.predict_encoded(&q);
    let f = |v: &[f64]| {
        let p = model.predict_encoded(&DVector::from_column_slice(v));
        p.mean.iter().chain(p.var.iter()).copied().collect::<Vec<_>>()
    };
    let fd = central_jacobian(f, q.as_slice(), 1e-6);
    let an = stack_rows(&[&p.dmean, &p.dvar]);
    ensure!(rel_err(&an, &fd) <= 1e-4, "encoded-input derivatives {an} vs {fd}");

    let x = [r.gen_range(-1.0..1.0), r.gen_range(-PI..PI)];
    let u = [r.gen_range(-1.0..1.0)];
    let t = model.predict(&DVector::from_column_slice(&x), &DVector::from_column_slice(&u));
    let fd_x = central_jacobian(|v| prediction_vec(&model, v, &u), &x, 1e-6);
    let fd_u = central_jacobian(|v| prediction_vec(&model, &x, v), &u, 1e-6);
    let an_x = stack_rows(&[&t.dmean_dx, &t.dvar_dx]);
    let an_u = stack_rows(&[&t.dmean_du, &t.dvar_du]);
    ensure!(rel_err(&an_x, &fd_x) <= 1e-4, "state derivatives {an_x} vs {fd_x}");
    ensure!(rel_err(&an_u, &fd_u) <= 1e-4, "action derivatives {an_u} vs {fd_u}");

    let mut policy = RbfPolicy::random(8, &DVector::zeros(2), &DVector::from_element(2, 1.0), 2.0, seed);
    policy.weights *= 3.0;
    let cost = QuadraticCost {
        w: DMatrix::identity(2, 2),
        lin: DVector::zeros(2),
    };
    let start = GaussianParams::isotropic(DVector::from_column_slice(&x), 0.01);
    let cfg = RolloutConfig {
        particles: 1,
        horizon: 2,
        seed,
        resample: false,
    };
    let b = rollout_particles(&model, &policy, &cost, &start, &cfg).ctx("rollout")?;
    let x1 = b.steps[0][0].x.clone();
    let through_policy = |v: &[f64]| {
        let xv = DVector::from_column_slice(v);
        let u = policy.act(&xv).u;
        prediction_vec(&model, v, u.as_slice())
    };
    let fd = central_jacobian(through_policy, x1.as_slice(), 1e-6);
    let an = &b.steps[1][0].dzeta_dx_prev;
    ensure!(rel_err(an, &fd) <= 1e-4, "derivatives through the policy {an} vs {fd}");
    Ok(())
}

// ---- cartpole ----

fn random_state(r: &mut ChaCha8Rng) -> DVector<f64> {
    dvector![
        r.gen_range(-1.0..1.0),
        r.gen_range(-5.0..5.0),
        r.gen_range(-3.0..3.0),
        r.gen_range(-3.0..3.0)
    ]
}

/// Smallest exponent at which `1 − exp(−q)` rounds to 1 in `f64`.
const SATURATION: f64 = 36.0;

pub fn cost_bounds_and_order(seed: u64) -> Check {
    let mut r = rng(seed);
    let params = CartPoleParams::default();
    let l = params.pole_length;
    let angle = AngleCost::default();
    let tip = TipCost::new(l, 4);
    let mut a_pts = Vec::new();
    let mut t_pts = Vec::new();
    for _ in 0..50 {
        let x = random_state(&mut r);
        let qa = x[0] * x[0] + x[1] * x[1];
        let (dx, dy) = (x[0] + l * x[1].sin(), l * x[1].cos() - l);
        let qt = tip.weight * (dx * dx + dy * dy);
        for (name, c, q) in [("angle", angle.eval(&x).0, qa), ("tip", tip.eval(&x).0, qt)] {
            ensure!((0.0..=1.0).contains(&c), "{name} cost {c} out of range");
            ensure!(q >= SATURATION || c < 1.0, "{name} cost reached 1 at exponent {q}");
        }
        a_pts.push((qa, angle.eval(&x).0));
        t_pts.push((qt, tip.eval(&x).0));
    }
    for (name, pts) in [("angle", &mut a_pts), ("tip", &mut t_pts)] {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pts.windows(2) {
            ensure!(w[1].1 >= w[0].1, "{name} cost not monotone: {:?} then {:?}", w[0], w[1]);
        }
    }
    let v = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
    ensure!(angle.eval(&dvector![0.0, 0.0, v.0, v.1]).0 == 0.0, "angle cost at target");
    ensure!(tip.eval(&dvector![0.0, 0.0, v.0, v.1]).0 == 0.0, "tip cost at target");
    ensure!(tip.eval(&dvector![0.0, 2.0 * PI, v.0, v.1]).0.abs() < 1e-12, "tip cost a full turn from target");
    Ok(())
}

pub fn cartpole_reversible(seed: u64) -> Check {
    let mut r = rng(seed);
    let p = CartPoleParams {
        friction: 0.0,
        ..Default::default()
    };
    let x0 = dvector![
        r.gen_range(-1.0..1.0),
        r.gen_range(-PI..PI),
        r.gen_range(-2.0..2.0),
        r.gen_range(-2.0..2.0)
    ];
    let u = r.gen_range(-5.0..5.0);
    let flip = |mut x: DVector<f64>| {
        x[2] = -x[2];
        x[3] = -x[3];
        x
    };
    let back = flip(p.step(&flip(p.step(&x0, u)), u));
    let err = (&back - &x0).amax();
    ensure!(err <= 1e-6, "round trip from {x0} misses by {err:e}");
    Ok(())
}

pub fn cost_mirror(seed: u64) -> Check {
    let mut r = rng(seed);
    let l = CartPoleParams::default().pole_length;
    let tip = TipCost::new(l, 4);
    let angle = AngleCost::default();
    let mut beta = r.gen_range(0.2..2.0 * PI - 0.2);
    if (beta - PI).abs() < 0.1 {
        beta += 0.2;
    }
    let x = dvector![r.gen_range(-1.0..1.0), beta, r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)];
    let m = dvector![-x[0], 2.0 * PI - x[1], -x[2], -x[3]];
    let (a, b) = (tip.eval(&x).0, tip.eval(&m).0);
    ensure!((a - b).abs() <= 1e-12, "tip cost {a} vs mirrored {b}");
    let (a, b) = (angle.eval(&x).0, angle.eval(&m).0);
    ensure!((a - b).abs() > 1e-6, "angle cost unchanged under mirroring at beta = {beta}");
    Ok(())
}

// ---- policy ----

pub fn sat_properties(seed: u64) -> Check {
    let mut r = rng(seed);
    ensure!((sat(PI / 2.0) - 1.0).abs() < 1e-15, "sat does not reach 1");
    for _ in 0..100 {
        let u: f64 = r.gen_range(-50.0..50.0);
        let s = sat(u);
        ensure!(s.abs() <= 1.0 + 1e-12, "sat({u}) = {s}");
        ensure!((sat(-u) + s).abs() <= 1e-15, "sat not odd at {u}");
        ensure!((sat(u + 2.0 * PI) - s).abs() <= 1e-12, "sat not periodic at {u}");
        ensure!(sat_deriv(u).abs() <= 1.5, "sat'({u}) = {}", sat_deriv(u));
    }
    Ok(())
}

pub fn policy_derivative_bound(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut pol = RbfPolicy::random(50, &dvector![0.0, PI, 0.0, 0.0], &DVector::from_element(4, 1.0), 10.0, seed);
    pol.weights *= r.gen_range(1.0..20.0);
    let x = dvector![0.0, PI, 0.0, 0.0] + normals(&mut r, 4);
    let (raw, draw_dx, _) = pol.raw(&x);
    let du = pol.u_max * sat_deriv(raw);
    ensure!(du.abs() <= 1.5 * pol.u_max, "du/dpi = {du}");
    let a = pol.act(&x);
    let want = draw_dx.transpose() * du;
    ensure!((&a.du_dx - &want).amax() <= 1e-12 * (1.0 + want.amax()), "du/dx {} vs {want}", a.du_dx);
    Ok(())
}

pub fn optimizer_scale_equivariant(seed: u64) -> Check {
    let mut r = rng(seed);
    let n = 8;
    let c = r.gen_range(0.1..10.0);
    let cfg = OptimizerConfig::default();
    let (mut o1, mut o2) = (Optimizer::new(cfg, n), Optimizer::new(cfg, n));
    let start = normals(&mut r, n);
    let (mut t1, mut t2) = (start.clone(), start.clone());
    for _ in 0..3 {
        let bias = normals(&mut r, n);
        let per: Vec<DVector<f64>> = (0..16).map(|_| &bias + normals(&mut r, n)).collect();
        let scaled = per.iter().map(|g| g * c).collect();
        o1.step(&mut t1, &GradientEstimate::from_particles(per).ctx("estimate")?).ctx("step")?;
        o2.step(&mut t2, &GradientEstimate::from_particles(scaled).ctx("estimate")?).ctx("step")?;
    }
    let (d1, d2) = (&t1 - &start, &t2 - &start);
    let cos = d1.dot(&d2) / (d1.norm() * d2.norm());
    ensure!(cos >= 1.0 - 1e-10, "directions differ: cos = {cos}");
    let ratio = d2.norm() / d1.norm();
    ensure!((ratio - 1.0).abs() <= 1e-5, "step sizes differ by factor {ratio} at c = {c}");
    Ok(())
}

// ---- harness ----

pub fn batch_moment_convention(seed: u64) -> Check {
    let mut r = rng(seed);
    let p = r.gen_range(3..40);
    let t = toy(0.05);
    let b = toy_batch(&t, &t.theta, p, 3, seed).ctx("rollout")?;
    for step in 0..=3 {
        let m = b.moments(step).ctx("moments")?;
        let exx = b.second_moment(step);
        let lhs = &exx - &m.mu * m.mu.transpose();
        let rhs = &m.sigma * ((p as f64 - 1.0) / p as f64);
        ensure!((&lhs - &rhs).amax() <= 1e-12 * (1.0 + exx.amax()), "t = {step}: {lhs} vs {rhs}");
        cholesky_jittered(&m.sigma).ctx("fitted covariance")?;
    }
    Ok(())
}

pub fn rollout_thread_invariant(seed: u64) -> Check {
    let t = toy(0.05);
    let states = |threads| {
        in_pool(threads, || {
            let b = toy_batch(&t, &t.theta, 25, 4, seed).expect("rollout");
            (0..=4).map(|s| b.states(s)).collect::<Vec<_>>()
        })
    };
    ensure!(states(1) == states(3), "trajectories depend on the thread count");
    Ok(())
}

/// Small protocol run used wherever the full loop is exercised.
pub fn tiny_config(seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        task: Task::Balance,
        cost: CostKind::Angle,
        estimator: EstimatorKind::Tp,
        particles: 8,
        grad_steps: 3,
        horizon: 8,
        learned_episodes: 2,
        evaluations: 2,
        seeds,
        n_centers: 5,
        gp: GpTrainConfig {
            restarts: 1,
            max_iters: 15,
            ..Default::default()
        },
        checkpoints: false,
        ..Default::default()
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

pub fn harness_protocol(seed: u64) -> Check {
    let d = ExperimentConfig::default();
    ensure!((1 + d.learned_episodes) * d.horizon == 16 * 30, "default protocol is not 16 episodes of 30 steps");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for evals in [1, 3] {
        let cfg = ExperimentConfig {
            evaluations: evals,
            checkpoints: true,
            ..tiny_config(vec![seed])
        };
        let out = dir.path().join(format!("e{evals}"));
        let rec = run_seed(&cfg, seed, Some(&out)).ctx("run")?;
        ensure!(
            rec.real_steps == (1 + cfg.learned_episodes) * cfg.horizon,
            "{} real steps",
            rec.real_steps
        );
        runs.push(out.join("checkpoints").join(format!("seed{seed}")));
    }
    // evaluation episodes must not leak into data or optimization
    for e in 1..=2 {
        for kind in ["gp", "policy"] {
            let f = format!("ep{e:02}_{kind}.json");
            ensure!(read(&runs[0].join(&f))? == read(&runs[1].join(&f))?, "{f} depends on the evaluation count");
        }
    }
    Ok(())
}

pub type Invariant = (&'static str, fn(u64) -> Check, u64);

/// Every invariant with the number of seeds the acceptance run gives it.
pub const ALL: &[Invariant] = &[
    ("ad: primitive ops match finite differences", ad_ops_match_fd, 100),
    ("ad: chain rule is associative", ad_chain_rule, 100),
    ("pcg: decompositions equal path sum and fd", pcg_decompositions, 100),
    ("pcg: restricted paths are a subset", pcg_restriction_is_subset, 100),
    ("pcg: blocking-set extremes", pcg_blocking_extremes, 100),
    ("gaussian: rp draws match moments", gaussian_rp_moments, 3),
    ("gaussian: score has zero mean", gaussian_score_zero_mean, 3),
    ("gaussian: density gradients match fd", gaussian_density_grad_fd, 100),
    ("estimators: baseline shift", lr_baseline_shift, 20),
    ("estimators: tp swap symmetry", tp_swap_symmetry, 100),
    ("estimators: gs signal sums", gs_signal_sums, 100),
    ("estimators: deterministic", estimators_deterministic, 10),
    ("gp: closed form", gp_closed_form, 20),
    ("gp: variance floor", gp_variance_floor, 20),
    ("gp: likelihood monotone", gp_lml_monotone, 20),
    ("gp: derivatives match fd", gp_derivatives_fd, 20),
    ("cartpole: cost bounds and order", cost_bounds_and_order, 100),
    ("cartpole: time reversible", cartpole_reversible, 100),
    ("cartpole: mirror symmetry", cost_mirror, 100),
    ("policy: sat properties", sat_properties, 100),
    ("policy: output derivative bound", policy_derivative_bound, 100),
    ("policy: optimizer scale equivariance", optimizer_scale_equivariant, 100),
    ("harness: moment convention", batch_moment_convention, 50),
    ("harness: rollout thread invariance", rollout_thread_invariant, 10),
    ("harness: protocol conservation", harness_protocol, 2),
];
