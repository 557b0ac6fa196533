//! Episode loop: interact with the real system, retrain the model, optimize
//! the policy on imagined particle rollouts, evaluate.

mod report;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cartpole::{make_cost, CartPoleParams, CostKind, NoiseSpec, Task};
use crate::error::{Error, Result};
use crate::estimators::{trajectory_gradient, EstimatorKind, GradientEstimate, GsConfig};
use crate::gaussian::GaussianParams;
use crate::gp::{GpModel, GpTrainConfig, InputEncoding};
use crate::policy::{Optimizer, OptimizerConfig, RbfPolicy};
use crate::rollout::{rollout_particles, Cost, Policy, ParticleBatch, RolloutConfig};

pub use report::{emit_report, format_mean_std, mean_std, success_rate, top_fraction, ReportPaths};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub cost: CostKind,
    /// Observation noise multiplier on the base variances.
    pub k: f64,
    pub estimator: EstimatorKind,
    pub particles: usize,
    pub grad_steps: usize,
    pub horizon: usize,
    /// Episodes with a learned policy, after the single random one.
    pub learned_episodes: usize,
    pub evaluations: usize,
    pub seeds: Vec<u64>,
    /// Multiplier on the model's predictive noise variance.
    pub noise_mult: f64,
    /// Refit and resample particles from a Gaussian at every step.
    pub resample: bool,
    pub success_threshold: f64,
    pub n_centers: usize,
    pub u_max: f64,
    /// Standard deviation of the initial policy centers around the start state.
    pub center_spread: f64,
    pub gp: GpTrainConfig,
    pub gs: GsConfig,
    pub optimizer: OptimizerConfig,
    pub cartpole: CartPoleParams,
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Swingup,
            cost: CostKind::Tip,
            k: 1.0,
            estimator: EstimatorKind::Gtp,
            particles: 300,
            grad_steps: 600,
            horizon: 30,
            learned_episodes: 15,
            evaluations: 30,
            seeds: vec![1],
            noise_mult: 1.0,
            resample: false,
            success_threshold: 15.0,
            n_centers: 50,
            u_max: 10.0,
            center_spread: 1.0,
            gp: GpTrainConfig::default(),
            gs: GsConfig::default(),
            optimizer: OptimizerConfig::default(),
            cartpole: CartPoleParams::default(),
            checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.particles < 2 {
            return bad("particles must be at least 2");
        }
        if self.horizon == 0 || self.evaluations == 0 || self.n_centers == 0 {
            return bad("horizon, evaluations and n_centers must be positive");
        }
        if self.seeds.is_empty() {
            return bad("no seeds");
        }
        if !(self.k >= 0.0 && self.noise_mult > 0.0 && self.u_max > 0.0 && self.success_threshold > 0.0) {
            return bad("k must be non-negative; noise_mult, u_max and success_threshold positive");
        }
        if self.resample && self.estimator != EstimatorKind::Rp {
            return bad("resampling is only available with the rp estimator");
        }
        if self.gp.restarts == 0 {
            return bad("gp.restarts must be positive");
        }
        self.gs.validate()
    }

    /// SHA-256 of the configuration without the seed list, hex encoded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Start distribution of imagined rollouts: the true start spread plus
    /// observation noise.
    pub fn model_start(&self) -> GaussianParams {
        let mut s = self.task.start();
        let nv = NoiseSpec::new(self.k).variance();
        s.sigma += DMatrix::from_diagonal(&nv);
        s
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    /// Mean evaluated cost of each episode, the random one first.
    pub episode_costs: Vec<f64>,
    /// Final-episode cost below the success threshold.
    pub success: bool,
    pub wall_clock_s: f64,
    /// Real-system transitions collected.
    pub real_steps: usize,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn final_cost(&self) -> Option<f64> {
        self.episode_costs.last().copied()
    }
}

/// Independent sub-seed for a purpose tag.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag);
    r.next_u64()
}

const TAG_EPISODE: u64 = 1 << 40;
const TAG_EVAL: u64 = 2 << 40;
const TAG_GP: u64 = 3 << 40;
const TAG_POLICY: u64 = 4 << 40;
const TAG_ROLLOUT: u64 = 5 << 40;

/// One episode on the real system.
#[derive(Debug, Clone)]
pub struct Episode {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub actions: Vec<f64>,
    /// `Σ_{t=1}^H c(x_t)` on the true states.
    pub cost: f64,
}

impl Episode {
    /// Observed `(y_t, u_t, y_{t+1})` transitions.
    pub fn transitions(&self) -> Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        (0..self.actions.len())
            .map(|t| {
                (
                    self.observations[t].clone(),
                    DVector::from_element(1, self.actions[t]),
                    self.observations[t + 1].clone(),
                )
            })
            .collect()
    }
}

pub fn run_episode(
    cfg: &ExperimentConfig,
    cost: &dyn Cost,
    controller: &mut dyn FnMut(&DVector<f64>, &mut ChaCha8Rng) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let noise = NoiseSpec::new(cfg.k);
    let mut x = cfg.task.start().sample(rng)?;
    let mut ep = Episode {
        states: vec![x.clone()],
        observations: vec![noise.observe(&x, rng)],
        actions: Vec::with_capacity(cfg.horizon),
        cost: 0.0,
    };
    for t in 0..cfg.horizon {
        let u = controller(&ep.observations[t], rng);
        x = cfg.cartpole.step(&x, u);
        ep.cost += cost.eval(&x).0;
        ep.observations.push(noise.observe(&x, rng));
        ep.states.push(x.clone());
        ep.actions.push(u);
    }
    Ok(ep)
}

fn random_controller(u_max: f64) -> impl FnMut(&DVector<f64>, &mut ChaCha8Rng) -> f64 {
    move |_, rng| rng.gen_range(-u_max..u_max)
}

fn policy_controller(p: &RbfPolicy) -> impl FnMut(&DVector<f64>, &mut ChaCha8Rng) -> f64 + '_ {
    move |y, _| p.act(y).u[0]
}

/// Mean cost of `cfg.evaluations` fresh episodes.
pub fn evaluate(
    cfg: &ExperimentConfig,
    cost: &dyn Cost,
    controller: &mut dyn FnMut(&DVector<f64>, &mut ChaCha8Rng) -> f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..cfg.evaluations {
        total += run_episode(cfg, cost, controller, &mut rng)?.cost;
    }
    Ok(total / cfg.evaluations as f64)
}

/// Policy gradient of the imagined expected return for an estimator.
pub fn policy_gradient_step(
    batch: &ParticleBatch,
    cost: &dyn Cost,
    estimator: EstimatorKind,
    gs: GsConfig,
) -> Result<GradientEstimate> {
    if batch.resample.iter().any(Option::is_some) && estimator != EstimatorKind::Rp {
        return Err(Error::Config(format!("{estimator} cannot run on resampled particles")));
    }
    Ok(trajectory_gradient(batch, cost, &estimator.trajectory_config(gs))?.estimate)
}

pub fn cartpole_encoding() -> InputEncoding {
    InputEncoding {
        state_dim: 4,
        action_dim: 1,
        angle_dims: vec![1],
    }
}

/// Run `cfg.grad_steps` optimizer steps on imagined rollouts. Returns the
/// imagined objective before each step.
pub fn optimize_policy(
    cfg: &ExperimentConfig,
    model: &GpModel,
    policy: &mut RbfPolicy,
    cost: &dyn Cost,
    seed: u64,
) -> Result<Vec<f64>> {
    let start = cfg.model_start();
    let mut opt = Optimizer::new(cfg.optimizer, policy.n_params());
    let mut theta = policy.params();
    let mut trace = Vec::with_capacity(cfg.grad_steps);
    for step in 0..cfg.grad_steps {
        let rc = RolloutConfig {
            particles: cfg.particles,
            horizon: cfg.horizon,
            seed: sub_seed(seed, step as u64),
            resample: cfg.resample,
        };
        let batch = rollout_particles(model, policy, cost, &start, &rc)?;
        trace.push(batch.mean_return());
        let g = policy_gradient_step(&batch, cost, cfg.estimator, cfg.gs)?;
        opt.step(&mut theta, &g)?;
        policy.set_params(&theta)?;
    }
    Ok(trace)
}

fn checkpoint_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    let dir = out.join("checkpoints").join(format!("seed{seed}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Full protocol for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunRecord> {
    let clock = Instant::now();
    let cost = make_cost(cfg.cost, &cfg.cartpole, cfg.gs.cost_expectation_samples);
    let cost = cost.as_ref();
    let mut data = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, TAG_EPISODE));
    let ep = run_episode(cfg, cost, &mut random_controller(cfg.u_max), &mut rng)?;
    data.extend(ep.transitions());
    let mut costs = vec![evaluate(cfg, cost, &mut random_controller(cfg.u_max), sub_seed(seed, TAG_EVAL))?];
    log::info!("seed {seed} episode 0 (random): {:.3}", costs[0]);

    let spread = DVector::from_element(4, cfg.center_spread);
    let mut policy = RbfPolicy::random(
        cfg.n_centers,
        &cfg.task.start_mean(),
        &spread,
        cfg.u_max,
        sub_seed(seed, TAG_POLICY),
    );
    for e in 1..=cfg.learned_episodes as u64 {
        let gp_cfg = GpTrainConfig {
            seed: sub_seed(seed, TAG_GP + e),
            ..cfg.gp
        };
        let mut model = GpModel::train(cartpole_encoding(), &data, &gp_cfg)?;
        model.noise_mult = cfg.noise_mult;
        optimize_policy(cfg, &model, &mut policy, cost, sub_seed(seed, TAG_ROLLOUT + e))?;

        let ep = run_episode(cfg, cost, &mut policy_controller(&policy), &mut rng)?;
        data.extend(ep.transitions());
        let c = evaluate(cfg, cost, &mut policy_controller(&policy), sub_seed(seed, TAG_EVAL + e))?;
        log::info!("seed {seed} episode {e}: {c:.3}");
        costs.push(c);

        if let (Some(out), true) = (out, cfg.checkpoints) {
            let dir = checkpoint_dir(out, seed)?;
            let gp_path = dir.join(format!("ep{e:02}_gp.json"));
            std::fs::write(&gp_path, model.to_json()?).map_err(|err| Error::io(&gp_path, err))?;
            policy.checkpoint().save(&dir.join(format!("ep{e:02}_policy.json")))?;
        }
    }

    let last = *costs.last().expect("at least the random episode");
    Ok(RunRecord {
        seed,
        config_hash: cfg.hash(),
        success: last < cfg.success_threshold,
        episode_costs: costs,
        wall_clock_s: clock.elapsed().as_secs_f64(),
        real_steps: data.len(),
        error: None,
    })
}

/// Run every seed, in parallel, isolating failures per seed.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    Ok(cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let res = catch_unwind(AssertUnwindSafe(|| run_seed(cfg, seed, out)));
            let msg = match res {
                Ok(Ok(r)) => return r,
                Ok(Err(e)) => e.to_string(),
                Err(p) => p
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into()),
            };
            log::error!("seed {seed} failed: {msg}");
            RunRecord {
                seed,
                config_hash: cfg.hash(),
                episode_costs: Vec::new(),
                success: false,
                wall_clock_s: 0.0,
                real_steps: 0,
                error: Some(msg),
            }
        })
        .collect())
}
