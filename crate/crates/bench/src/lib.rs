//! Fixtures for the benchmarks: a linear-Gaussian particle batch and a GP
//! model trained on random cart-pole transitions.

use nalgebra::{dmatrix, dvector, DVector};
use pcgrad::cartpole::{CartPoleParams, Task};
use pcgrad::experiment::cartpole_encoding;
use pcgrad::gp::GpTrainConfig;
use pcgrad::policy::RbfPolicy;
use pcgrad::rollout::toy::{AffinePolicy, LinearGaussian, QuadraticCost};
use pcgrad::rollout::{rollout_particles, RolloutConfig};
use pcgrad::{GaussianParams, GpModel, ParticleBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_cost() -> QuadraticCost {
    QuadraticCost {
        w: dmatrix![1.0, 0.2; 0.2, 0.5],
        lin: dvector![0.1, 0.0],
    }
}

pub fn toy_batch(particles: usize, horizon: usize, seed: u64) -> ParticleBatch {
    let dynamics = LinearGaussian {
        a: dmatrix![1.0, 0.1; 0.0, 0.95],
        b: dmatrix![0.0; 0.1],
        noise: dvector![0.05, 0.05],
    };
    let policy = AffinePolicy::from_params(1, 2, &[-0.4, -0.7, 0.3]);
    let start = GaussianParams::isotropic(dvector![0.5, -0.3], 0.01);
    let cfg = RolloutConfig {
        particles,
        horizon,
        seed,
        resample: false,
    };
    rollout_particles(&dynamics, &policy, &toy_cost(), &start, &cfg).expect("toy rollout")
}

/// `(x, u, x')` from random-force episodes of 30 steps starting hanging.
pub fn cartpole_transitions(n: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let params = CartPoleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut x = Task::Swingup.start_mean();
    while out.len() < n {
        if out.len() % 30 == 0 {
            x = Task::Swingup.start_mean();
        }
        let u = rng.gen_range(-10.0..10.0);
        let next = params.step(&x, u);
        out.push((x.clone(), dvector![u], next.clone()));
        x = next;
    }
    out
}

pub fn cartpole_gp(n: usize, seed: u64) -> GpModel {
    let cfg = GpTrainConfig {
        restarts: 1,
        max_iters: 50,
        seed,
        ..Default::default()
    };
    GpModel::train(cartpole_encoding(), &cartpole_transitions(n, seed), &cfg).expect("gp training")
}

pub fn swingup_policy(seed: u64) -> RbfPolicy {
    RbfPolicy::random(50, &Task::Swingup.start_mean(), &DVector::from_element(4, 1.0), 10.0, seed)
}
