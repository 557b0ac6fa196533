//! Cart-pole system, observation noise and episode costs.
//!
//! State is `[s, β, ṡ, β̇]` with `β = 0` upright. The pole is a uniform rod
//! of length `l` hinged at the cart, with tip at `(s + l sin β, l cos β)`.

use std::f64::consts::PI;

use nalgebra::{dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{exp_quadratic_expected_cost, mc_expected_cost};
use crate::gaussian::GaussianParams;
use crate::rollout::{Cost, ExpectedCost};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub friction: f64,
    pub gravity: f64,
    pub dt: f64,
    pub substeps: usize,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.5,
            pole_mass: 0.5,
            pole_length: 0.6,
            friction: 0.1,
            gravity: 9.82,
            dt: 0.1,
            substeps: 10,
        }
    }
}

impl CartPoleParams {
    fn deriv(&self, x: &[f64; 4], u: f64) -> [f64; 4] {
        let (m_c, m_p, l, g) = (self.cart_mass, self.pole_mass, self.pole_length, self.gravity);
        let (sb, cb) = x[1].sin_cos();
        let f = u - self.friction * x[2];
        let den = 4.0 * (m_c + m_p) - 3.0 * m_p * cb * cb;
        let s_dd = (4.0 * f + 2.0 * m_p * l * x[3] * x[3] * sb - 3.0 * m_p * g * sb * cb) / den;
        let b_dd = (6.0 * (m_c + m_p) * g * sb - 6.0 * f * cb - 3.0 * m_p * l * x[3] * x[3] * sb * cb) / (l * den);
        [x[2], x[3], s_dd, b_dd]
    }

    /// Advance one control period with the force held constant (RK4).
    pub fn step(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        let mut s = [x[0], x[1], x[2], x[3]];
        let h = self.dt / self.substeps as f64;
        let add = |a: &[f64; 4], b: &[f64; 4], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2], a[3] + c * b[3]];
        for _ in 0..self.substeps {
            let k1 = self.deriv(&s, u);
            let k2 = self.deriv(&add(&s, &k1, h / 2.0), u);
            let k3 = self.deriv(&add(&s, &k2, h / 2.0), u);
            let k4 = self.deriv(&add(&s, &k3, h), u);
            for i in 0..4 {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        DVector::from_column_slice(&s)
    }

    /// Kinetic plus potential energy.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let (m_c, m_p, l) = (self.cart_mass, self.pole_mass, self.pole_length);
        0.5 * (m_c + m_p) * x[2] * x[2]
            + 0.5 * m_p * l * x[1].cos() * x[2] * x[3]
            + m_p * l * l / 6.0 * x[3] * x[3]
            + 0.5 * m_p * self.gravity * l * x[1].cos()
    }

    pub fn tip(&self, x: &DVector<f64>) -> (f64, f64) {
        let l = self.pole_length;
        (x[0] + l * x[1].sin(), l * x[1].cos())
    }
}

/// Observation noise `σ² = k·σ²_base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub base_sigma: DVector<f64>,
    pub k: f64,
}

impl NoiseSpec {
    pub fn new(k: f64) -> Self {
        Self {
            base_sigma: dvector![0.01, 1f64.to_radians(), 0.1, 10f64.to_radians()],
            k,
        }
    }

    pub fn variance(&self) -> DVector<f64> {
        self.base_sigma.map(|s| self.k * s * s)
    }

    pub fn observe<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let sd = self.variance().map(f64::sqrt);
        DVector::from_fn(x.len(), |i, _| x[i] + sd[i] * rng.sample::<f64, _>(StandardNormal))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Angle,
    Tip,
}

/// `1 − exp(−(x−t)ᵀQ(x−t))` on the state.
#[derive(Debug, Clone)]
pub struct AngleCost {
    pub q: DMatrix<f64>,
    pub target: DVector<f64>,
}

impl Default for AngleCost {
    fn default() -> Self {
        Self {
            q: DMatrix::from_diagonal(&dvector![1.0, 1.0, 0.0, 0.0]),
            target: DVector::zeros(4),
        }
    }
}

impl Cost for AngleCost {
    fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let r = x - &self.target;
        let e = (-(r.transpose() * &self.q * &r)[0]).exp();
        (1.0 - e, (&self.q + self.q.transpose()) * r * e)
    }

    fn expected(&self, g: &GaussianParams) -> Result<ExpectedCost> {
        exp_quadratic_expected_cost(g, &self.q, &self.target)
    }
}

/// `1 − exp(−w·d²)` with `d` the distance of the pole tip from its
/// balanced position `(0, l)`.
#[derive(Debug, Clone)]
pub struct TipCost {
    pub length: f64,
    pub weight: f64,
    eps: Vec<DVector<f64>>,
}

impl TipCost {
    /// `samples` fixed draws are used for expectations under a Gaussian.
    pub fn new(length: f64, samples: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0074_6970);
        Self {
            length,
            weight: 8.0,
            eps: (0..samples)
                .map(|_| DVector::from_fn(4, |_, _| rng.sample(StandardNormal)))
                .collect(),
        }
    }
}

impl Cost for TipCost {
    fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let l = self.length;
        let (sb, cb) = x[1].sin_cos();
        let dx = x[0] + l * sb;
        let dy = l * cb - l;
        let e = (-self.weight * (dx * dx + dy * dy)).exp();
        let c = 2.0 * self.weight * e;
        (1.0 - e, dvector![c * dx, c * (dx * l * cb - dy * l * sb), 0.0, 0.0])
    }

    fn expected(&self, g: &GaussianParams) -> Result<ExpectedCost> {
        mc_expected_cost(|x| self.eval(x), g, &self.eps)
    }
}

/// Boxed cost of the requested kind.
pub fn make_cost(kind: CostKind, params: &CartPoleParams, samples: usize) -> Box<dyn Cost> {
    match kind {
        CostKind::Angle => Box::new(AngleCost::default()),
        CostKind::Tip => Box::new(TipCost::new(params.pole_length, samples)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Swingup,
    Balance,
}

impl Task {
    /// Mean start state: hanging for swing-up, upright for balancing.
    pub fn start_mean(self) -> DVector<f64> {
        match self {
            Task::Swingup => dvector![0.0, PI, 0.0, 0.0],
            Task::Balance => DVector::zeros(4),
        }
    }

    /// True start distribution, with per-dimension spread equal to the base
    /// observation noise.
    pub fn start(self) -> GaussianParams {
        let base = NoiseSpec::new(1.0).variance();
        GaussianParams {
            mu: self.start_mean(),
            sigma: DMatrix::from_diagonal(&base),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "swingup" => Ok(Task::Swingup),
            "balance" => Ok(Task::Balance),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

impl std::str::FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "angle" => Ok(CostKind::Angle),
            "tip" => Ok(CostKind::Tip),
            _ => Err(Error::Config(format!("unknown cost `{s}`"))),
        }
    }
}

/// Upright and hanging rest states.
pub fn equilibria() -> [DVector<f64>; 2] {
    [DVector::zeros(4), dvector![0.0, PI, 0.0, 0.0]]
}
