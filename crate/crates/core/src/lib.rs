//! Gradient estimation on probabilistic computation graphs.
//!
//! The crate is organised bottom-up:
//!
//! - [`ad`]: a small reverse-mode tape with a Cholesky adjoint and a
//!   finite-difference oracle.
//! - [`pcg`]: graphs of distribution parameters, path enumeration, and the
//!   blocked-path decompositions of the total derivative.
//! - [`gaussian`]: reparameterized sampling, scores, and mixture densities.
//! - [`estimators`]: pathwise, likelihood-ratio, batch importance weighted,
//!   density-estimation and Gaussian-shaping estimators, plus the
//!   inverse-variance combination used by total propagation.
//! - [`gp`], [`cartpole`], [`policy`], [`rollout`]: the pieces of a
//!   model-based policy search loop.
//! - [`experiment`]: episode orchestration and report files.

pub mod ad;
pub mod cartpole;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod gaussian;
pub mod gp;
pub mod pcg;
pub mod policy;
pub mod rollout;

pub use ad::{GradMatrix, NodeId, Tape};
pub use error::{Error, Result};
pub use estimators::{EstimatorKind, GradientEstimate};
pub use experiment::{ExperimentConfig, RunRecord};
pub use gaussian::{DiagGaussian, GaussianParams};
pub use gp::GpModel;
pub use rollout::ParticleBatch;
