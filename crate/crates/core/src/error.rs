use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("node {0} is not on the tape")]
    UnknownNode(usize),
    #[error("malformed tape: node {node} references later node {input}")]
    MalformedTape { node: usize, input: usize },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("matrix is singular")]
    Singular,
    #[error("gradient path from input to objective crosses a non-differentiable node")]
    NotReparameterizable,

    #[error("unknown graph node `{0}`")]
    UnknownGraphNode(String),
    #[error("graph has a cycle through `{0}`")]
    Cyclic(String),
    #[error("graph has {0} nodes; path enumeration is capped at {1}")]
    GraphTooLarge(usize, usize),
    #[error("invalid blocking set: {0}")]
    InvalidBlockingSet(String),
    #[error("edge partial into `{0}` is not computable (node flagged intractable)")]
    Intractable(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least {needed} particles, got {got}")]
    TooFewParticles { needed: usize, got: usize },
    #[error("degenerate particle cloud: {0}")]
    Degenerate(String),
    #[error("horizon must be positive")]
    EmptyHorizon,
    #[error("estimator configuration mismatch: {0}")]
    Config(String),

    #[error("GP training needs at least 2 points, got {0}")]
    NotEnoughData(usize),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
