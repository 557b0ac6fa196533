//! Probabilistic computation graphs and the path-sum view of total derivatives.
//!
//! A graph node holds the parameters `ζ` of a distribution as a flat vector;
//! each node's parameters are a deterministic function of its parents'.
//! [`total_derivative_pathsum`] sums ordered edge-partial products over all
//! paths, and the two decompositions split that sum at a blocking set of
//! intermediate nodes. This machinery is an exact reference for small graphs,
//! not the production gradient path.

mod expr;
mod graph;
mod paths;

pub use expr::{parse_expr, Expr, Func};
pub use graph::{DistKind, PcgGraph, PcgNode};
pub use paths::{
    all_valid_blocking_sets, composed_map, decompose_first_half, decompose_second_half, enumerate_paths,
    nodes_between, random_polynomial_dag, total_derivative_pathsum, validate_blocking_set, BlockingSet,
    DecompTerm, Decomposition, EdgeJacobians, PathSet, MAX_PATH_NODES,
};
