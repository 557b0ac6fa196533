//! Minimal reverse-mode differentiation: a matrix-valued tape, the Cholesky
//! adjoint, and a finite-difference oracle.

mod chol;
mod fd;
mod tape;

pub use chol::{chol_grad, cholesky_lower};
pub(crate) use chol::{solve_lower, solve_lower_transpose};
pub use fd::{central_jacobian, fd_check, FdReport, FD_STEP};
pub use tape::{GradMatrix, Gradients, NodeId, Tape};
