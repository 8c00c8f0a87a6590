//! Second-order cone programming with an embedded primal-dual interior-point
//! method.
//!
//! The public surface is small: build a [`ConicProgram`] from linear
//! constraints and second-order cone constraints of the form
//! `||A x + b||_2 <= c' x + d`, then call [`solve_conic`]. The solver runs a
//! homogeneous self-dual embedding with Nesterov-Todd scaling and a
//! Mehrotra-style predictor-corrector, so it detects infeasibility instead of
//! stalling, and it never reports `Optimal` unless the duality gap and primal
//! residual are below tolerance.

mod ipm;
mod program;

pub use ipm::{solve_conic, IpmSettings};
pub use program::{
    ConicProgram, ConicSolution, LinearConstraint, ProgramError, Sense, SocConstraint,
    SolveStatus, SparseRow,
};
