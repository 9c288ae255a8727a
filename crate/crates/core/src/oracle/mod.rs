//! Independent numerical solvers for the curriculum subproblems.

pub mod exact;
pub mod linearized;

pub use exact::{dispatch_mode, solve_exact_sampled, ExactSolution, ExactSolverSettings, SolveMode};
pub use linearized::{
    ConstraintKind, KktResiduals, LinearizedSubproblem, Multipliers, NumericSolution, PerformanceConstraint,
};
