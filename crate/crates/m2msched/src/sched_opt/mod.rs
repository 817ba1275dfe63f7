//! Convex utility maximization over time-sharing policies: the single-stage
//! route over all `R!` priority orders, the iterative subset recursion, the
//! shared Newton active-set core, and the audit helpers (convexity and
//! complexity).

mod complexity;
mod convexity;
mod io;
mod kkt;
mod sso;

pub use complexity::{complexity_report, ComplexityReport};
pub use convexity::{verify_convexity, ConvexityReport};
pub use io::{aggregate_gamma, solve_io, solve_io_with_constants, subset_zeta, IoSolve, OptimizerReport};
pub use kkt::{solve_kkt, KktOptions, KktProblem, KktRow, KktSolution, SolveError};
pub use sso::{solve_sso, SsoSolve, SSO_MAX_CLASSES};
