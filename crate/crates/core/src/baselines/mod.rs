//! Reference solutions and benchmark policies.

pub mod a2c;
pub mod cdlp;
pub mod dp;
pub mod eval;
pub mod simplex;

pub use a2c::{train_a2c, A2cConfig};
pub use cdlp::{solve_cdlp, CdlpPolicy, CdlpSolution};
pub use dp::{solve_dp, DpSolution};
pub use eval::{evaluate, EvalReport};
pub use simplex::{simplex_solve, LpSolution};
