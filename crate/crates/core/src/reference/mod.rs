//! Independent oracles: closed-form heat kernels and a finite-difference
//! parabolic solver.

mod fd;
mod kernels;
pub mod quad;

pub use fd::{fd_solve, grid_mass, FdSolverSettings, MAX_DT};
pub use kernels::{exact_semigroup, exact_semigroup_grid, hyperbolic_kernel, HeatKernelId, DEFAULT_L_MAX, SERIES_TOL};
