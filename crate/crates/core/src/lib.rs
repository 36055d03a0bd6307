//! Finite-horizon linear-quadratic control of evolution equations whose input
//! acts through a convolution memory term,
//!
//! `w' = A w + B u + ∫_0^t k(t - σ) B u(σ) dσ`,  `J = ∫ |C w|² + |u|²`.
//!
//! The crate discretizes the lifted solution operators on an equispaced grid,
//! solves the open-loop problem, builds the feedback kernels and the cost
//! operators `P0, P1, P2`, integrates the coupled Riccati system backward in
//! time and simulates the closed loop.

pub mod closed_loop;
pub mod cost_ops;
pub mod error;
pub mod lifted;
pub mod open_loop;
pub mod presets;
pub mod problem;
pub mod quadrature;
pub mod riccati;
pub mod semigroup;

pub use error::{MemlqError, Result};
pub use lifted::DiscretizedOperators;
pub use problem::{
    build_grid, make_augmented_state, validate_spec, AugmentedState, ControlTrajectory, KernelSpec,
    ProblemSpec, RawProblem, SolveResult, StateTrajectory, TimeGrid,
};
pub use semigroup::{build_propagators, input_propagator, matrix_exponential, PropagatorCache};
