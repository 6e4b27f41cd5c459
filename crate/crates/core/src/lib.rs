//! Simulation of non-colliding particle systems with singular repulsion.
//!
//! The crate provides the semi-implicit Milstein and semi-implicit
//! Euler-Maruyama schemes, a damped-Newton solver for their implicit step,
//! seeded dyadic Brownian increments, and a coupled-refinement Monte Carlo
//! harness that estimates empirical strong convergence orders.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the `*F64`
//! aliases below name the double-precision instantiations used by the CLI.

pub mod brownian;
pub mod config;
pub mod convergence;
pub mod error;
pub mod model;
pub mod scalar;
pub mod schemes;
pub mod selfcheck;
pub mod solver;

pub use brownian::{split, IncrementGrid};
pub use error::{Error, Result};
pub use model::{InteractionMatrix, ParticleSystem, ScalarField, ValidationReport, Violation};
pub use scalar::Real;
pub use schemes::{simulate_path, SchemeKind, Trajectory};
pub use solver::{solve_pair_closed_form, ImplicitProblem, Solution, SolverOptions};

pub type ParticleSystemF64 = ParticleSystem<f64>;
pub type ParticleSystemF32 = ParticleSystem<f32>;
pub type InteractionMatrixF64 = InteractionMatrix<f64>;
pub type ScalarFieldF64 = ScalarField<f64>;
pub type IncrementGridF64 = IncrementGrid<f64>;
pub type TrajectoryF64 = Trajectory<f64>;
pub type SolverOptionsF64 = SolverOptions<f64>;
pub type ExperimentConfigF64 = convergence::ExperimentConfig<f64>;

