//! Posterior inference for regression models whose mean function solves an
//! ordinary differential equation.
//!
//! The pipeline: a fixed-step one-step solver produces the discrete mean
//! function, the initial state is marginalized by a Laplace approximation
//! (with exact derivatives of the discrete map), the noise precision has a
//! closed-form Gamma conditional, and the structural parameter is sampled
//! from a reparametrized lattice posterior or a griddy Gibbs chain.

pub mod dataset;
pub mod error;
pub mod laplace;
pub mod math;
pub mod models;
pub mod ode;
pub mod pipeline;
pub mod predict;
pub mod sampler;
pub mod sensitivity;
pub mod stats;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use laplace::{GammaParams, LaplaceEval, OptimOpts, PriorSpec, ThetaPrior};
pub use ode::{Method, OdeSystem, TimeGrid, Trajectory};
pub use sampler::{GridSpec, PosteriorGrid, SampleSet};
pub use sensitivity::{FitStats, SensMode, SensitivityBundle};
