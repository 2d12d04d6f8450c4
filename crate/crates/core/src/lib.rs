//! Degeneracy-free particle filtering.
//!
//! Equally weighted particles are moved, rather than reweighted, so that a
//! localized cumulative distance to the Bayesian posterior stays minimal
//! while the likelihood is switched on progressively.

pub mod cli;
pub mod dirac;
pub mod distance;
pub mod error;
pub mod filter;
pub mod flow;
pub mod homotopy;

pub use dirac::{bayes_reweight, ParticleSet};
pub use distance::{distance, gradient, hessian, hessian_recursive, DistanceParams};
pub use error::{Error, Result};
pub use flow::{integrate_flow, FlowConfig, FlowVariant, Integrator};
pub use homotopy::{LikelihoodModel, Schedule};
