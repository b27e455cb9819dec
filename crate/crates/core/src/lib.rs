//! Denoising diffusion probabilistic models at desk scale.
//!
//! The crate follows the construction step by step: a variance-preserving
//! Gaussian noising process ([`schedule`], [`forward`]), a level-conditioned
//! regression network ([`denoiser`]), the family of training objectives
//! ([`objectives`]), stochastic optimisation ([`trainer`]), ancestral
//! generation ([`sampler`]) and evaluation against analytic oracles
//! ([`datasets`], [`eval`]).

pub mod cli;
pub mod datasets;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod forward;
pub mod io;
pub mod objectives;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use forward::{Batch, PosteriorCoefficients};
pub use schedule::{Schedule, ScheduleSpec};
