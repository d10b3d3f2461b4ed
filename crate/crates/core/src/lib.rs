//! Quenched conditional laws of critical branching processes in i.i.d.
//! random environments with linear-fractional offspring laws, together with
//! the Monte Carlo machinery used to check the limit theorems for `Z_m`
//! given extinction at a fixed generation `T = n`.

pub mod conditioned;
pub mod env_model;
pub mod error;
pub mod experiments;
pub mod fluctuation;
pub mod golden;
pub mod lf_algebra;
pub mod numeric;
pub mod rng;
pub mod stats;

pub use env_model::{sample_environment, EnvSpec, EnvironmentPath, OffspringLaw};
pub use error::{Error, Result};
pub use lf_algebra::LfMap;
pub use rng::StreamFactory;
