//! Multi-objective preference modeling and policy optimization over a
//! synthetic, fully enumerable response world.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod feedback;
pub mod logistic;
pub mod pipeline;
pub mod pm;
pub mod ppo;
pub mod prompts;
pub mod rng;
pub mod scalarization;
pub mod world;

pub use error::{Error, Result};
pub use scalarization::{
    scalarize, scalarize_batch, validate_spec, CheckedSpec, RewardVector, ScalarizationSpec,
    Variant,
};
