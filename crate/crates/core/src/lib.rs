pub mod baselines;
pub mod bench;
pub mod decoder;
pub mod encoder;
pub mod env;
pub mod error;
pub mod instances;
pub mod numcore;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
