pub mod autograd;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use config::{Config, LossTerm};
pub use error::{Error, Result};
