pub mod cli;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod interpret;
pub mod layers;
pub mod models;
pub mod numeric;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
