pub mod checkpoint;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod mech_analysis;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
