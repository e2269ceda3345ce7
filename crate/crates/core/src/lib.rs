//! Dual-path vision-language gender and attribute classifier.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
