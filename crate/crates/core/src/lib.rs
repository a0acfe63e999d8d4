//! Unpaired adversarial guitar amplifier modeling: a causal WaveNet
//! generator, multi-scale and multi-period discriminators, hinge losses,
//! evaluation metrics, training loops and the `ampgan` command line.

pub mod audio;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod discriminators;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
