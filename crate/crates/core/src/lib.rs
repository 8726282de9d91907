//! Layered controllable video generation: mask discovery, mask-conditioned
//! vector-quantized generation, control fitting and two-stage training.

pub mod checkpoint;
pub mod config;
pub mod control;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod masknet;
pub mod nn;
pub mod optim;
pub mod rollout;
pub mod trainer;
pub mod vqgen;

pub use error::{Error, Result};
