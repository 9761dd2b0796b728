//! Simulator for parameter-parallel distributed training of variational
//! quantum classifiers on noisy simulated QPUs.
//!
//! A parameter server splits the circuit parameters into `M` groups; each
//! simulated node estimates its group's gradient with the parameter-shift
//! rule on its own density-matrix simulator and noise profile.

pub mod compression;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradient;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod net;
pub mod noise_lab;
pub mod runtime;
pub mod seed;

pub use error::{Error, Result};
