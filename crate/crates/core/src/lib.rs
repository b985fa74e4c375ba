//! Differentiable cell search for speaker-embedding networks.

pub mod error;
pub mod tensor;
pub mod parallel;
pub mod params;
pub mod autodiff;
pub mod optim;
pub mod ops;
pub mod cell;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
pub mod arch;
pub mod container;
pub mod network;
pub mod audio;
pub mod synth;
pub mod data;
pub mod search;
pub mod train;
pub mod metrics;
pub mod gradsuite;
pub mod config;
