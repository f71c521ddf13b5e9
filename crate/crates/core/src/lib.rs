pub mod cli;
pub mod config;
pub mod error;
pub mod gconv;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod pointcloud;
pub mod selftest;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{GradStore, Tensor};
