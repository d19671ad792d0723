//! CrossDiff: cross-conditional diffusion for slender-crack segmentation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod propagation;
pub mod run;
pub mod schedule;
pub mod seed;
pub mod staple;
pub mod tensor;
pub mod training;
pub mod unet;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::CrossDiff;
pub use tensor::Tensor;
