pub mod augment;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod density;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scoring;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
