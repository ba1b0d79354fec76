//! On-disk formats: CRTF tensors, `key=value` manifests and PGM images.

pub mod checkpoint;
pub mod crtf;
pub mod manifest;
pub mod pgm;

pub use checkpoint::Checkpoint;
pub use crtf::{decode, encode, read_tensor, write_tensor};
pub use manifest::Manifest;
