//! Synthetic brain-like slices with injected anomalies.

mod dataset;
pub mod image;
pub mod synth;

pub use dataset::{build_dataset, build_split, derive_rng, Dataset, LabeledSample, Split, SplitSet};
pub use image::{preprocess, resize};
pub use synth::{generate_normal, inject_anomaly, SynthConfig, TextureFamily};

/// Slices with more anomalous pixels than this are labeled anomalous.
pub const SLICE_LABEL_MIN_PIXELS: usize = 5;

pub fn slice_label(anomaly_mask: &[bool]) -> bool {
    anomaly_mask.iter().filter(|&&m| m).count() > SLICE_LABEL_MIN_PIXELS
}
