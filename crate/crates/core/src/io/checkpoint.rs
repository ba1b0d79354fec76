use std::fs;
use std::path::Path;

use super::crtf::{read_tensor, write_tensor};
use super::manifest::Manifest;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
const TENSOR_PREFIX: &str = "tensor.";

/// A directory of named CRTF tensors plus a manifest mapping each name to
/// its file alongside free-form hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub manifest: Manifest,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(manifest: Manifest) -> Self {
        Self {
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: format!("no tensor named {name:?}"),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        for (name, t) in &self.tensors {
            let file = format!("{name}.crtf");
            write_tensor(dir.join(&file), t)?;
            manifest.set(format!("{TENSOR_PREFIX}{name}"), file);
        }
        manifest.save(dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::MissingArtifacts(vec![manifest_path]));
        }
        let manifest = Manifest::load(&manifest_path)?;
        let mut tensors = Vec::new();
        for (k, v) in manifest.entries() {
            if let Some(name) = k.strip_prefix(TENSOR_PREFIX) {
                tensors.push((name.to_string(), read_tensor(dir.join(v))?));
            }
        }
        Ok(Self { manifest, tensors })
    }
}
