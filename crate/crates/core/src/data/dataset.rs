use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::preprocess;
use super::synth::{generate_normal, inject_anomaly, SynthConfig};
use super::slice_label;
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Holdout,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Holdout, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    /// Whether the split mixes normal and anomalous slices.
    pub fn is_mixed(self) -> bool {
        matches!(self, Split::Val | Split::Test)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for one `(seed, stream, index)` triple.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// Preprocessed `(H, W)` image.
    pub image: Tensor,
    pub brain_mask: Vec<bool>,
    pub anomaly_mask: Vec<bool>,
    pub slice_label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub resolution: usize,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.slice_label).collect()
    }

    pub fn slice_prevalence(&self) -> f64 {
        self.samples.iter().filter(|s| s.slice_label).count() as f64 / self.len().max(1) as f64
    }

    /// Anomalous fraction of brain pixels.
    pub fn voxel_prevalence(&self) -> f64 {
        let (mut pos, mut total) = (0usize, 0usize);
        for s in &self.samples {
            for (&b, &a) in s.brain_mask.iter().zip(&s.anomaly_mask) {
                total += b as usize;
                pos += (a && b) as usize;
            }
        }
        pos as f64 / total.max(1) as f64
    }

    /// Stacks the selected images into a `(B, 1, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let r = self.resolution;
        let mut data = Vec::with_capacity(indices.len() * r * r);
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| {
                Error::invalid(format!("sample {i} out of range for {} split", self.split))
            })?;
            data.extend_from_slice(s.image.data());
        }
        Tensor::new(vec![indices.len(), 1, r, r], data)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let r = self.resolution;
        let mut index = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            write_tensor(dir.join(format!("image_{i:06}.crtf")), &s.image)?;
            write_tensor(dir.join(format!("brainmask_{i:06}.crtf")), &mask_tensor(&s.brain_mask, r)?)?;
            write_tensor(dir.join(format!("anomask_{i:06}.crtf")), &mask_tensor(&s.anomaly_mask, r)?)?;
            index.push_str(&format!("{i:06},{}\n", s.slice_label as u8));
        }
        let path = dir.join(INDEX_FILE);
        fs::write(&path, index).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>, split: Split) -> Result<Self> {
        let dir = dir.as_ref();
        let index_path = dir.join(INDEX_FILE);
        let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut samples = Vec::new();
        let mut resolution = 0;
        for line in index.lines().filter(|l| !l.trim().is_empty()) {
            let bad = || Error::Format {
                what: "dataset index",
                detail: format!("{}: bad line {line:?}", index_path.display()),
            };
            let (id, label) = line.split_once(',').ok_or_else(bad)?;
            let label = match label {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            let image = read_tensor(dir.join(format!("image_{id}.crtf")))?;
            let brain = read_mask(&dir.join(format!("brainmask_{id}.crtf")))?;
            let anomaly = read_mask(&dir.join(format!("anomask_{id}.crtf")))?;
            let side = match image.shape() {
                [h, w] if h == w => *h,
                other => {
                    return Err(Error::Format {
                        what: "dataset image",
                        detail: format!("sample {id} has shape {other:?}"),
                    })
                }
            };
            if resolution == 0 {
                resolution = side;
            }
            if side != resolution || brain.len() != side * side || anomaly.len() != side * side {
                return Err(Error::Format {
                    what: "dataset sample",
                    detail: format!("sample {id} does not match resolution {resolution}"),
                });
            }
            if slice_label(&anomaly) != label {
                return Err(Error::Format {
                    what: "dataset index",
                    detail: format!("label of sample {id} disagrees with its anomaly mask"),
                });
            }
            samples.push(LabeledSample {
                image,
                brain_mask: brain,
                anomaly_mask: anomaly,
                slice_label: label,
            });
        }
        Ok(Self {
            split,
            resolution,
            samples,
        })
    }
}

fn mask_tensor(mask: &[bool], side: usize) -> Result<Tensor> {
    Tensor::new(vec![side, side], mask.iter().map(|&m| m as u8 as f32).collect())
}

fn read_mask(path: &Path) -> Result<Vec<bool>> {
    Ok(read_tensor(path)?.data().iter().map(|&v| v > 0.5).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: Dataset,
    pub holdout: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitSet {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Holdout => &self.holdout,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        for split in Split::ALL {
            self.get(split).save(root.as_ref().join(split.name()))?;
        }
        Ok(())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let missing: Vec<_> = Split::ALL
            .iter()
            .map(|s| root.join(s.name()).join(INDEX_FILE))
            .filter(|p| !p.exists())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingArtifacts(missing));
        }
        let load = |s: Split| Dataset::load(root.join(s.name()), s);
        Ok(Self {
            train: load(Split::Train)?,
            holdout: load(Split::Holdout)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        })
    }
}

/// Generates one split. Mixed splits contain exactly
/// `round(prevalence * n)` slices with an injected anomaly.
pub fn build_split(config: &SynthConfig, split: Split) -> Result<Dataset> {
    config.validate()?;
    let n = match split {
        Split::Train => config.n_train,
        Split::Holdout => config.n_holdout,
        Split::Val => config.n_val,
        Split::Test => config.n_test,
    };
    let mut anomalous = vec![false; n];
    if split.is_mixed() {
        let k = (config.prevalence * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(config.seed, split.tag(), u64::MAX));
        for &i in &order[..k] {
            anomalous[i] = true;
        }
    }
    let samples = anomalous
        .iter()
        .enumerate()
        .map(|(i, &inject)| {
            let mut rng = derive_rng(config.seed, split.tag(), i as u64);
            let (raw, brain) = generate_normal(config, &mut rng)?;
            let (raw, anomaly) = if inject {
                inject_anomaly(&raw, &brain, &mut rng, config.anomaly_size, config.texture)?
            } else {
                let none = vec![false; brain.len()];
                (raw, none)
            };
            Ok(LabeledSample {
                image: preprocess(&raw)?,
                slice_label: slice_label(&anomaly),
                brain_mask: brain,
                anomaly_mask: anomaly,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        split,
        resolution: config.resolution,
        samples,
    })
}

pub fn build_dataset(config: &SynthConfig) -> Result<SplitSet> {
    Ok(SplitSet {
        train: build_split(config, Split::Train)?,
        holdout: build_split(config, Split::Holdout)?,
        val: build_split(config, Split::Val)?,
        test: build_split(config, Split::Test)?,
    })
}
