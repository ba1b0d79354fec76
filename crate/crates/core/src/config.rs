//! Experiment configuration, read from and snapshotted as TOML.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::contrastive::{ContrastiveConfig, EncoderConfig};
use crate::data::SynthConfig;
use crate::density::{FlowConfig, GmmConfig};
use crate::error::{Error, Result};
use crate::scoring::{HeatmapKind, PostprocessConfig, ScoreKind};
use crate::vae::VaeConfig;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "CRADL_OUTPUT_ROOT";
pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodsConfig {
    /// Flow density next to the GMMs.
    pub flow: bool,
    pub vae: bool,
    pub cevae: bool,
    /// NLL scoring on VAE/ceVAE posterior means.
    pub radl: bool,
}

impl Default for MethodsConfig {
    fn default() -> Self {
        Self {
            flow: true,
            vae: true,
            cevae: true,
            radl: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Slice scores considered during selection.
    pub detection: Vec<ScoreKind>,
    /// Heatmaps considered during selection.
    pub localization: Vec<HeatmapKind>,
    pub median_kernel: usize,
    pub sigma: f64,
    /// Test heatmaps written per method and seed by `evaluate`.
    pub export_heatmaps: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            detection: ScoreKind::ALL.to_vec(),
            localization: HeatmapKind::ALL.to_vec(),
            median_kernel: 5,
            sigma: 2.0,
            export_heatmaps: 4,
        }
    }
}

impl ScoringConfig {
    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            median_kernel: self.median_kernel,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: SynthConfig,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub augmentation: AugmentationPolicy,
    pub gmm: GmmConfig,
    pub flow: FlowConfig,
    pub vae: VaeConfig,
    pub methods: MethodsConfig,
    pub scoring: ScoringConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            data: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            augmentation: AugmentationPolicy::simclr(),
            gmm: GmmConfig::default(),
            flow: FlowConfig::default(),
            vae: VaeConfig::default(),
            methods: MethodsConfig::default(),
            scoring: ScoringConfig::default(),
        }
    }
}

/// The pipeline stage an artifact belongs to; decides which sections its
/// snapshot records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Simclr,
    Vae,
    Gmm(Source),
    Flow(Source),
}

/// Model whose representations a density is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Cradl,
    Vae,
    Cevae,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Cradl, Source::Vae, Source::Cevae];

    pub fn name(self) -> &'static str {
        match self {
            Source::Cradl => "cradl",
            Source::Vae => "vae",
            Source::Cevae => "cevae",
        }
    }
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown representation source {s:?}")))
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<&'a SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    encoder: Option<&'a EncoderConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    contrastive: Option<&'a ContrastiveConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    augmentation: Option<&'a AugmentationPolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gmm: Option<&'a GmmConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow: Option<&'a FlowConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vae: Option<&'a VaeConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list is empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::invalid(format!("seeds {:?} are not distinct", self.seeds)));
        }
        if self.gmm.components.is_empty() || self.gmm.components.contains(&0) {
            return Err(Error::invalid("GMM component list must be non-empty and positive"));
        }
        if self.encoder.nz == 0 || (self.encoder.nz % 2 != 0 && self.methods.flow) {
            return Err(Error::invalid("the flow needs an even, positive representation size"));
        }
        if self.methods.flow && self.methods.radl && (self.vae.nz % 2 != 0) {
            return Err(Error::invalid("the flow on VAE representations needs an even vae.nz"));
        }
        self.data.validate()?;
        self.contrastive.validate()?;
        self.augmentation.validate()?;
        self.flow.validate()?;
        self.vae.validate()?;
        if self.scoring.median_kernel % 2 == 0 || !(self.scoring.sigma > 0.0) {
            return Err(Error::invalid("median kernel must be odd and sigma > 0"));
        }
        if self.scoring.detection.is_empty() || self.scoring.localization.is_empty() {
            return Err(Error::invalid("scorer candidate lists must be non-empty"));
        }
        Ok(())
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// The sections an artifact of `stage` depends on, as TOML.
    pub fn snapshot(&self, stage: Stage) -> String {
        let mut s = Snapshot {
            data: Some(&self.data),
            encoder: None,
            contrastive: None,
            augmentation: None,
            gmm: None,
            flow: None,
            vae: None,
        };
        let source = match stage {
            Stage::Data => None,
            Stage::Simclr => Some(Source::Cradl),
            Stage::Vae => Some(Source::Vae),
            Stage::Gmm(src) => {
                s.gmm = Some(&self.gmm);
                Some(src)
            }
            Stage::Flow(src) => {
                s.flow = Some(&self.flow);
                Some(src)
            }
        };
        match source {
            None => {}
            Some(Source::Cradl) => {
                s.encoder = Some(&self.encoder);
                s.contrastive = Some(&self.contrastive);
                s.augmentation = Some(&self.augmentation);
            }
            Some(Source::Vae | Source::Cevae) => s.vae = Some(&self.vae),
        }
        toml::to_string(&s).expect("snapshot is representable as TOML")
    }

    pub fn write_snapshot(&self, dir: &Path, stage: Stage) -> Result<()> {
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.snapshot(stage)).map_err(|e| Error::io(&path, e))
    }

    /// Fails with [`Error::ConfigMismatch`] when `dir` was produced under
    /// different settings.
    pub fn check_snapshot(&self, dir: &Path, stage: Stage) -> Result<()> {
        let path = dir.join(SNAPSHOT_FILE);
        let found = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if found != self.snapshot(stage) {
            return Err(Error::ConfigMismatch(path));
        }
        Ok(())
    }
}
