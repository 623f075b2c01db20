//! The experiment document read by `--config`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use dbfunet::NetConfig;
use serde::{Deserialize, Serialize};
use vessel_core::labelprop::DEFAULT_MATCH_RADIUS;
use vessel_core::phantom::SuiteConfig;
use vessel_core::srpl::{PerturbationParams, ThresholdSegmenter};
use vessel_train::prompt::{PromptNetConfig, PromptTrainConfig};
use vessel_train::{LabelSource, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InterpMethod {
    Aipl,
    Cipl,
}

impl InterpMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Aipl => "aipl",
            Self::Cipl => "cipl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpConfig {
    /// Centroid distance (voxels) for matching components across slices.
    pub match_radius: f64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            match_radius: DEFAULT_MATCH_RADIUS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterKind {
    /// Intensity threshold inside the prompt box.
    Threshold,
    /// Ground-truth lookup; for pipeline checks only.
    Oracle,
    /// Small trainable promptable network, fitted on the expert slices.
    Promptnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrplConfig {
    pub segmenter: SegmenterKind,
    pub perturbation: PerturbationParams,
    pub threshold: ThresholdSegmenter,
    pub oracle_dilate: usize,
    pub prompt_net: PromptNetConfig,
    pub prompt_train: PromptTrainConfig,
}

impl Default for SrplConfig {
    fn default() -> Self {
        Self {
            segmenter: SegmenterKind::Threshold,
            perturbation: PerturbationParams::default(),
            threshold: ThresholdSegmenter::default(),
            oracle_dilate: 0,
            prompt_net: PromptNetConfig::default(),
            prompt_train: PromptTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Network initialisation and refinement streams. Phantom generation
    /// and patch sampling keep their own seeds.
    pub seed: u64,
    pub work_dir: PathBuf,
    pub phantom: SuiteConfig,
    pub interp: InterpConfig,
    pub srpl: SrplConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Labels the network is trained on.
    pub labels_source: LabelSource,
    /// Whether `run-all` also runs the four-row ablation.
    pub ablate: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            work_dir: PathBuf::from("run"),
            phantom: SuiteConfig::default(),
            interp: InterpConfig::default(),
            srpl: SrplConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            labels_source: LabelSource::Srpl,
            ablate: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.phantom.validate()?;
        self.srpl.perturbation.validate()?;
        self.net.validate()?;
        self.train.validate(self.net.patch_multiple())?;
        anyhow::ensure!(
            self.interp.match_radius > 0.0,
            "interp.match_radius must be positive"
        );
        Ok(())
    }
}
