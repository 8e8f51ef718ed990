use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::{HeadConfig, TaskKind, TaskSpec};
use crate::synth::GenSpec;
use crate::trainer::{PretrainConfig, TrainConfig, TrainMode};
use crate::vit::VitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneInit {
    /// Fixed-seed random weights.
    Random,
    /// Briefly trained on an auxiliary grating task, then frozen.
    PretrainLite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub init: BackboneInit,
    pub pretrain: PretrainConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            init: BackboneInit::PretrainLite,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![64, 128, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub k_values: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            k_values: vec![1, 2, 3],
        }
    }
}

/// Everything one run needs. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: TrainMode,
    /// Where reports and checkpoints go; `--out` overrides it.
    pub output_dir: PathBuf,
    /// Read bags from this directory instead of generating `data`.
    pub dataset_dir: Option<PathBuf>,
    pub model: VitConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub data: GenSpec,
    pub bench: BenchConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: TrainMode::Prompt,
            output_dir: PathBuf::from("runs"),
            dataset_dir: None,
            model: VitConfig::default(),
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            task: TaskSpec {
                kind: TaskKind::SubtypeBinary,
                num_classes: 2,
            },
            train: TrainConfig::default(),
            data: GenSpec::default(),
            bench: BenchConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; errors carry the line and column of the problem.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.mode == TrainMode::Prompt && self.model.num_prompts == 0 {
            return Err(Error::Config("mode = \"prompt\" needs model.num_prompts >= 1".into()));
        }
        if self.head.attn_dim == 0 {
            return Err(Error::Config("head.attn_dim must be positive".into()));
        }
        if self.dataset_dir.is_none() {
            self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
            if self.data.num_classes != self.task.num_classes {
                return Err(Error::Config(format!(
                    "data has {} classes but the task has {}",
                    self.data.num_classes, self.task.num_classes
                )));
            }
            if self.data.image_size != self.model.image_size || self.data.channels != self.model.channels {
                return Err(Error::Config("data image size/channels differ from the model's".into()));
            }
        }
        if self.ablation.k_values.contains(&0) {
            return Err(Error::Config("ablation k values must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `--seed`: the training, data, and pretraining seeds all follow.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self.backbone.pretrain.seed = seed;
        self
    }
}
