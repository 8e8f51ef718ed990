use crate::error::{Error, Result};
use crate::mil::{HeadConfig, MilHead, TaskSpec};
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::vit::{count_trainable_params, Backbone, ParamCensus, PromptSet, VitConfig};

use super::config::TrainMode;

/// Feature extractor `F` (backbone plus optional prompt tokens) and head `G`.
#[derive(Clone, Debug)]
pub struct MilModel<S: Scalar> {
    pub backbone: Backbone<S>,
    pub prompt: Option<PromptSet<S>>,
    pub head: MilHead<S>,
    pub task: TaskSpec,
}

impl<S: Scalar> MilModel<S> {
    /// Fresh model. The backbone and head depend only on `seed`, not on the
    /// mode, so models built for different modes share them exactly.
    pub fn init(vit: &VitConfig, head: &HeadConfig, task: TaskSpec, mode: TrainMode, seed: u64) -> Result<Self> {
        let backbone = Backbone::init(vit, seed)?;
        Self::from_backbone(backbone, head, task, mode, vit.num_prompts, seed)
    }

    /// Builds a model around an existing backbone, with `k` prompt tokens
    /// unless `mode` is conventional.
    pub fn from_backbone(
        mut backbone: Backbone<S>,
        head: &HeadConfig,
        task: TaskSpec,
        mode: TrainMode,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        task.validate()?;
        let k = if mode == TrainMode::Conventional { 0 } else { k };
        if mode == TrainMode::Prompt && k == 0 {
            return Err(Error::Config("prompt mode needs at least one prompt token".into()));
        }
        backbone.config.num_prompts = k;
        let d = backbone.config.embed_dim;
        let prompt = (k > 0).then(|| PromptSet::init(k, d, seed.wrapping_add(1)));
        let head = MilHead::init(head, d, &task, seed.wrapping_add(2))?;
        Ok(MilModel {
            backbone,
            prompt,
            head,
            task,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.prompt.as_ref().map_or(0, |p| p.len())
    }

    pub fn census(&self, mode: TrainMode) -> ParamCensus {
        count_trainable_params(&self.backbone.config, self.head.num_params(), mode.backbone_frozen())
    }
}
