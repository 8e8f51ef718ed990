use serde::{Deserialize, Serialize};

use super::config::VitConfig;

/// Parameter counts by group, and which groups an optimizer touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub prompt: usize,
    pub head: usize,
    pub backbone: usize,
    pub backbone_frozen: bool,
}

impl ParamCensus {
    /// Scalars any optimizer updates.
    pub fn trainable(&self) -> usize {
        let backbone = if self.backbone_frozen { 0 } else { self.backbone };
        self.prompt + self.head + backbone
    }
}

/// Prompt count is `k * d`. Prompt tokens at depth one and beyond are
/// activations and never counted.
pub fn count_trainable_params(config: &VitConfig, head_params: usize, backbone_frozen: bool) -> ParamCensus {
    ParamCensus {
        prompt: config.num_prompts * config.embed_dim,
        head: head_params,
        backbone: config.backbone_params(),
        backbone_frozen,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_counts() {
        let tiny = VitConfig::vit_tiny();
        assert_eq!(count_trainable_params(&tiny, 0, true).prompt, 192);
        assert_eq!(count_trainable_params(&tiny.clone().with_prompts(0), 0, true).prompt, 0);
        let mut small = VitConfig::toy().with_prompts(3);
        small.embed_dim = 16;
        assert_eq!(count_trainable_params(&small, 0, true).prompt, 48);
    }

    #[test]
    fn frozen_backbone_is_reported_but_not_trainable() {
        let c = count_trainable_params(&VitConfig::vit_tiny(), 1000, true);
        assert!(c.backbone > 5_000_000);
        assert_eq!(c.trainable(), 1192);
        let full = ParamCensus {
            backbone_frozen: false,
            ..c
        };
        assert_eq!(full.trainable(), 1192 + c.backbone);
    }
}
