use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Number of prompt tokens `k`.
    pub num_prompts: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VitConfig {
    /// ViT-T/16 at 224 pixels with one prompt token.
    pub fn vit_tiny() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 192,
            num_layers: 12,
            num_heads: 3,
            mlp_ratio: 4.0,
            num_prompts: 1,
        }
    }

    /// Default CPU-scale encoder for 32x32 synthetic instances.
    pub fn desk() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_prompts: 1,
        }
    }

    /// Two-layer, 16-wide encoder on 16x16 images; small enough for exact
    /// gradient oracles.
    pub fn toy() -> Self {
        VitConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_prompts: 1,
        }
    }

    pub fn with_prompts(mut self, k: usize) -> Self {
        self.num_prompts = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        Ok(())
    }

    /// Patches per instance, `w`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch length, `patch_size^2 * channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// `w + k + 1`.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + self.num_prompts + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Backbone parameter count implied by the configuration alone.
    pub fn backbone_params(&self) -> usize {
        let d = self.embed_dim;
        let hidden = self.mlp_hidden();
        let embed = self.patch_dim() * d + d + (self.num_patches() + 1) * d + d;
        let layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d);
        embed + self.num_layers * layer + 2 * d
    }
}
