use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Class 0 bags carry no witnesses; a bag of class `c > 0` contains at
    /// least one witness of class `c` and none of any other class.
    PresenceOr,
    /// Every class has a texture; the bag label is the strictly most
    /// frequent witness class.
    MajorityVote,
}

/// Oriented sinusoidal grating.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    /// Cycles per pixel.
    pub frequency: f64,
    pub angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub num_classes: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Probability that an instance of a class-`c` bag is a witness of `c`.
    pub witness_rate: Vec<f64>,
    pub textures: Vec<Texture>,
    pub amplitude: f64,
    /// Side of the square window holding a grating, as a fraction of the
    /// image side; the window is placed at a random offset.
    pub texture_extent: f64,
    /// Standard deviation of the per-pixel background noise.
    pub noise: f64,
    /// Half-width of the uniform orientation jitter of witness gratings;
    /// 90 makes their orientation uninformative.
    pub angle_jitter_deg: f64,
    /// Probability that a background instance carries a grating at a random
    /// orientation and a frequency from `distractor_frequency`.
    pub distractor_rate: f64,
    pub distractor_frequency: (f64, f64),
    pub label_rule: LabelRule,
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    /// Render witnesses as background while keeping latents and labels.
    pub ablate_signal: bool,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_classes: 2,
            n_min: 16,
            n_max: 64,
            image_size: 32,
            channels: 3,
            witness_rate: vec![0.5, 0.5],
            textures: vec![
                Texture {
                    frequency: 0.125,
                    angle_deg: 0.0,
                },
                Texture {
                    frequency: 0.125,
                    angle_deg: 45.0,
                },
            ],
            amplitude: 0.25,
            texture_extent: 1.0,
            noise: 0.15,
            angle_jitter_deg: 5.0,
            distractor_rate: 0.5,
            distractor_frequency: (0.06, 0.3),
            label_rule: LabelRule::PresenceOr,
            train_bags: 200,
            val_bags: 50,
            test_bags: 100,
            ablate_signal: false,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DataSpec(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad(format!("bad instance range [{}, {}]", self.n_min, self.n_max));
        }
        if self.image_size == 0 || self.channels == 0 {
            return bad("image size and channels must be positive".into());
        }
        if self.witness_rate.len() != self.num_classes || self.textures.len() != self.num_classes {
            return bad(format!(
                "witness_rate and textures need one entry per class ({})",
                self.num_classes
            ));
        }
        for (c, &r) in self.witness_rate.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("witness_rate[{c}] = {r} outside [0, 1]"));
            }
            let needs_witness = match self.label_rule {
                LabelRule::PresenceOr => c > 0,
                LabelRule::MajorityVote => true,
            };
            if needs_witness && r == 0.0 {
                return bad(format!("class {c} needs witness_rate > 0 under {:?}", self.label_rule));
            }
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad(format!("distractor_rate {} outside [0, 1]", self.distractor_rate));
        }
        let (lo, hi) = self.distractor_frequency;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("bad distractor_frequency range ({lo}, {hi})"));
        }
        if !(self.texture_extent > 0.0 && self.texture_extent <= 1.0) {
            return bad(format!("texture_extent {} outside (0, 1]", self.texture_extent));
        }
        if !(self.angle_jitter_deg >= 0.0) {
            return bad("angle_jitter_deg must be non-negative".into());
        }
        if !(self.noise >= 0.0 && self.amplitude >= 0.0) {
            return bad("noise and amplitude must be non-negative".into());
        }
        if self.train_bags + self.val_bags + self.test_bags == 0 {
            return bad("no bags requested".into());
        }
        Ok(())
    }
}
