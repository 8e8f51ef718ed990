use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// L2 penalty added to the gradient.
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineAnnealing {
    /// Schedule length in epochs; defaults to the number of epochs.
    pub t_max: Option<usize>,
    pub eta_min: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Which parameters are optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Head and prompt tokens; backbone frozen.
    Prompt,
    /// Head only, no prompt tokens.
    Conventional,
    /// Head, prompt tokens, and the whole backbone.
    Full,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Prompt => "prompt",
            TrainMode::Conventional => "conventional",
            TrainMode::Full => "full",
        }
    }

    pub fn backbone_frozen(self) -> bool {
        self != TrainMode::Full
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Instances per forward pass; a bag of `n` runs in `ceil(n / b)` batches.
    pub instance_batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    /// Learning rate of the prompt tokens (and backbone when fine-tuning);
    /// defaults to `base_lr`. Both follow the same schedule.
    pub prompt_lr: Option<f64>,
    pub weight_decay: f64,
    pub lr_schedule: CosineAnnealing,
    pub seed: u64,
    pub precision: Precision,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            instance_batch_size: 8,
            epochs: 10,
            optimizer: OptimizerKind::AdamW,
            base_lr: 2e-3,
            prompt_lr: Some(1e-2),
            weight_decay: 1e-4,
            lr_schedule: CosineAnnealing {
                t_max: None,
                eta_min: 0.0,
            },
            seed: 0,
            precision: Precision::F64,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instance_batch_size == 0 {
            return Err(Error::Config("instance_batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if let Some(lr) = self.prompt_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("prompt_lr must be non-negative, got {lr}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        let s = &self.lr_schedule;
        if !(s.eta_min >= 0.0 && s.eta_min <= self.base_lr) {
            return Err(Error::Config("eta_min must lie in [0, base_lr]".into()));
        }
        if s.t_max == Some(0) {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.lr_schedule.t_max.unwrap_or(self.epochs).max(1)
    }

    /// `(head, prompt)` learning rates for epoch `t`.
    pub fn lrs_at(&self, t: usize) -> (f64, f64) {
        let head = cosine_lr(t, self.t_max(), self.base_lr, self.lr_schedule.eta_min);
        let scale = self.prompt_lr.unwrap_or(self.base_lr) / self.base_lr;
        (head, head * scale)
    }
}

/// `eta_min + (base - eta_min) (1 + cos(pi t / t_max)) / 2`, held at
/// `eta_min` once `t` passes `t_max`.
pub fn cosine_lr(t: usize, t_max: usize, base_lr: f64, eta_min: f64) -> f64 {
    if t >= t_max {
        return eta_min;
    }
    let c = (std::f64::consts::PI * t as f64 / t_max as f64).cos();
    eta_min + 0.5 * (base_lr - eta_min) * (1.0 + c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.1, 0.001), 0.1);
        assert_eq!(cosine_lr(10, 10, 0.1, 0.001), 0.001);
        assert_eq!(cosine_lr(25, 10, 0.1, 0.001), 0.001);
        assert!((cosine_lr(5, 10, 0.1, 0.001) - 0.0505).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            instance_batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prompt_lr_follows_schedule() {
        let cfg = TrainConfig {
            base_lr: 0.1,
            prompt_lr: Some(0.2),
            epochs: 4,
            ..TrainConfig::default()
        };
        let (h, p) = cfg.lrs_at(2);
        assert!((p - 2.0 * h).abs() < 1e-15);
    }
}
