use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Two subtypes scored by a single logit.
    SubtypeBinary,
    Multiclass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_classes: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, num_classes: usize) -> Result<Self> {
        let spec = TaskSpec { kind, num_classes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::SubtypeBinary if self.num_classes != 2 => Err(Error::Config(format!(
                "subtype_binary needs num_classes = 2, got {}",
                self.num_classes
            ))),
            TaskKind::Multiclass if self.num_classes < 2 => Err(Error::Config(format!(
                "multiclass needs at least 2 classes, got {}",
                self.num_classes
            ))),
            _ => Ok(()),
        }
    }

    pub fn num_logits(&self) -> usize {
        match self.kind {
            TaskKind::SubtypeBinary => 1,
            TaskKind::Multiclass => self.num_classes,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.kind {
            TaskKind::SubtypeBinary => LossKind::Bce,
            TaskKind::Multiclass => LossKind::CrossEntropy,
        }
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }
}

/// Scalar bag loss of `logits` against `label`, recorded on `g`.
///
/// BCE is evaluated as `softplus(x) - y x`, which stays finite for any logit.
pub fn loss<S: Scalar>(g: &Graph<S>, logits: &Tensor<S>, label: usize, task: &TaskSpec) -> Result<Tensor<S>> {
    task.check_label(label)?;
    if logits.shape() != [task.num_logits()] {
        return Err(Error::shape("loss", logits.shape(), &[task.num_logits()]));
    }
    match task.loss_kind() {
        LossKind::Bce => {
            let sp = g.softplus(logits)?;
            let l = if label == 1 { g.sub(&sp, logits)? } else { sp };
            g.reshape(&l, &[])
        }
        LossKind::CrossEntropy => {
            let row = g.reshape(logits, &[1, task.num_classes])?;
            let lp = g.log_softmax(&row)?;
            let pick = g.slice(&lp, 1, label, 1)?;
            g.reshape(&g.scale(&pick, -1.0)?, &[])
        }
    }
}
