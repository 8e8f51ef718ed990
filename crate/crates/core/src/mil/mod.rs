//! Bag classifier `G`: aggregation of instance features, bag loss, metrics.

mod head;
mod loss;
mod metrics;

pub use head::{aggregate, HeadConfig, HeadKind, MilHead, Prediction};
pub use loss::{loss, LossKind, TaskKind, TaskSpec};
pub use metrics::{accuracy, auroc, auroc_for_task, predicted_class};
