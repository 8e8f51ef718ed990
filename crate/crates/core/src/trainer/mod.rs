//! Patch-batched, gradient-retaining training.
//!
//! Per bag: (1) instance features in batches without a graph, (2) head loss
//! and update, keeping `g = dL/dh`, (3) per-batch recomputation with the
//! backward pass seeded by the rows of `g`, summed into the prompt gradient.

mod bench;
mod config;
mod model;
mod optim;
mod pretrain;
mod steps;
mod train;


pub use bench::{bench_strategies, reduction_pct, BenchRow, Strategy};
pub use config::{cosine_lr, CosineAnnealing, OptimizerKind, Precision, TrainConfig, TrainMode};
pub use model::MilModel;
pub use optim::{AdamState, ADAM_EPS, BETA1, BETA2};
pub use pretrain::{pretrain_lite, PretextTarget, PretrainConfig};
pub use steps::{
    full_graph_grads, step1_features, step2_head_update, step3_extractor_grads, step3_prompt_update, ExtractorGrads,
    FullGraphGrads, HeadStep,
};
pub use train::{EpochStats, EvalOutput, Trainer};
