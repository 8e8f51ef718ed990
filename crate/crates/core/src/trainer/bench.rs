use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::OptimizerKind;
use super::model::MilModel;
use super::optim::AdamState;
use super::steps::{full_graph_grads, step1_features, step2_head_update, step3_extractor_grads};
use crate::autodiff::MemMeter;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::scalar::Scalar;
use crate::synth::{generate_dataset, GenSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One recorded graph over every instance of the bag.
    FullGraph,
    /// Batched features, head step, batched seeded recomputation.
    ThreeStep,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::FullGraph => "full_graph",
            Strategy::ThreeStep => "three_step",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub n_instances: usize,
    pub batch_size: usize,
    pub peak_act_elems: usize,
    pub secs_per_bag: f64,
    /// `(full - three_step) / full * 100`, on three-step rows.
    pub reduction_pct: Option<f64>,
    /// Largest prompt-gradient difference from the full graph, relative to
    /// the largest full-graph entry; on three-step rows.
    pub grad_rel_diff: Option<f64>,
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Peak saved-activation elements and time of one training step per
/// strategy and bag size. The three-step peak also charges the retained
/// `h` and `g` (each `n x d`).
pub fn bench_strategies<S: Scalar>(
    model: &MilModel<S>,
    sizes: &[usize],
    batch_size: usize,
    data: &GenSpec,
) -> Result<Vec<BenchRow>> {
    if batch_size == 0 {
        return Err(Error::Config("instance_batch_size must be at least 1".into()));
    }
    let cfg = &model.backbone.config;
    let d = cfg.embed_dim;
    let mut rows = Vec::new();
    for &n in sizes {
        let spec = GenSpec {
            n_min: n,
            n_max: n,
            image_size: cfg.image_size,
            channels: cfg.channels,
            train_bags: 1,
            val_bags: 0,
            test_bags: 0,
            ..data.clone()
        };
        let bag = generate_dataset(&spec, Exec::Sequential)?.train.remove(0);
        let label = bag.label.min(model.task.num_classes - 1);
        let patches = bag.patches::<S>(cfg.patch_size)?;

        let meter = Arc::new(MemMeter::new());
        let start = Instant::now();
        let full = full_graph_grads(
            &model.backbone,
            model.prompt.as_ref(),
            &model.head,
            &model.task,
            &patches,
            label,
            false,
            Some(&meter),
        )?;
        let full_secs = start.elapsed().as_secs_f64();
        let full_peak = meter.peak_activation_elems();

        let meter = Arc::new(MemMeter::new());
        let start = Instant::now();
        let features = step1_features(
            &model.backbone,
            model.prompt.as_ref(),
            &patches,
            batch_size,
            Exec::Sequential,
        )?;
        meter.alloc(n * d);
        let mut head = model.head.clone();
        let mut opt = AdamState::new(OptimizerKind::AdamW, 0.0, &head);
        let step = step2_head_update(&features, label, &mut head, &model.task, &mut opt, 0.0, Some(&meter))?;
        meter.alloc(n * d);
        let three = step3_extractor_grads(
            &model.backbone,
            model.prompt.as_ref(),
            &patches,
            &step.g,
            batch_size,
            false,
            Exec::Sequential,
            Some(&meter),
        )?;
        meter.free(2 * n * d);
        let three_secs = start.elapsed().as_secs_f64();
        let three_peak = meter.peak_activation_elems();

        let grad_diff = match (&three.prompt, &full.prompt) {
            (Some(a), Some(b)) => Some(rel_diff(a, b)),
            _ => None,
        };
        rows.push(BenchRow {
            strategy: Strategy::FullGraph,
            n_instances: n,
            batch_size,
            peak_act_elems: full_peak,
            secs_per_bag: full_secs,
            reduction_pct: None,
            grad_rel_diff: None,
        });
        rows.push(BenchRow {
            strategy: Strategy::ThreeStep,
            n_instances: n,
            batch_size,
            peak_act_elems: three_peak,
            secs_per_bag: three_secs,
            reduction_pct: Some(reduction_pct(full_peak, three_peak)),
            grad_rel_diff: grad_diff,
        });
    }
    Ok(rows)
}

pub fn reduction_pct(full: usize, three_step: usize) -> f64 {
    if full == 0 {
        return 0.0;
    }
    (full as f64 - three_step as f64) / full as f64 * 100.0
}
