use std::sync::Arc;

use crate::autodiff::{Graph, MemMeter, Mode, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mil::{aggregate, loss, MilHead, Prediction, TaskSpec};
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::vit::{Backbone, BagPatches, FeatureMatrix, PromptSet};

use super::optim::AdamState;

fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(batch_size.max(1))
        .map(|s| (s, batch_size.min(n - s)))
        .collect()
}

fn recording<S: Scalar>(meter: Option<&Arc<MemMeter>>) -> Graph<S> {
    let g = Graph::new(Mode::Recording);
    match meter {
        Some(m) => g.with_meter(Arc::clone(m)),
        None => g,
    }
}

/// Step 1: instance features batch by batch without recording a graph.
/// Rows keep instance order; the result does not depend on the batch size.
pub fn step1_features<S: Scalar>(
    backbone: &Backbone<S>,
    prompt: Option<&PromptSet<S>>,
    bag: &BagPatches<S>,
    batch_size: usize,
    exec: Exec,
) -> Result<FeatureMatrix<S>> {
    if bag.is_empty() {
        return Err(Error::EmptyBag);
    }
    let ranges = batch_ranges(bag.len(), batch_size);
    let parts = exec.try_map_range(ranges.len(), |b| {
        let (start, count) = ranges[b];
        backbone.encode(&Graph::inference(), prompt, &bag.instances(start, count))
    })?;
    let d = backbone.config.embed_dim;
    let mut rows = Vec::with_capacity(bag.len() * d);
    for p in &parts {
        rows.extend_from_slice(p.data());
    }
    Ok(FeatureMatrix::new(Tensor::from_vec(&[bag.len(), d], rows)?))
}

/// Outcome of step 2 on one bag.
#[derive(Clone, Debug)]
pub struct HeadStep<S: Scalar> {
    pub loss: f64,
    /// Prediction made before the head update.
    pub prediction: Prediction<S>,
    /// `g = dL/dh`, one row per instance, taken at the pre-update head.
    pub g: Tensor<S>,
}

/// Step 2: bag loss through the head alone, retained `g = dL/dh`, then one
/// optimizer step on the head.
#[allow(clippy::too_many_arguments)]
pub fn step2_head_update<S: Scalar>(
    features: &FeatureMatrix<S>,
    label: usize,
    head: &mut MilHead<S>,
    task: &TaskSpec,
    optimizer: &mut AdamState,
    lr: f64,
    meter: Option<&Arc<MemMeter>>,
) -> Result<HeadStep<S>> {
    let g = recording(meter);
    let h = g.leaf(&features.h);
    let bound = head.bind(&g, true);
    let pred = aggregate(&g, &h, &bound)?;
    let l = loss(&g, &pred.logits, label, task)?;
    let value = l.item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("bag loss is {value}")));
    }
    let grads = g.backward(&l)?;
    let dh = grads.wrt(&h)?;
    let head_grads: Vec<Vec<f64>> = bound.grads_of(&grads)?.iter().map(|t| t.to_f64_vec()).collect();
    optimizer.step(head, &head_grads, lr)?;
    Ok(HeadStep {
        loss: value,
        prediction: pred.detached(),
        g: dh,
    })
}

/// Accumulated feature-extractor gradients of one bag, in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorGrads {
    pub prompt: Option<Vec<f64>>,
    /// Present when the backbone is trained; visiting order of its tree.
    pub backbone: Option<Vec<Vec<f64>>>,
}

fn accumulate<S: Scalar>(acc: &mut [f64], t: &Tensor<S>) {
    for (a, v) in acc.iter_mut().zip(t.data()) {
        *a += v.as_f64();
    }
}

/// Step 3 gradient: re-run each batch with recording on, seed its backward
/// with the matching rows of `g`, and sum `sum_i g_i dh_i/dp` over batches.
///
/// Batches may run concurrently under `exec`; their contributions are added
/// in batch order either way. With a `meter` the batches run one at a time so
/// the measured peak is that of a single batch graph.
#[allow(clippy::too_many_arguments)]
pub fn step3_extractor_grads<S: Scalar>(
    backbone: &Backbone<S>,
    prompt: Option<&PromptSet<S>>,
    bag: &BagPatches<S>,
    g: &Tensor<S>,
    batch_size: usize,
    train_backbone: bool,
    exec: Exec,
    meter: Option<&Arc<MemMeter>>,
) -> Result<ExtractorGrads> {
    let d = backbone.config.embed_dim;
    if bag.is_empty() {
        return Err(Error::EmptyBag);
    }
    if g.shape() != [bag.len(), d] {
        return Err(Error::shape("retained gradient", g.shape(), &[bag.len(), d]));
    }
    let ranges = batch_ranges(bag.len(), batch_size);
    type BatchGrads<S> = (Option<Tensor<S>>, Option<Vec<Tensor<S>>>);
    let run = |b: usize| -> Result<BatchGrads<S>> {
        let (start, count) = ranges[b];
        let graph = recording(meter);
        let p = prompt.map(|p| p.bind(&graph, true));
        let bb;
        let bb_ref = if train_backbone {
            bb = backbone.bind(&graph, true);
            &bb
        } else {
            backbone
        };
        let h = bb_ref.encode(&graph, p.as_ref(), &bag.instances(start, count))?;
        let seed = Tensor::from_vec(&[count, d], g.data()[start * d..(start + count) * d].to_vec())?;
        let grads = graph.backward_with_seed(&h, &seed)?;
        let pg = match &p {
            Some(p) => Some(grads.wrt(&p.tokens)?),
            None => None,
        };
        let bg = if train_backbone {
            Some(bb_ref.grads_of(&grads)?)
        } else {
            None
        };
        Ok((pg, bg))
    };
    let exec = if meter.is_some() { Exec::Sequential } else { exec };
    let parts = exec.try_map_range(ranges.len(), run)?;

    let mut prompt_acc = prompt.map(|p| vec![0.0; p.num_params()]);
    let mut backbone_acc: Option<Vec<Vec<f64>>> =
        train_backbone.then(|| backbone.flatten().iter().map(|t| vec![0.0; t.numel()]).collect());
    for (pg, bg) in &parts {
        if let (Some(acc), Some(t)) = (prompt_acc.as_mut(), pg) {
            accumulate(acc, t);
        }
        if let (Some(accs), Some(ts)) = (backbone_acc.as_mut(), bg) {
            for (acc, t) in accs.iter_mut().zip(ts) {
                accumulate(acc, t);
            }
        }
    }
    Ok(ExtractorGrads {
        prompt: prompt_acc,
        backbone: backbone_acc,
    })
}

/// Step 3: the gradient above followed by an optimizer step on the prompt.
#[allow(clippy::too_many_arguments)]
pub fn step3_prompt_update<S: Scalar>(
    backbone: &Backbone<S>,
    prompt: &mut PromptSet<S>,
    bag: &BagPatches<S>,
    g: &Tensor<S>,
    batch_size: usize,
    exec: Exec,
    optimizer: &mut AdamState,
    lr: f64,
) -> Result<Vec<f64>> {
    let grads = step3_extractor_grads(backbone, Some(prompt), bag, g, batch_size, false, exec, None)?;
    let grad = grads.prompt.expect("prompt was given");
    optimizer.step(prompt, std::slice::from_ref(&grad), lr)?;
    Ok(grad)
}

/// End-to-end gradients from a single recorded graph over the whole bag.
#[derive(Clone, Debug)]
pub struct FullGraphGrads {
    pub loss: f64,
    pub prompt: Option<Vec<f64>>,
    pub head: Vec<Vec<f64>>,
    pub backbone: Option<Vec<Vec<f64>>>,
}

/// Reference path: `L(G(F(x, p)), y)` recorded in one graph and
/// differentiated once. Memory grows with the number of instances.
#[allow(clippy::too_many_arguments)]
pub fn full_graph_grads<S: Scalar>(
    backbone: &Backbone<S>,
    prompt: Option<&PromptSet<S>>,
    head: &MilHead<S>,
    task: &TaskSpec,
    bag: &BagPatches<S>,
    label: usize,
    train_backbone: bool,
    meter: Option<&Arc<MemMeter>>,
) -> Result<FullGraphGrads> {
    if bag.is_empty() {
        return Err(Error::EmptyBag);
    }
    let graph = recording(meter);
    let p = prompt.map(|p| p.bind(&graph, true));
    let bb = if train_backbone {
        backbone.bind(&graph, true)
    } else {
        backbone.clone()
    };
    let hd = head.bind(&graph, true);
    let h = bb.encode(&graph, p.as_ref(), bag.all())?;
    let pred = aggregate(&graph, &h, &hd)?;
    let l = loss(&graph, &pred.logits, label, task)?;
    let value = l.item()?.as_f64();
    let grads = graph.backward(&l)?;
    let vecs = |ts: Vec<Tensor<S>>| ts.iter().map(|t| t.to_f64_vec()).collect::<Vec<_>>();
    Ok(FullGraphGrads {
        loss: value,
        prompt: match &p {
            Some(p) => Some(grads.wrt(&p.tokens)?.to_f64_vec()),
            None => None,
        },
        head: vecs(hd.grads_of(&grads)?),
        backbone: if train_backbone {
            Some(vecs(bb.grads_of(&grads)?))
        } else {
            None
        },
    })
}
