use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{TrainConfig, TrainMode};
use super::model::MilModel;
use super::optim::AdamState;
use super::steps::{step1_features, step2_head_update, step3_extractor_grads};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mil::{accuracy, aggregate, auroc_for_task, loss};
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::synth::Bag;

/// Bag-level metrics over one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    /// `None` when the split holds a single class.
    pub auroc: Option<f64>,
    pub secs_per_bag: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub stats: EpochStats,
    pub probs: Vec<Vec<f64>>,
}

/// A model plus the optimizer state of every trained parameter group.
#[derive(Clone, Debug)]
pub struct Trainer<S: Scalar> {
    pub model: MilModel<S>,
    pub mode: TrainMode,
    pub cfg: TrainConfig,
    head_opt: AdamState,
    prompt_opt: Option<AdamState>,
    backbone_opt: Option<AdamState>,
    /// Features of a frozen extractor never change, so they are computed
    /// once per bag id.
    cache: HashMap<u64, Tensor<S>>,
    epoch: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: MilModel<S>, mode: TrainMode, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (kind, wd) = (cfg.optimizer, cfg.weight_decay);
        Ok(Trainer {
            head_opt: AdamState::new(kind, wd, &model.head),
            prompt_opt: match (&model.prompt, mode) {
                (Some(p), TrainMode::Prompt | TrainMode::Full) => Some(AdamState::new(kind, wd, p)),
                _ => None,
            },
            backbone_opt: (mode == TrainMode::Full).then(|| AdamState::new(kind, wd, &model.backbone)),
            model,
            mode,
            cfg,
            cache: HashMap::new(),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Updates applied so far to the head, prompt and backbone.
    pub fn optimizer_steps(&self) -> (u64, Option<u64>, Option<u64>) {
        (
            self.head_opt.step,
            self.prompt_opt.as_ref().map(|o| o.step),
            self.backbone_opt.as_ref().map(|o| o.step),
        )
    }

    fn extractor_frozen(&self) -> bool {
        self.mode == TrainMode::Conventional
    }

    /// Features of every bag, in parallel across bags; frozen extractors
    /// hit the cache.
    fn features(&mut self, bags: &[Bag]) -> Result<Vec<Tensor<S>>> {
        let model = &self.model;
        let batch = self.cfg.instance_batch_size;
        let patch = model.backbone.config.patch_size;
        let cache = &self.cache;
        let out = self.cfg.exec.try_map_range(bags.len(), |i| -> Result<Tensor<S>> {
            if let Some(h) = cache.get(&bags[i].bag_id) {
                return Ok(h.clone());
            }
            let patches = bags[i].patches::<S>(patch)?;
            Ok(step1_features(
                &model.backbone,
                model.prompt.as_ref(),
                &patches,
                batch,
                Exec::Sequential,
            )?
            .h)
        })?;
        if self.extractor_frozen() {
            for (bag, h) in bags.iter().zip(&out) {
                self.cache.entry(bag.bag_id).or_insert_with(|| h.clone());
            }
        }
        Ok(out)
    }

    /// Loss, accuracy and AUROC of the current model; bag order is kept.
    pub fn evaluate(&mut self, bags: &[Bag]) -> Result<EvalOutput> {
        if bags.is_empty() {
            return Err(Error::InvalidArgument("evaluation on an empty split".into()));
        }
        let start = Instant::now();
        let feats = self.features(bags)?;
        let model = &self.model;
        let per_bag = self
            .cfg
            .exec
            .try_map_range(bags.len(), |i| -> Result<(f64, Vec<f64>)> {
                let g = Graph::inference();
                let pred = aggregate(&g, &feats[i], &model.head)?;
                let l = loss(&g, &pred.logits, bags[i].label, &model.task)?.item()?.as_f64();
                Ok((l, pred.probs))
            })?;
        let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
        let (losses, probs): (Vec<f64>, Vec<Vec<f64>>) = per_bag.into_iter().unzip();
        let stats = summarize(&losses, &probs, &labels, &self.model, start)?;
        Ok(EvalOutput { stats, probs })
    }

    /// One pass over `bags` in a seed-determined order: steps 1, 2, 3 per
    /// bag. Metrics use each bag's prediction before its update.
    pub fn train_epoch(&mut self, bags: &[Bag]) -> Result<EpochStats> {
        if bags.is_empty() {
            return Err(Error::InvalidArgument("training on an empty split".into()));
        }
        let start = Instant::now();
        let (lr_head, lr_prompt) = self.cfg.lrs_at(self.epoch);
        let mut order: Vec<usize> = (0..bags.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);

        let backbone_sum = cfg!(debug_assertions).then(|| self.model.backbone.checksum());
        if self.extractor_frozen() {
            let missing: Vec<Bag> = bags
                .iter()
                .filter(|b| !self.cache.contains_key(&b.bag_id))
                .cloned()
                .collect();
            self.features(&missing)?;
        }
        let batch = self.cfg.instance_batch_size;
        let patch = self.model.backbone.config.patch_size;
        let exec = self.cfg.exec;
        let frozen = self.extractor_frozen();
        let train_backbone = self.mode == TrainMode::Full;
        let mut losses = Vec::with_capacity(bags.len());
        let mut probs = Vec::with_capacity(bags.len());
        let mut labels = Vec::with_capacity(bags.len());
        for &i in &order {
            let bag = &bags[i];
            let m = &mut self.model;
            let (patches, h) = match self.cache.get(&bag.bag_id) {
                Some(h) => (None, h.clone()),
                None => {
                    let p = bag.patches::<S>(patch)?;
                    let h = step1_features(&m.backbone, m.prompt.as_ref(), &p, batch, exec)?.h;
                    (Some(p), h)
                }
            };
            let fm = crate::vit::FeatureMatrix::new(h);
            let step = step2_head_update(&fm, bag.label, &mut m.head, &m.task, &mut self.head_opt, lr_head, None)?;
            if let Some(p) = patches.filter(|_| !frozen) {
                let grads = step3_extractor_grads(
                    &m.backbone,
                    m.prompt.as_ref(),
                    &p,
                    &step.g,
                    batch,
                    train_backbone,
                    exec,
                    None,
                )?;
                if let (Some(prompt), Some(opt), Some(gp)) = (m.prompt.as_mut(), self.prompt_opt.as_mut(), grads.prompt)
                {
                    opt.step(prompt, &[gp], lr_prompt)?;
                }
                if let (Some(opt), Some(gb)) = (self.backbone_opt.as_mut(), grads.backbone) {
                    opt.step(&mut m.backbone, &gb, lr_prompt)?;
                }
            }
            losses.push(step.loss);
            probs.push(step.prediction.probs);
            labels.push(bag.label);
        }
        if let Some(sum) = backbone_sum {
            if self.mode.backbone_frozen() {
                debug_assert_eq!(sum, self.model.backbone.checksum(), "frozen backbone changed");
            }
        }
        self.epoch += 1;
        summarize(&losses, &probs, &labels, &self.model, start)
    }
}

fn summarize<S: Scalar>(
    losses: &[f64],
    probs: &[Vec<f64>],
    labels: &[usize],
    model: &MilModel<S>,
    start: Instant,
) -> Result<EpochStats> {
    let n = losses.len() as f64;
    let loss = losses.iter().sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("mean loss is {loss}")));
    }
    let auroc = match auroc_for_task(probs, labels, &model.task) {
        Ok(a) => Some(a),
        Err(Error::UndefinedAuroc(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EpochStats {
        loss,
        accuracy: accuracy(probs, labels)?,
        auroc,
        secs_per_bag: start.elapsed().as_secs_f64() / n,
    })
}
