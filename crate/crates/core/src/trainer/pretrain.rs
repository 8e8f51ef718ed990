use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::OptimizerKind;
use super::optim::AdamState;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::mil::{loss, TaskKind, TaskSpec};
use crate::params::{normal, zeros, ParamTree};
use crate::scalar::Scalar;
use crate::synth::{render_instance, GenSpec, Texture};
use crate::vit::{Backbone, BagPatches, VitConfig};

/// What the auxiliary task asks about a random grating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextTarget {
    Orientation,
    Frequency,
}

/// Auxiliary patch-level task used to give a frozen backbone informative
/// features: classify a binned property of a random grating, or its absence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target: PretextTarget,
    /// Classes over the target's range; one extra class means "no grating".
    pub bins: usize,
    pub amplitude: (f64, f64),
    pub frequency: (f64, f64),
    pub noise: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 32,
            lr: 1e-3,
            target: PretextTarget::Orientation,
            bins: 6,
            amplitude: (0.1, 0.3),
            frequency: (0.06, 0.3),
            noise: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone)]
struct Probe<S: Scalar> {
    w: Tensor<S>,
    b: Tensor<S>,
}

impl<S: Scalar> ParamTree<S> for Probe<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f("w".into(), &self.w);
        f("b".into(), &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f("w".into(), &mut self.w);
        f("b".into(), &mut self.b);
    }
}

fn sample_batch(rng: &mut ChaCha8Rng, vit: &VitConfig, cfg: &PretrainConfig) -> (Vec<f32>, Vec<usize>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..cfg.batch_size {
        let class = rng.random_range(0..=cfg.bins);
        let spec = GenSpec {
            image_size: vit.image_size,
            channels: vit.channels,
            amplitude: rng.random_range(cfg.amplitude.0..=cfg.amplitude.1),
            noise: cfg.noise,
            ..GenSpec::default()
        };
        let texture = (class > 0).then(|| {
            let pos = ((class - 1) as f64 + rng.random_range(0.0..1.0)) / cfg.bins as f64;
            let (lo, hi) = cfg.frequency;
            match cfg.target {
                PretextTarget::Orientation => Texture {
                    frequency: rng.random_range(lo..=hi),
                    angle_deg: pos * 180.0,
                },
                PretextTarget::Frequency => Texture {
                    frequency: lo + pos * (hi - lo),
                    angle_deg: rng.random_range(0.0..180.0),
                },
            }
        });
        images.extend(render_instance(rng, &spec, texture));
        labels.push(class);
    }
    (images, labels)
}

/// Trains a fresh backbone (and a throwaway linear probe) on the auxiliary
/// task. Returns the backbone and the probe accuracy over the last tenth of
/// the steps.
pub fn pretrain_lite<S: Scalar>(vit: &VitConfig, cfg: &PretrainConfig, init_seed: u64) -> Result<(Backbone<S>, f64)> {
    if cfg.batch_size == 0 || cfg.bins == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("pretrain needs positive batch_size, bins and lr".into()));
    }
    let mut backbone = Backbone::<S>::init(&vit.clone().with_prompts(0), init_seed)?;
    let classes = cfg.bins + 1;
    let task = TaskSpec::new(TaskKind::Multiclass, classes)?;
    let d = vit.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = Probe {
        w: normal(&mut rng, &[d, classes], (1.0 / d as f64).sqrt()),
        b: zeros(&[classes]),
    };
    let mut bb_opt = AdamState::new(OptimizerKind::AdamW, 0.0, &backbone);
    let mut probe_opt = AdamState::new(OptimizerKind::AdamW, 0.0, &probe);
    let tail = (cfg.steps / 10).max(1);
    let (mut hits, mut seen) = (0usize, 0usize);
    for step in 0..cfg.steps {
        let (images, labels) = sample_batch(&mut rng, vit, cfg);
        let patches =
            BagPatches::<S>::from_images(&images, cfg.batch_size, vit.image_size, vit.channels, vit.patch_size)?;
        let g = Graph::recording();
        let bb = backbone.bind(&g, true);
        let pr = probe.bind(&g, true);
        let h = bb.encode(&g, None, patches.all())?;
        let logits = g.add(&g.matmul(&h, &pr.w)?, &pr.b)?;
        let mut total = None;
        for (i, &y) in labels.iter().enumerate() {
            let row = g.reshape(&g.slice(&logits, 0, i, 1)?, &[classes])?;
            let l = loss(&g, &row, y, &task)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(&t, &l)?,
            });
            if step + tail >= cfg.steps {
                let r = logits.row(i);
                let pred = (0..classes).fold(0, |best, c| if r[c] > r[best] { c } else { best });
                hits += usize::from(pred == y);
                seen += 1;
            }
        }
        let total = g.scale(&total.expect("batch is nonempty"), 1.0 / cfg.batch_size as f64)?;
        let grads = g.backward(&total)?;
        let to_vecs = |ts: Vec<Tensor<S>>| ts.iter().map(|t| t.to_f64_vec()).collect::<Vec<_>>();
        bb_opt.step(&mut backbone, &to_vecs(bb.grads_of(&grads)?), cfg.lr)?;
        probe_opt.step(&mut probe, &to_vecs(pr.grads_of(&grads)?), cfg.lr)?;
    }
    Ok((backbone, hits as f64 / seen.max(1) as f64))
}
