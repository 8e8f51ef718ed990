use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{GenSpec, LabelRule, Texture};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::scalar::Scalar;
use crate::vit::BagPatches;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

/// One slide: `n` square patch images stored row-major as `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub bag_id: u64,
    pub label: usize,
    pub n: usize,
    pub size: usize,
    pub channels: usize,
    pub instances: Vec<f32>,
    /// Witness class of each instance. Only for checking the generator;
    /// never fed to a model.
    pub latents: Option<Vec<Option<u8>>>,
}

impl Bag {
    pub fn instance(&self, i: usize) -> &[f32] {
        let len = self.size * self.size * self.channels;
        &self.instances[i * len..(i + 1) * len]
    }

    pub fn patches<S: Scalar>(&self, patch: usize) -> Result<BagPatches<S>> {
        BagPatches::from_images(&self.instances, self.n, self.size, self.channels, patch)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Bag] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Bag> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// FNV-1a hash of every bag's id, label, and pixel bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for split in Split::ALL {
            eat(self.split(split).len() as u64);
            for bag in self.split(split) {
                eat(bag.bag_id);
                eat(bag.label as u64);
                eat(bag.n as u64);
                for &v in &bag.instances {
                    eat(v.to_bits() as u64);
                }
            }
        }
        h
    }
}

/// Label implied by the witness flags, or `None` when they do not determine
/// one (a majority tie, or witnesses of several classes under presence).
pub fn label_from_latents(latents: &[Option<u8>], rule: LabelRule, num_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; num_classes];
    for c in latents.iter().flatten() {
        *counts.get_mut(*c as usize)? += 1;
    }
    match rule {
        LabelRule::PresenceOr => {
            let present: Vec<usize> = (1..num_classes).filter(|&c| counts[c] > 0).collect();
            match present.as_slice() {
                [] if counts[0] == 0 => Some(0),
                [c] if counts[0] == 0 => Some(*c),
                _ => None,
            }
        }
        LabelRule::MajorityVote => {
            let best = (0..num_classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))?;
            let strict = (0..num_classes).all(|c| c == best || counts[c] < counts[best]);
            (strict && counts[best] > 0).then_some(best)
        }
    }
}

fn witness_classes(rng: &mut ChaCha8Rng, spec: &GenSpec, label: usize, n: usize) -> Vec<Option<u8>> {
    let rate = spec.witness_rate[label];
    match spec.label_rule {
        LabelRule::PresenceOr => {
            if label == 0 {
                return vec![None; n];
            }
            let mut lat: Vec<Option<u8>> = (0..n).map(|_| rng.random_bool(rate).then_some(label as u8)).collect();
            if lat.iter().all(Option::is_none) {
                lat[rng.random_range(0..n)] = Some(label as u8);
            }
            lat
        }
        LabelRule::MajorityVote => {
            let others: Vec<usize> = (0..spec.num_classes).filter(|&c| c != label).collect();
            let mut lat: Vec<Option<u8>> = (0..n)
                .map(|_| {
                    if rng.random_bool(rate) {
                        Some(label as u8)
                    } else if rng.random_bool(0.5) {
                        Some(others[rng.random_range(0..others.len())] as u8)
                    } else {
                        None
                    }
                })
                .collect();
            // promote instances, background first, until the label is a strict majority
            while label_from_latents(&lat, LabelRule::MajorityVote, spec.num_classes) != Some(label) {
                let pick = lat
                    .iter()
                    .position(Option::is_none)
                    .or_else(|| lat.iter().position(|c| *c != Some(label as u8)))
                    .expect("a bag with n > 0 can always reach a majority");
                lat[pick] = Some(label as u8);
            }
            lat
        }
    }
}

fn random_distractor(rng: &mut ChaCha8Rng, spec: &GenSpec) -> Texture {
    // reject gratings that could pass for a witness of some class
    let resembles_class = |t: &Texture| {
        spec.textures.iter().any(|c| {
            let d = (t.angle_deg - c.angle_deg).rem_euclid(180.0);
            let angle_close = d.min(180.0 - d) < spec.angle_jitter_deg + 15.0;
            angle_close && (t.frequency - c.frequency).abs() < 0.25 * c.frequency
        })
    };
    let (lo, hi) = spec.distractor_frequency;
    let mut t = Texture {
        frequency: 0.0,
        angle_deg: 0.0,
    };
    for _ in 0..64 {
        t = Texture {
            frequency: rng.random_range(lo..=hi),
            angle_deg: rng.random_range(0.0..180.0),
        };
        if !resembles_class(&t) {
            break;
        }
    }
    t
}

/// Draws one `size x size x channels` image in `[0, 1]`: a tinted background
/// level, an optional grating, and Gaussian pixel noise.
pub fn render_instance(rng: &mut ChaCha8Rng, spec: &GenSpec, texture: Option<Texture>) -> Vec<f32> {
    let (s, ch) = (spec.image_size, spec.channels);
    let level = rng.random_range(0.35..0.65);
    let tint: Vec<f64> = (0..ch).map(|_| rng.random_range(0.8..1.2)).collect();
    let phase = rng.random_range(0.0..2.0 * PI);
    let jitter = if spec.angle_jitter_deg > 0.0 {
        rng.random_range(-spec.angle_jitter_deg..spec.angle_jitter_deg)
    } else {
        0.0
    };
    let side = ((spec.texture_extent * s as f64).round() as usize).clamp(1, s);
    let (oy, ox) = (rng.random_range(0..=s - side), rng.random_range(0..=s - side));
    let noise = Normal::new(0.0, spec.noise.max(1e-300)).expect("noise is finite");
    let mut out = Vec::with_capacity(s * s * ch);
    for y in 0..s {
        for x in 0..s {
            let inside = (oy..oy + side).contains(&y) && (ox..ox + side).contains(&x);
            let wave = texture.filter(|_| inside).map_or(0.0, |t| {
                let a = (t.angle_deg + jitter).to_radians();
                let u = x as f64 * a.cos() + y as f64 * a.sin();
                spec.amplitude * (2.0 * PI * t.frequency * u + phase).sin()
            });
            for &tc in &tint {
                let eps = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                out.push(((level + wave) * tc + eps).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

fn generate_bag(spec: &GenSpec, bag_id: u64, label: usize) -> Bag {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(bag_id);
    let n = rng.random_range(spec.n_min..=spec.n_max);
    let latents = witness_classes(&mut rng, spec, label, n);
    let mut instances = Vec::with_capacity(n * spec.image_size * spec.image_size * spec.channels);
    for lat in &latents {
        let texture = match lat {
            Some(c) if !spec.ablate_signal => Some(spec.textures[*c as usize]),
            _ if rng.random_bool(spec.distractor_rate) => Some(random_distractor(&mut rng, spec)),
            _ => None,
        };
        instances.extend(render_instance(&mut rng, spec, texture));
    }
    Bag {
        bag_id,
        label,
        n,
        size: spec.image_size,
        channels: spec.channels,
        instances,
        latents: Some(latents),
    }
}

/// Generates the train/val/test splits. Bag `i` of a split has label
/// `i % num_classes`; every bag draws from its own stream of the master seed,
/// so the result does not depend on `exec`.
pub fn generate_dataset(spec: &GenSpec, exec: Exec) -> Result<Dataset> {
    spec.validate()?;
    let sizes = [spec.train_bags, spec.val_bags, spec.test_bags];
    let mut dataset = Dataset::default();
    let mut first_id = 0u64;
    for (split, &count) in Split::ALL.iter().zip(&sizes) {
        let bags = exec.map_range(count, |i| generate_bag(spec, first_id + i as u64, i % spec.num_classes));
        *dataset.split_mut(*split) = bags;
        first_id += count as u64;
    }
    for bag in dataset.train.iter().chain(&dataset.val).chain(&dataset.test) {
        let lat = bag.latents.as_deref().unwrap_or_default();
        if label_from_latents(lat, spec.label_rule, spec.num_classes) != Some(bag.label) {
            return Err(Error::DataSpec(format!("bag {} violates its label rule", bag.bag_id)));
        }
    }
    Ok(dataset)
}
