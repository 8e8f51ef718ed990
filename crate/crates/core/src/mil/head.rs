use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::TaskSpec;
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::params::{normal, zeros, ParamTree};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Max-scored critical instance plus attention against its query.
    Dsmil,
    GatedAttention,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Query width for DSMIL, hidden width for gated attention.
    pub attn_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Dsmil,
            attn_dim: 128,
        }
    }
}

/// Parameters of the bag classifier. Logit count is 1 for binary BCE tasks
/// and `C` for cross-entropy tasks.
#[derive(Clone, Debug)]
pub enum MilHead<S: Scalar> {
    Dsmil {
        inst_w: Tensor<S>,
        inst_b: Tensor<S>,
        q_w: Tensor<S>,
        q_b: Tensor<S>,
        v_w: Tensor<S>,
        v_b: Tensor<S>,
        /// Scores the flattened `[C, d]` bag embedding.
        bag_w: Tensor<S>,
        bag_b: Tensor<S>,
    },
    GatedAttention {
        v_w: Tensor<S>,
        v_b: Tensor<S>,
        u_w: Tensor<S>,
        u_b: Tensor<S>,
        attn_w: Tensor<S>,
        cls_w: Tensor<S>,
        cls_b: Tensor<S>,
    },
    MeanPool {
        cls_w: Tensor<S>,
        cls_b: Tensor<S>,
    },
}

/// Bag-level output `y_hat`.
#[derive(Clone, Debug)]
pub struct Prediction<S: Scalar> {
    /// `[num_logits]`; attached to the graph it was computed on.
    pub logits: Tensor<S>,
    pub probs: Vec<f64>,
    pub critical_instance: Option<usize>,
    /// Instance weights of the attention stream, summing to one.
    pub attention: Option<Vec<f64>>,
}

impl<S: Scalar> Prediction<S> {
    pub fn detached(&self) -> Self {
        Prediction {
            logits: self.logits.detach(),
            ..self.clone()
        }
    }
}

fn linear<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> (Tensor<S>, Tensor<S>) {
    (
        normal(rng, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt()),
        zeros(&[fan_out]),
    )
}

impl<S: Scalar> MilHead<S> {
    pub fn init(config: &HeadConfig, dim: usize, task: &TaskSpec, seed: u64) -> Result<Self> {
        if dim == 0 || config.attn_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let out = task.num_logits();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match config.kind {
            HeadKind::Dsmil => {
                let (inst_w, inst_b) = linear(&mut rng, dim, out);
                let (q_w, q_b) = linear(&mut rng, dim, config.attn_dim);
                let (v_w, v_b) = linear(&mut rng, dim, dim);
                let (bag_w, bag_b) = linear(&mut rng, out * dim, out);
                MilHead::Dsmil {
                    inst_w,
                    inst_b,
                    q_w,
                    q_b,
                    v_w,
                    v_b,
                    bag_w,
                    bag_b,
                }
            }
            HeadKind::GatedAttention => {
                let (v_w, v_b) = linear(&mut rng, dim, config.attn_dim);
                let (u_w, u_b) = linear(&mut rng, dim, config.attn_dim);
                let (attn_w, _) = linear(&mut rng, config.attn_dim, 1);
                let (cls_w, cls_b) = linear(&mut rng, dim, out);
                MilHead::GatedAttention {
                    v_w,
                    v_b,
                    u_w,
                    u_b,
                    attn_w,
                    cls_w,
                    cls_b,
                }
            }
            HeadKind::MeanPool => {
                let (cls_w, cls_b) = linear(&mut rng, dim, out);
                MilHead::MeanPool { cls_w, cls_b }
            }
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            MilHead::Dsmil { .. } => HeadKind::Dsmil,
            MilHead::GatedAttention { .. } => HeadKind::GatedAttention,
            MilHead::MeanPool { .. } => HeadKind::MeanPool,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            MilHead::Dsmil { inst_w, .. } => inst_w.shape()[0],
            MilHead::GatedAttention { cls_w, .. } | MilHead::MeanPool { cls_w, .. } => cls_w.shape()[0],
        }
    }

    pub fn num_logits(&self) -> usize {
        match self {
            MilHead::Dsmil { inst_w, .. } => inst_w.shape()[1],
            MilHead::GatedAttention { cls_w, .. } | MilHead::MeanPool { cls_w, .. } => cls_w.shape()[1],
        }
    }
}

/// Applies the MIL head to `h` (`[n, d]`).
pub fn aggregate<S: Scalar>(g: &Graph<S>, h: &Tensor<S>, head: &MilHead<S>) -> Result<Prediction<S>> {
    let [n, d] = *h.shape() else {
        return Err(Error::shape("aggregate", h.shape(), &[head.input_dim()]));
    };
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    if d != head.input_dim() {
        return Err(Error::shape("aggregate", h.shape(), &[n, head.input_dim()]));
    }
    let out = head.num_logits();
    let (logits, critical, attention) = match head {
        MilHead::Dsmil {
            inst_w,
            inst_b,
            q_w,
            q_b,
            v_w,
            v_b,
            bag_w,
            bag_b,
        } => {
            // stream 1: instance scores, max per class
            let scores = g.add(&g.matmul(h, inst_w)?, inst_b)?;
            let (max_scores, critical) = g.max_axis(&scores, 0)?;
            // stream 2: similarity of every query to the critical queries
            let q = g.tanh(&g.add(&g.matmul(h, q_w)?, q_b)?)?;
            let q_crit = g.gather_rows(&q, &critical)?;
            let dq = q_w.shape()[1] as f64;
            let sim = g.scale(&g.matmul(&q_crit, &g.transpose(&q)?)?, 1.0 / dq.sqrt())?;
            let attn = g.softmax(&sim)?; // [C, n], normalized over instances
            let v = g.add(&g.matmul(h, v_w)?, v_b)?;
            let bag = g.matmul(&attn, &v)?; // [C, d]
            let bag = g.reshape(&bag, &[1, out * d])?;
            let bag_logits = g.add(&g.matmul(&bag, bag_w)?, bag_b)?;
            let both = g.add(&max_scores, &bag_logits)?;
            let logits = g.reshape(&g.scale(&both, 0.5)?, &[out])?;
            let focus = predicted_index(logits.data());
            let weights = attn.row(focus).iter().map(|v| v.as_f64()).collect();
            (logits, Some(critical[focus]), Some(weights))
        }
        MilHead::GatedAttention {
            v_w,
            v_b,
            u_w,
            u_b,
            attn_w,
            cls_w,
            cls_b,
        } => {
            let content = g.tanh(&g.add(&g.matmul(h, v_w)?, v_b)?)?;
            let gate = g.sigmoid(&g.add(&g.matmul(h, u_w)?, u_b)?)?;
            let scores = g.matmul(&g.mul(&content, &gate)?, attn_w)?; // [n, 1]
            let attn = g.softmax(&g.transpose(&scores)?)?; // [1, n]
            let z = g.matmul(&attn, h)?;
            let logits = g.reshape(&g.add(&g.matmul(&z, cls_w)?, cls_b)?, &[out])?;
            let weights = attn.data().iter().map(|v| v.as_f64()).collect();
            (logits, None, Some(weights))
        }
        MilHead::MeanPool { cls_w, cls_b } => {
            let z = g.mean_axis(h, 0)?;
            let logits = g.reshape(&g.add(&g.matmul(&z, cls_w)?, cls_b)?, &[out])?;
            (logits, None, None)
        }
    };
    let probs = probabilities(logits.data());
    Ok(Prediction {
        logits,
        probs,
        critical_instance: critical,
        attention,
    })
}

fn predicted_index<S: Scalar>(logits: &[S]) -> usize {
    if logits.len() == 1 {
        return 0;
    }
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

fn probabilities<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let l: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    if l.len() == 1 {
        let x = l[0];
        return vec![if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            x.exp() / (1.0 + x.exp())
        }];
    }
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

macro_rules! visit_variant {
    ($self:expr, $f:ident) => {
        match $self {
            MilHead::Dsmil {
                inst_w,
                inst_b,
                q_w,
                q_b,
                v_w,
                v_b,
                bag_w,
                bag_b,
            } => {
                $f("inst_w".into(), inst_w);
                $f("inst_b".into(), inst_b);
                $f("q_w".into(), q_w);
                $f("q_b".into(), q_b);
                $f("v_w".into(), v_w);
                $f("v_b".into(), v_b);
                $f("bag_w".into(), bag_w);
                $f("bag_b".into(), bag_b);
            }
            MilHead::GatedAttention {
                v_w,
                v_b,
                u_w,
                u_b,
                attn_w,
                cls_w,
                cls_b,
            } => {
                $f("v_w".into(), v_w);
                $f("v_b".into(), v_b);
                $f("u_w".into(), u_w);
                $f("u_b".into(), u_b);
                $f("attn_w".into(), attn_w);
                $f("cls_w".into(), cls_w);
                $f("cls_b".into(), cls_b);
            }
            MilHead::MeanPool { cls_w, cls_b } => {
                $f("cls_w".into(), cls_w);
                $f("cls_b".into(), cls_b);
            }
        }
    };
}

impl<S: Scalar> ParamTree<S> for MilHead<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        visit_variant!(self, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        visit_variant!(self, f);
    }
}
