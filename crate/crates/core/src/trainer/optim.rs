use serde::{Deserialize, Serialize};

use super::config::OptimizerKind;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam / AdamW moments for one parameter tree, kept in `f64`.
///
/// With no history and a zero gradient the step is exactly zero: the
/// bias-corrected moments are `0 / (1 - beta^t) = 0`. Decoupled decay is
/// still applied when `weight_decay > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<S: Scalar, P: ParamTree<S>>(kind: OptimizerKind, weight_decay: f64, params: &P) -> Self {
        let sizes: Vec<usize> = params.flatten().iter().map(|t| t.numel()).collect();
        AdamState {
            kind,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every tensor of `params`, in visiting order.
    pub fn step<S: Scalar, P: ParamTree<S>>(&mut self, params: &mut P, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let names = params.names();
        if grads.len() != self.m.len() || names.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, g), m) in names.iter().zip(grads).zip(&self.m) {
            if g.len() != m.len() {
                return Err(Error::InvalidArgument(format!(
                    "gradient for `{name}` has {} entries, expected {}",
                    g.len(),
                    m.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (kind, wd) = (self.kind, self.weight_decay);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, p: &mut Tensor<S>| {
            let (m, v, g) = (&mut ms[idx], &mut vs[idx], &grads[idx]);
            idx += 1;
            for (j, p) in p.data_mut().iter_mut().enumerate() {
                let mut x = p.as_f64();
                let mut gj = g[j];
                match kind {
                    OptimizerKind::Adam => gj += wd * x,
                    OptimizerKind::AdamW => x -= lr * wd * x,
                }
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                x -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                *p = S::from_f64(x);
            }
        });
        Ok(())
    }
}
