//! Named parameter collections.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A fixed, ordered set of named tensors.
///
/// Visiting order is stable; flattening, optimizer state, and checkpoints all
/// rely on it.
pub trait ParamTree<S: Scalar>: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>));

    /// Copy whose tensors are trainable leaves (or constants) of `g`.
    fn bind(&self, g: &Graph<S>, trainable: bool) -> Self {
        let mut bound = self.clone();
        bound.visit_mut(&mut |_, t| {
            *t = if trainable { g.leaf(t) } else { g.constant(t) };
        });
        bound
    }

    fn flatten(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t.clone()));
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name));
        out
    }

    /// Replaces every tensor, in visiting order. Shapes must match.
    fn load_flat(&mut self, tensors: &[Tensor<S>]) -> Result<()> {
        let expected = self.flatten();
        if expected.len() != tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (e, t) in expected.iter().zip(tensors) {
            if e.shape() != t.shape() {
                return Err(Error::shape("load_flat", e.shape(), t.shape()));
            }
        }
        let mut it = tensors.iter();
        self.visit_mut(&mut |_, t| {
            let persistent = t.is_persistent();
            *t = it.next().expect("length checked").clone();
            if persistent {
                *t = t.clone().into_persistent();
            }
        });
        Ok(())
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Gradients for a tree bound with [`ParamTree::bind`], in visiting order.
    fn grads_of(&self, grads: &Gradients<S>) -> Result<Vec<Tensor<S>>> {
        let mut out = Vec::new();
        let mut err = None;
        self.visit(&mut |name, t| match grads.wrt(t) {
            Ok(g) => out.push(g),
            Err(_) => {
                err.get_or_insert_with(|| Error::InvalidArgument(format!("`{name}` was not bound as a leaf")));
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// FNV-1a over the bit patterns of every element, in visiting order.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.visit(&mut |_, t| {
            for v in t.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        });
        h
    }
}

pub(crate) fn normal<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data)
        .expect("length matches shape")
        .into_persistent()
}

pub(crate) fn zeros<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    Tensor::zeros(shape).into_persistent()
}

pub(crate) fn ones<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    Tensor::ones(shape).into_persistent()
}
