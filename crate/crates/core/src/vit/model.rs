use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::VitConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{normal, ones, zeros, ParamTree};
use crate::scalar::Scalar;

/// Patch projection, positional embeddings, and the class token.
///
/// `pos` has `w + 1` rows: one per patch position and a last one for the
/// class token. Prompt tokens get no position.
#[derive(Clone, Debug)]
pub struct PatchEmbed<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub pos: Tensor<S>,
    pub cls: Tensor<S>,
}

/// One pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct EncoderLayer<S: Scalar> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub qkv_w: Tensor<S>,
    pub qkv_b: Tensor<S>,
    pub proj_w: Tensor<S>,
    pub proj_b: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub fc1_w: Tensor<S>,
    pub fc1_b: Tensor<S>,
    pub fc2_w: Tensor<S>,
    pub fc2_b: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct Backbone<S: Scalar> {
    pub config: VitConfig,
    pub embed: PatchEmbed<S>,
    pub layers: Vec<EncoderLayer<S>>,
    pub norm_g: Tensor<S>,
    pub norm_b: Tensor<S>,
}

/// The `k x d` trainable prompt, shared by every instance of every bag.
#[derive(Clone, Debug)]
pub struct PromptSet<S: Scalar> {
    pub tokens: Tensor<S>,
}

impl<S: Scalar> EncoderLayer<S> {
    fn init(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Self {
        let w = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            normal(rng, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
        };
        EncoderLayer {
            ln1_g: ones(&[d]),
            ln1_b: zeros(&[d]),
            qkv_w: w(rng, d, 3 * d),
            qkv_b: zeros(&[3 * d]),
            proj_w: w(rng, d, d),
            proj_b: zeros(&[d]),
            ln2_g: ones(&[d]),
            ln2_b: zeros(&[d]),
            fc1_w: w(rng, d, hidden),
            fc1_b: zeros(&[hidden]),
            fc2_w: w(rng, hidden, d),
            fc2_b: zeros(&[d]),
        }
    }

    /// Attention and MLP weights all zero: the block is the identity.
    pub fn zeroed(d: usize, hidden: usize) -> Self {
        EncoderLayer {
            ln1_g: ones(&[d]),
            ln1_b: zeros(&[d]),
            qkv_w: zeros(&[d, 3 * d]),
            qkv_b: zeros(&[3 * d]),
            proj_w: zeros(&[d, d]),
            proj_b: zeros(&[d]),
            ln2_g: ones(&[d]),
            ln2_b: zeros(&[d]),
            fc1_w: zeros(&[d, hidden]),
            fc1_b: zeros(&[hidden]),
            fc2_w: zeros(&[hidden, d]),
            fc2_b: zeros(&[d]),
        }
    }
}

impl<S: Scalar> Backbone<S> {
    /// Fixed-seed random backbone. Linear weights are `N(0, 1/fan_in)`,
    /// positional embeddings and the class token `N(0, 0.02^2)`.
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let p = config.patch_dim();
        let embed = PatchEmbed {
            weight: normal(&mut rng, &[p, d], (1.0 / p as f64).sqrt()),
            bias: zeros(&[d]),
            pos: normal(&mut rng, &[config.num_patches() + 1, d], 0.02),
            cls: normal(&mut rng, &[1, d], 0.02),
        };
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::init(&mut rng, d, config.mlp_hidden()))
            .collect();
        Ok(Backbone {
            config: config.clone(),
            embed,
            layers,
            norm_g: ones(&[d]),
            norm_b: zeros(&[d]),
        })
    }
}

impl<S: Scalar> PromptSet<S> {
    /// `k` tokens drawn i.i.d. from `N(0, 0.02^2)`.
    pub fn init(k: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PromptSet {
            tokens: normal(&mut rng, &[k, d], 0.02),
        }
    }

    pub fn from_tensor(tokens: Tensor<S>) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "prompt must be k x d, got {:?}",
                tokens.shape()
            )));
        }
        Ok(PromptSet {
            tokens: tokens.into_persistent(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

impl<S: Scalar> ParamTree<S> for PatchEmbed<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f("weight".into(), &self.weight);
        f("bias".into(), &self.bias);
        f("pos".into(), &self.pos);
        f("cls".into(), &self.cls);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f("weight".into(), &mut self.weight);
        f("bias".into(), &mut self.bias);
        f("pos".into(), &mut self.pos);
        f("cls".into(), &mut self.cls);
    }
}

macro_rules! layer_fields {
    ($self:ident, $f:ident, $($field:ident),*) => {
        $( $f(stringify!($field).into(), & $self.$field); )*
    };
    (mut $self:ident, $f:ident, $($field:ident),*) => {
        $( $f(stringify!($field).into(), &mut $self.$field); )*
    };
}

impl<S: Scalar> ParamTree<S> for EncoderLayer<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        layer_fields!(self, f, ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        layer_fields!(mut self, f, ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b);
    }
}

impl<S: Scalar> ParamTree<S> for Backbone<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.embed.visit(&mut |n, t| f(format!("embed.{n}"), t));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&mut |n, t| f(format!("layers.{i}.{n}"), t));
        }
        f("norm_g".into(), &self.norm_g);
        f("norm_b".into(), &self.norm_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.embed.visit_mut(&mut |n, t| f(format!("embed.{n}"), t));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&mut |n, t| f(format!("layers.{i}.{n}"), t));
        }
        f("norm_g".into(), &mut self.norm_g);
        f("norm_b".into(), &mut self.norm_b);
    }
}

impl<S: Scalar> ParamTree<S> for PromptSet<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        f("tokens".into(), &self.tokens);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f("tokens".into(), &mut self.tokens);
    }
}
