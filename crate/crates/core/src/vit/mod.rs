//! ViT-style patch encoder with prompt-token injection.
//!
//! Every instance image is cut into `w` patches, embedded, and joined with
//! the shared prompt tokens and a class token in the order
//! `[patch tokens, prompt tokens, class token]`. After the encoder layers the
//! class token (row `w + k`) is the instance feature.

mod census;
mod config;
mod forward;
mod model;

pub use census::{count_trainable_params, ParamCensus};
pub use config::VitConfig;
pub use forward::{
    assemble_sequence, attention, embed, encoder_layer, forward_features, patchify, BagPatches, FeatureMatrix,
    TokenSequence,
};
pub use model::{Backbone, EncoderLayer, PatchEmbed, PromptSet};
