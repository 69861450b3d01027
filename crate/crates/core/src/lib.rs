//! Counterfactual-enhanced debiasing for target-oriented multimodal
//! sentiment classification, at desk scale.
//!
//! A synthetic corpus plants word/label shortcuts ([`synth_data`]); the
//! [`augmentation`] module builds sentiment-reversed and sentiment-invariant
//! counterfactuals; [`fusion_model`] is a target-queried cross-attention
//! classifier trained by [`training`] on cross-entropy plus the adaptive
//! contrastive loss in [`losses`].

pub mod augmentation;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod fusion_model;
pub mod io_util;
pub mod kv;
pub mod losses;
mod params;
pub mod rng;
pub mod synth_data;
pub mod tensor_math;
pub mod training;

pub use error::{CedError, Result};
pub use params::{AttentionParams, Bind, FeedForwardParams, LayerNormParams};
