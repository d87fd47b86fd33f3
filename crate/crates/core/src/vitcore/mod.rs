//! Forward semantics of the vision-transformer blocks and the ConvMixer block.
//!
//! Everything is written against the autodiff [`Tape`](crate::autodiff::Tape)
//! so the same code serves training and Jacobian extraction; the plain
//! functions here build a throwaway tape and return the forward value.

mod attention;
mod checkpoint;
mod convmixer;
mod image;
mod model;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::graying::GrayingError;
use crate::linalg::io::FormatError;
use crate::linalg::LinalgError;

pub use attention::{
    attention_on_tape, ffn_forward, ffn_on_tape, sab_forward, self_attention, AttentionParams,
    AttentionVars, FfnParams, FfnVars,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CheckpointManifest, TensorEntry, CHECKPOINT_MAGIC,
};
pub use convmixer::{
    convmixer_block, convmixer_forward, BatchNormParams, BnMode, BnStats, BoundConvMixer,
    ConvMixerBlockOutput, ConvMixerBlockParams, ConvMixerParams, ConvMixerSpec, FeatureMap,
    BN_MOMENTUM,
};
pub use image::{stack_tokens, tokenize, Image, ImageShape};
pub(crate) use attention::sab_on_tape;
pub(crate) use model::tokens_forward_with_taps;
pub use model::{
    default_linear_attention, patch_embed, vit_forward, vit_forward_with_taps, BoundModel,
    InitScheme, LayerParams, LayerTaps, ModelParams, ModelSpec, NormParams, Param, PatchEmbedParams, TapVars,
};

/// Scale used by scaled-linear attention unless configured otherwise.
pub const DEFAULT_LINEAR_SCALE: f64 = 16.0;
/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Largest trainable parameter count a model spec may ask for.
pub const MAX_PARAMS: usize = 1 << 26;
/// Variance floor inside layer and batch normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    /// `(1/k)·QKᵀ·V`.
    ScaledLinear { k: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub skip_sab: bool,
    pub skip_ffn: bool,
    pub prenorm: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            skip_sab: true,
            skip_ffn: true,
            prenorm: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VitError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<VitError>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graying(#[from] GrayingError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl VitError {
    pub(crate) fn in_layer(self, layer: usize) -> Self {
        VitError::Layer {
            layer,
            source: Box::new(self),
        }
    }
}

pub(crate) fn activate(
    tape: &mut crate::autodiff::Tape,
    x: crate::autodiff::Var,
    act: Activation,
) -> Result<crate::autodiff::Var, AutodiffError> {
    match act {
        Activation::Gelu => tape.gelu(x),
        Activation::Relu => tape.relu(x),
        Activation::Linear => Ok(x),
    }
}
