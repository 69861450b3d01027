//! Text, target and image encoders.
//!
//! Text and target share one embedding table; each has its own pre-LN
//! self-attention block. Image patches arrive as frozen features and only
//! the linear projection into the model dimension is trained.

use serde::{Deserialize, Serialize};

use crate::error::{CedError, Result};
use crate::fusion_model::ModelConfig;
use crate::params::{
    impl_bind, param_group, AttentionParams, Bind, FeedForwardParams, LayerNormParams, Leaf,
};
use crate::tensor_math::{Matrix, Tape, Var};

/// Reserved vocabulary id prepended to every target sequence.
pub const CLS_ID: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(CedError::shape("empty token sequence"));
        }
        match self.0.iter().find(|&&id| id >= vocab_size) {
            Some(&id) => Err(CedError::OutOfVocabulary { id, vocab_size }),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }
}

/// Frozen per-patch image features, `q x d_img`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatchFeatures(Matrix);

impl PatchFeatures {
    pub fn new(matrix: Matrix) -> Self {
        PatchFeatures(matrix)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn num_patches(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

param_group! {
    /// Pre-LN transformer block:
    /// `x1 = x + MHSA(LN(x))`, `out = x1 + FFN(LN(x1))`.
    pub struct EncoderBlockParams {
        ln_attn: LayerNormParams,
        attn: AttentionParams,
        ln_ffn: LayerNormParams,
        ffn: FeedForwardParams,
    }
}

param_group! {
    pub struct EncoderParams {
        embedding: Leaf,
        text_block: EncoderBlockParams,
        target_block: EncoderBlockParams,
        image_proj: Leaf,
        image_bias: Leaf,
    }
}

impl_bind!(EncoderBlockParams, EncoderParams);

/// Scaled dot-product attention for every head, heads concatenated along
/// features. Returns the concatenated output and each head's weights.
pub(crate) fn attention_heads(
    tape: &mut Tape,
    query_src: Var,
    kv_src: Var,
    w_query: Var,
    w_key: Var,
    w_value: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let q = tape.matmul(query_src, w_query)?;
    let k = tape.matmul(kv_src, w_key)?;
    let v = tape.matmul(kv_src, w_value)?;
    let width = tape.value(q).cols();
    if heads == 0 || width % heads != 0 {
        return Err(CedError::shape(format!(
            "{width} projected features cannot be split into {heads} heads"
        )));
    }
    let d_k = width / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let kh = tape.slice_cols(k, h * d_k, d_k)?;
        let vh = tape.slice_cols(v, h * d_k, d_k)?;
        let scores = tape.matmul_transposed(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(probs, vh)?);
        weights.push(probs);
    }
    Ok((tape.concat_cols(&outs)?, weights))
}

/// Multi-head attention followed by the output projection.
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    query_src: Var,
    kv_src: Var,
    p: &AttentionParams<Var>,
    heads: usize,
) -> Result<Var> {
    let (concat, _) = attention_heads(tape, query_src, kv_src, p.w_query, p.w_key, p.w_value, heads)?;
    let projected = tape.matmul(concat, p.w_out)?;
    tape.add_bias(projected, p.b_out)
}

pub(crate) fn feed_forward(tape: &mut Tape, x: Var, p: &FeedForwardParams<Var>) -> Result<Var> {
    let hidden = tape.matmul(x, p.w_in)?;
    let hidden = tape.add_bias(hidden, p.b_in)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, p.w_out)?;
    tape.add_bias(out, p.b_out)
}

pub(crate) fn encoder_block(
    tape: &mut Tape,
    x: Var,
    p: &EncoderBlockParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let normed = tape.layer_norm(x, p.ln_attn.gamma, p.ln_attn.beta, cfg.ln_eps)?;
    let attended = multi_head_attention(tape, normed, normed, &p.attn, cfg.heads)?;
    let x1 = tape.add(x, attended)?;
    let normed = tape.layer_norm(x1, p.ln_ffn.gamma, p.ln_ffn.beta, cfg.ln_eps)?;
    let ff = feed_forward(tape, normed, &p.ffn)?;
    tape.add(x1, ff)
}

/// Sinusoidal position table, `len x d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

fn embed(
    tape: &mut Tape,
    tokens: &TokenSequence,
    p: &EncoderParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    tokens.validate(tape.value(p.embedding).rows())?;
    let x = tape.gather_rows(p.embedding, tokens.ids())?;
    if cfg.positional_encoding {
        let pos = tape.leaf(sinusoidal_positions(tokens.len(), cfg.d_model));
        tape.add(x, pos)
    } else {
        Ok(x)
    }
}

pub(crate) fn encode_text_on(
    tape: &mut Tape,
    tokens: &TokenSequence,
    p: &EncoderParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let x = embed(tape, tokens, p, cfg)?;
    encoder_block(tape, x, &p.text_block, cfg)
}

pub(crate) fn encode_target_on(
    tape: &mut Tape,
    tokens: &TokenSequence,
    p: &EncoderParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let first = tokens.ids().first().copied();
    if first != Some(CLS_ID) {
        return Err(CedError::MissingCls {
            cls: CLS_ID,
            found: first,
        });
    }
    let x = embed(tape, tokens, p, cfg)?;
    encoder_block(tape, x, &p.target_block, cfg)
}

pub(crate) fn encode_image_on(
    tape: &mut Tape,
    patches: &PatchFeatures,
    p: &EncoderParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    if patches.num_patches() != cfg.num_patches {
        return Err(CedError::shape(format!(
            "expected {} patches, got {}",
            cfg.num_patches,
            patches.num_patches()
        )));
    }
    if patches.dim() != tape.value(p.image_proj).rows() {
        return Err(CedError::shape(format!(
            "patch features have {} columns, projection expects {}",
            patches.dim(),
            tape.value(p.image_proj).rows()
        )));
    }
    // Frozen features: a leaf whose gradient is never consumed.
    let x = tape.leaf(patches.matrix().clone());
    let projected = tape.matmul(x, p.image_proj)?;
    tape.add_bias(projected, p.image_bias)
}

/// `n x d` representation of a sentence.
pub fn encode_text(tokens: &TokenSequence, p: &EncoderParams, cfg: &ModelConfig) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let out = encode_text_on(&mut tape, tokens, &bound, cfg)?;
    Ok(tape.value(out).clone())
}

/// `m x d` representation of a CLS-prefixed target; row 0 is the CLS row.
pub fn encode_target(
    tokens: &TokenSequence,
    p: &EncoderParams,
    cfg: &ModelConfig,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let out = encode_target_on(&mut tape, tokens, &bound, cfg)?;
    Ok(tape.value(out).clone())
}

/// `q x d` projection of frozen patch features.
pub fn encode_image(patches: &PatchFeatures, p: &EncoderParams, cfg: &ModelConfig) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let out = encode_image_on(&mut tape, patches, &bound, cfg)?;
    Ok(tape.value(out).clone())
}
