//! Target-conditioned fusion and classification.
//!
//! The target sequence queries the sentence and the image through two
//! independent cross-attention modules. The two results are joined along
//! the feature axis, projected back to `d`, and refined by one post-LN
//! self-attention block:
//!
//! ```text
//! H  = [H_{T->S} | H_{T->V}] · W_cat + b_cat          (m x d)
//! Z  = LN(H + MHSA(H, H, H))
//! H~ = LN(FFN(Z) + Z)
//! y^ = softmax(W^T H~[0] + b)                        (3 classes)
//! z  = psi(H~[0])                                    (projection head)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    attention_heads, encode_image_on, encode_target_on, encode_text_on, feed_forward,
    EncoderBlockParams, EncoderParams,
};
use crate::error::{CedError, Result};
use crate::kv::{fmt_f64, parse_value, KvConfig};
use crate::params::{
    impl_bind, param_group, AttentionParams, Bind, FeedForwardParams, LayerNormParams, Leaf,
};
use crate::rng::{derived_rng, tag};
use crate::synth_data::MultimodalSample;
use crate::tensor_math::{softmax_rows, Matrix, Tape, Var};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_proj: usize,
    pub d_img: usize,
    pub num_patches: usize,
    pub normalize_projection: bool,
    pub positional_encoding: bool,
    pub ln_eps: f64,
    /// Standard deviation of the initial embedding table.
    pub embedding_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 120,
            d_model: 32,
            heads: 4,
            d_ff: 128,
            d_proj: 16,
            d_img: 16,
            num_patches: 16,
            normalize_projection: true,
            positional_encoding: false,
            ln_eps: 1e-5,
            embedding_init_std: 1.0,
        }
    }
}

impl ModelConfig {
    /// Pretrained-encoder-sized dimensions: 768 hidden units, 12 heads, 16 patches.
    pub fn paper_scale(vocab_size: usize, d_img: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 768,
            heads: 12,
            d_ff: 3072,
            d_proj: 128,
            d_img,
            num_patches: 16,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Nonlinearity used in every FFN and in the projection head; echoed
    /// into checkpoints for reproducibility.
    pub fn activation(&self) -> &'static str {
        "gelu_tanh"
    }

    pub(crate) fn write_pairs_prefixed(&self, prefix: &str, out: &mut Vec<(String, String)>) {
        let mut push = |k: &str, v: String| out.push((format!("{prefix}{k}"), v));
        push("vocab_size", self.vocab_size.to_string());
        push("d_model", self.d_model.to_string());
        push("heads", self.heads.to_string());
        push("d_ff", self.d_ff.to_string());
        push("d_proj", self.d_proj.to_string());
        push("d_img", self.d_img.to_string());
        push("num_patches", self.num_patches.to_string());
        push("normalize_projection", self.normalize_projection.to_string());
        push("positional_encoding", self.positional_encoding.to_string());
        push("ln_eps", fmt_f64(self.ln_eps));
        push("embedding_init_std", fmt_f64(self.embedding_init_std));
        push("activation", self.activation().to_string());
    }

    /// Applies `key = value`; returns `Ok(false)` for keys it does not own.
    pub(crate) fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "d_proj" => self.d_proj = parse_value(key, value)?,
            "d_img" => self.d_img = parse_value(key, value)?,
            "num_patches" => self.num_patches = parse_value(key, value)?,
            "normalize_projection" => self.normalize_projection = parse_value(key, value)?,
            "positional_encoding" => self.positional_encoding = parse_value(key, value)?,
            "ln_eps" => self.ln_eps = parse_value(key, value)?,
            "embedding_init_std" => self.embedding_init_std = parse_value(key, value)?,
            "activation" => {
                if value != self.activation() {
                    return Err(CedError::config(key, "only gelu_tanh is supported"));
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("d_proj", self.d_proj),
            ("d_img", self.d_img),
            ("num_patches", self.num_patches),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CedError::config(name, "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(CedError::config(
                "heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if !(self.ln_eps > 0.0) {
            return Err(CedError::config("ln_eps", "must be positive"));
        }
        Ok(())
    }
}

impl KvConfig for ModelConfig {
    fn write_pairs(&self, out: &mut Vec<(String, String)>) {
        self.write_pairs_prefixed("", out);
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.set_key(key, value)? {
            Ok(())
        } else {
            Err(CedError::config(key, "unknown key"))
        }
    }

    fn validate(&self) -> Result<()> {
        ModelConfig::validate(self)
    }
}

param_group! {
    /// Per-head query/key/value weights, heads stored side by side: head
    /// `i` owns columns `[i·d_k, (i+1)·d_k)` and the outputs are
    /// concatenated without a further projection.
    pub struct CrossAttentionParams {
        w_query: Leaf,
        w_key: Leaf,
        w_value: Leaf,
    }
}

param_group! {
    pub struct FusionParams {
        concat_proj: Leaf,
        concat_bias: Leaf,
        attn: AttentionParams,
        ln_attn: LayerNormParams,
        ffn: FeedForwardParams,
        ln_ffn: LayerNormParams,
        classifier_w: Leaf,
        classifier_b: Leaf,
        proj_w1: Leaf,
        proj_b1: Leaf,
        proj_w2: Leaf,
        proj_b2: Leaf,
    }
}

param_group! {
    pub struct ModelParams {
        encoder: EncoderParams,
        text_cross: CrossAttentionParams,
        image_cross: CrossAttentionParams,
        fusion: FusionParams,
    }
}

impl_bind!(CrossAttentionParams, FusionParams, ModelParams);

impl<T> ModelParams<T> {
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _| out.push(name.to_string()));
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, v| out.push(v));
        out
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _| n += 1);
        n
    }
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let z = Matrix::zeros;
        let attention = || AttentionParams {
            w_query: z(d, d),
            w_key: z(d, d),
            w_value: z(d, d),
            w_out: z(d, d),
            b_out: z(1, d),
        };
        let ln = || LayerNormParams {
            gamma: z(1, d),
            beta: z(1, d),
        };
        let ffn = || FeedForwardParams {
            w_in: z(d, cfg.d_ff),
            b_in: z(1, cfg.d_ff),
            w_out: z(cfg.d_ff, d),
            b_out: z(1, d),
        };
        let block = || EncoderBlockParams {
            ln_attn: ln(),
            attn: attention(),
            ln_ffn: ln(),
            ffn: ffn(),
        };
        let cross = || CrossAttentionParams {
            w_query: z(d, d),
            w_key: z(d, d),
            w_value: z(d, d),
        };
        ModelParams {
            encoder: EncoderParams {
                embedding: z(cfg.vocab_size, d),
                text_block: block(),
                target_block: block(),
                image_proj: z(cfg.d_img, d),
                image_bias: z(1, d),
            },
            text_cross: cross(),
            image_cross: cross(),
            fusion: FusionParams {
                concat_proj: z(2 * d, d),
                concat_bias: z(1, d),
                attn: attention(),
                ln_attn: ln(),
                ffn: ffn(),
                ln_ffn: ln(),
                classifier_w: z(d, NUM_CLASSES),
                classifier_b: z(1, NUM_CLASSES),
                proj_w1: z(d, cfg.d_proj),
                proj_b1: z(1, cfg.d_proj),
                proj_w2: z(cfg.d_proj, cfg.d_proj),
                proj_b2: z(1, cfg.d_proj),
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, m| ok &= m.is_finite());
        ok
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Gains start at one, biases at zero, the embedding table at
    /// `N(0, embedding_init_std²)` and every other weight at
    /// `N(0, 1/fan_in)`.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut params = ModelParams::zeros(&config);
        let mut rng = derived_rng(seed, &[tag("model-init")]);
        let emb_std = config.embedding_init_std;
        params.visit_mut("", &mut |name, m| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if leaf == "gamma" {
                m.as_mut_slice().fill(1.0);
            } else if !is_bias_name(leaf) {
                let std = if leaf == "embedding" {
                    emb_std
                } else {
                    1.0 / (m.rows() as f64).sqrt()
                };
                for v in m.as_mut_slice() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v = n * std;
                }
            }
        });
        Model { config, params }
    }

    pub fn forward(&self, sample: &MultimodalSample) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = forward_on(&mut tape, &bound, &self.config, sample)?;
        Ok(vars.read(&tape))
    }

    /// Probability vectors for many samples, reusing one bound copy of the
    /// weights per chunk.
    pub fn predict(&self, samples: &[MultimodalSample]) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            for s in chunk {
                let vars = forward_on(&mut tape, &bound, &self.config, s)?;
                out.push(to_triple(tape.value(vars.probs)));
            }
        }
        Ok(out)
    }
}

fn is_bias_name(leaf: &str) -> bool {
    matches!(
        leaf,
        "beta" | "b_in" | "b_out" | "proj_b1" | "proj_b2" | "classifier_b" | "concat_bias" | "image_bias"
    )
}

fn to_triple(m: &Matrix) -> [f64; NUM_CLASSES] {
    let s = m.as_slice();
    [s[0], s[1], s[2]]
}

/// Result of one forward pass: class probabilities, the fused CLS
/// representation `h`, and its projection `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub probs: [f64; NUM_CLASSES],
    pub h: Vec<f64>,
    pub z: Vec<f64>,
}

/// Tape handles produced by [`forward_on`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub probs: Var,
    pub h: Var,
    pub z: Var,
    /// Per-head weights: text cross-attention, image cross-attention,
    /// fusion self-attention.
    pub attention: Vec<Var>,
}

impl ForwardVars {
    pub fn read(&self, tape: &Tape) -> ForwardOutput {
        ForwardOutput {
            probs: to_triple(tape.value(self.probs)),
            h: tape.value(self.h).as_slice().to_vec(),
            z: tape.value(self.z).as_slice().to_vec(),
        }
    }
}

pub(crate) fn cross_attention_on(
    tape: &mut Tape,
    query: Var,
    kv: Var,
    p: &CrossAttentionParams<Var>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    attention_heads(tape, query, kv, p.w_query, p.w_key, p.w_value, heads)
}

pub(crate) fn fuse_on(
    tape: &mut Tape,
    h_ts: Var,
    h_tv: Var,
    p: &FusionParams<Var>,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    if tape.value(h_ts).shape() != tape.value(h_tv).shape() {
        return Err(CedError::shape(format!(
            "fusion inputs {:?} and {:?}",
            tape.value(h_ts).shape(),
            tape.value(h_tv).shape()
        )));
    }
    let joined = tape.concat_cols(&[h_ts, h_tv])?;
    let h = tape.matmul(joined, p.concat_proj)?;
    let h = tape.add_bias(h, p.concat_bias)?;
    let (heads_out, weights) =
        attention_heads(tape, h, h, p.attn.w_query, p.attn.w_key, p.attn.w_value, cfg.heads)?;
    let mhsa = tape.matmul(heads_out, p.attn.w_out)?;
    let mhsa = tape.add_bias(mhsa, p.attn.b_out)?;
    let z = tape.add(h, mhsa)?;
    let z = tape.layer_norm(z, p.ln_attn.gamma, p.ln_attn.beta, cfg.ln_eps)?;
    let ff = feed_forward(tape, z, &p.ffn)?;
    let out = tape.add(ff, z)?;
    let out = tape.layer_norm(out, p.ln_ffn.gamma, p.ln_ffn.beta, cfg.ln_eps)?;
    Ok((out, weights))
}

pub(crate) fn classify_on(tape: &mut Tape, h_tilde: Var, p: &FusionParams<Var>) -> Result<(Var, Var, Var)> {
    let cls = tape.select_row(h_tilde, 0)?;
    let logits = tape.matmul(cls, p.classifier_w)?;
    let logits = tape.add_bias(logits, p.classifier_b)?;
    let probs = tape.softmax_rows(logits)?;
    Ok((cls, logits, probs))
}

pub(crate) fn project_on(
    tape: &mut Tape,
    h: Var,
    p: &FusionParams<Var>,
    normalize: bool,
) -> Result<Var> {
    let hidden = tape.matmul(h, p.proj_w1)?;
    let hidden = tape.add_bias(hidden, p.proj_b1)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, p.proj_w2)?;
    let out = tape.add_bias(out, p.proj_b2)?;
    Ok(if normalize {
        tape.l2_normalize_rows(out)
    } else {
        out
    })
}

pub fn forward_on(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    sample: &MultimodalSample,
) -> Result<ForwardVars> {
    let h_s = encode_text_on(tape, &sample.sentence, &p.encoder, cfg)?;
    let h_t = encode_target_on(tape, &sample.target_tokens, &p.encoder, cfg)?;
    let h_v = encode_image_on(tape, &sample.image, &p.encoder, cfg)?;
    let (h_ts, mut attention) = cross_attention_on(tape, h_t, h_s, &p.text_cross, cfg.heads)?;
    let (h_tv, w_img) = cross_attention_on(tape, h_t, h_v, &p.image_cross, cfg.heads)?;
    attention.extend(w_img);
    let (h_tilde, w_fuse) = fuse_on(tape, h_ts, h_tv, &p.fusion, cfg)?;
    attention.extend(w_fuse);
    let (h, logits, probs) = classify_on(tape, h_tilde, &p.fusion)?;
    let z = project_on(tape, h, &p.fusion, cfg.normalize_projection)?;
    Ok(ForwardVars {
        logits,
        probs,
        h,
        z,
        attention,
    })
}

/// Target-queried multi-head cross-attention: `m x d` queries over an
/// `L x d` key/value sequence.
pub fn cross_attention(
    query_seq: &Matrix,
    kv_seq: &Matrix,
    p: &CrossAttentionParams,
    heads: usize,
) -> Result<Matrix> {
    Ok(cross_attention_with_weights(query_seq, kv_seq, p, heads)?.0)
}

/// [`cross_attention`] that also returns each head's `m x L` weights.
pub fn cross_attention_with_weights(
    query_seq: &Matrix,
    kv_seq: &Matrix,
    p: &CrossAttentionParams,
    heads: usize,
) -> Result<(Matrix, Vec<Matrix>)> {
    if query_seq.cols() != p.w_query.rows() || kv_seq.cols() != p.w_key.rows() {
        return Err(CedError::shape("cross-attention input width mismatch"));
    }
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let q = tape.leaf(query_seq.clone());
    let kv = tape.leaf(kv_seq.clone());
    let (out, weights) = cross_attention_on(&mut tape, q, kv, &bound, heads)?;
    Ok((
        tape.value(out).clone(),
        weights.iter().map(|&w| tape.value(w).clone()).collect(),
    ))
}

pub fn fuse(h_ts: &Matrix, h_tv: &Matrix, p: &FusionParams, cfg: &ModelConfig) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let a = tape.leaf(h_ts.clone());
    let b = tape.leaf(h_tv.clone());
    let (out, _) = fuse_on(&mut tape, a, b, &bound, cfg)?;
    Ok(tape.value(out).clone())
}

pub fn classify(h_tilde: &Matrix, p: &FusionParams) -> Result<[f64; NUM_CLASSES]> {
    if h_tilde.rows() == 0 {
        return Err(CedError::shape("classify needs at least one row"));
    }
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let h = tape.leaf(h_tilde.clone());
    let (_, _, probs) = classify_on(&mut tape, h, &bound)?;
    Ok(to_triple(tape.value(probs)))
}

pub fn project(h: &[f64], p: &FusionParams, normalize: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape);
    let h = tape.leaf(Matrix::row_vector(h));
    let z = project_on(&mut tape, h, &bound, normalize)?;
    Ok(tape.value(z).as_slice().to_vec())
}

/// Softmax over logits; exposed for composition checks.
pub fn probabilities(logits: &[f64]) -> Result<[f64; NUM_CLASSES]> {
    Ok(to_triple(&softmax_rows(&Matrix::row_vector(logits))?))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CEDCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes weights and config to `path` (via a temporary file and rename).
///
/// Layout, little-endian: magic, `u32` version, `u32` length + UTF-8
/// model config (`key = value`), `u32` length + UTF-8 free-form metadata,
/// `u32` tensor count, then per tensor `u32` name length, name, `u64`
/// rows, `u64` cols and `rows·cols` `f64` values in row-major order.
pub fn save_checkpoint(path: &Path, model: &Model, metadata: &str) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata);
    crate::io_util::write_atomic(path, &bytes)
}

pub fn encode_checkpoint(model: &Model, metadata: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.config.to_kv_string();
    for text in [cfg.as_str(), metadata] {
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
    }
    buf.extend_from_slice(&(model.params.count() as u32).to_le_bytes());
    model.params.visit("", &mut |name, m| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    buf
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CedError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<(Model, String)> {
    let mut r = bytes;
    let bad = |msg: &str| CedError::Data(format!("{}: {msg}", origin.display()));
    let take = |n: usize, r: &mut &[u8]| -> Result<Vec<u8>> {
        if r.len() < n {
            return Err(bad("truncated checkpoint"));
        }
        let (head, tail) = r.split_at(n);
        *r = tail;
        Ok(head.to_vec())
    };
    let magic = take(8, &mut r)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let u32_at = |v: Vec<u8>| u32::from_le_bytes(v.try_into().expect("4 bytes"));
    let u64_at = |v: Vec<u8>| u64::from_le_bytes(v.try_into().expect("8 bytes"));
    let version = u32_at(take(4, &mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(CedError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut texts = Vec::new();
    for _ in 0..2 {
        let len = u32_at(take(4, &mut r)?) as usize;
        texts.push(String::from_utf8(take(len, &mut r)?).map_err(|_| bad("invalid utf-8"))?);
    }
    let config = ModelConfig::from_kv_str(&texts[0], origin)?;
    let mut params = ModelParams::zeros(&config);
    let count = u32_at(take(4, &mut r)?) as usize;
    if count != params.count() {
        return Err(bad("tensor count does not match config"));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4, &mut r)?) as usize;
        let name = String::from_utf8(take(len, &mut r)?).map_err(|_| bad("invalid utf-8"))?;
        let rows = u64_at(take(8, &mut r)?) as usize;
        let cols = u64_at(take(8, &mut r)?) as usize;
        let raw = take(rows * cols * 8, &mut r)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let mut iter = tensors.into_iter();
    let mut mismatch = None;
    params.visit_mut("", &mut |name, slot| {
        let (n, m) = iter.next().expect("count checked");
        if n != name || m.shape() != slot.shape() {
            mismatch.get_or_insert(format!("tensor {n} {:?} where {name} {:?} expected", m.shape(), slot.shape()));
        } else {
            *slot = m;
        }
    });
    if let Some(msg) = mismatch {
        return Err(bad(&msg));
    }
    Ok((Model { config, params }, texts.swap_remove(1)))
}

/// Writes a human-readable dump of parameter names and shapes.
pub fn describe(model: &Model, out: &mut impl Write) -> std::io::Result<()> {
    let mut lines = Vec::new();
    model
        .params
        .visit("", &mut |name, m| lines.push(format!("{name}\t{}x{}", m.rows(), m.cols())));
    for l in lines {
        writeln!(out, "{l}")?;
    }
    Ok(())
}
