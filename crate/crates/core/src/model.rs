//! Toy transformer models with deterministic initialization, a portable
//! checkpoint format and per-step decoding in any attention mode.
//!
//! Block wiring is pre-norm: `x + Attn(LN(x))`, then `x + FFN(LN(x))` with
//! `FFN = ReLU(x·W1 + b1)·W2 + b2`. Encoder-decoder decoder layers run
//! self-attention, cross-attention and FFN in that order. A final layer norm
//! precedes the output projection, which is tied to the token embedding.
//! Positions are learned and absolute; in decoder-only models they continue
//! from the prefix into the generated tokens.
//!
//! # Parameter traversal order
//!
//! Initialization draws and checkpoint payloads follow one fixed order:
//!
//! 1. `token_embedding` `[vocab, d_m]`, `position_embedding` `[max_positions, d_m]`
//! 2. encoder layers (encoder-decoder only), each: `attn_norm.{gain,shift}`,
//!    `self_attn`, `ffn_norm.{gain,shift}`, `ffn.{w1,b1,w2,b2}`; then
//!    `encoder_norm.{gain,shift}`
//! 3. decoder layers, each: `self_norm.{gain,shift}`, `self_attn`,
//!    (encoder-decoder only) `cross_norm.{gain,shift}`, `cross_attn`,
//!    `ffn_norm.{gain,shift}`, `ffn.{w1,b1,w2,b2}`
//! 4. `decoder_norm.{gain,shift}`
//!
//! An attention block is `wq[0..h]`, `wk[0..h]`, `wv[0..h]`, `wo[0..h]`,
//! `bq[0..h]`, `bk[0..h]`, `bv[0..h]`, `bo`. With `A = 4·h·d_m·d_k + 3·h·d_k + d_m`
//! and `F = 2·d_m·d_ff + d_ff + d_m` the parameter count is
//! `(vocab + max_positions)·d_m + L_enc·(A + F + 4·d_m) + 2·d_m + L·(2A + F + 6·d_m) + 2·d_m`
//! for encoder-decoder and `(vocab + max_positions)·d_m + L·(A + F + 4·d_m) + 2·d_m`
//! for decoder-only models.
//!
//! # Checkpoint format
//!
//! Bytes 0-3 are the magic `ELAT`, 4-7 the format version (u32 LE, currently 1),
//! 8-11 the header length `HL` (u32 LE), followed by `HL` bytes of UTF-8 JSON
//! holding the [`ModelConfig`] and then every tensor in traversal order as raw
//! little-endian f64 values, row-major, without padding.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    causal_multi_head_attention, el_attention_rows, mha_incremental_step, mha_over_cache,
    mixed_self_attention, multi_head_attention, AttentionError, AttentionParams, HiddenCache,
    KvCache,
};
use crate::tensor::{
    layer_norm, matmul, matmul_nt, seeded_uniform, Rng, Scalar, Tensor, TensorError,
};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ELAT";
pub const CHECKPOINT_VERSION: u32 = 1;

const LN_EPS: f64 = 1e-5;
const INIT_RANGE: (f64, f64) = (-0.1, 0.1);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("invalid model parameter: {0}")]
    Parameter(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("sequence length {len} exceeds max_positions {max}")]
    Length { len: usize, max: usize },
    #[error("decoder state error: {0}")]
    State(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint header is not a valid config: {0}")]
    Header(String),
    #[error("checkpoint payload does not match the header shapes at tensor `{tensor}`")]
    ShapeMismatch { tensor: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    EncoderDecoder,
    DecoderOnly,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::EncoderDecoder => "encoder-decoder",
            Architecture::DecoderOnly => "decoder-only",
        })
    }
}

/// How the decoder computes attention over input-related state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Recompute every projection of every past position at each step.
    #[serde(rename = "mha-no-cache")]
    MhaNoCache,
    /// Per-layer, per-head key/value caches, replicated per beam lane.
    #[serde(rename = "mha-cached")]
    MhaCached,
    /// EL-attention over raw hidden states shared by all layers and lanes.
    #[serde(rename = "el")]
    El,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [
        AttentionMode::MhaNoCache,
        AttentionMode::MhaCached,
        AttentionMode::El,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::MhaNoCache => "mha-no-cache",
            AttentionMode::MhaCached => "mha-cached",
            AttentionMode::El => "el",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mha-no-cache" => Ok(AttentionMode::MhaNoCache),
            "mha-cached" => Ok(AttentionMode::MhaCached),
            "el" => Ok(AttentionMode::El),
            other => Err(format!(
                "unknown attention mode `{other}` (expected el, mha-cached or mha-no-cache)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Encoder layers; ignored for decoder-only models.
    #[serde(rename = "L_enc")]
    pub encoder_layers: usize,
    #[serde(rename = "L")]
    pub decoder_layers: usize,
    pub d_m: usize,
    pub h: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small model used throughout the tests: 2+2 layers, `d_m = 32`, 4 heads.
    pub fn desk(architecture: Architecture, seed: u64) -> Self {
        Self {
            architecture,
            encoder_layers: 2,
            decoder_layers: 2,
            d_m: 32,
            h: 4,
            d_k: 8,
            d_ff: 64,
            vocab: 101,
            max_positions: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(ModelError::Parameter(msg.to_string()));
        if self.decoder_layers < 1 {
            return fail("L must be >= 1");
        }
        if self.architecture == Architecture::EncoderDecoder && self.encoder_layers < 1 {
            return fail("L_enc must be >= 1 for encoder-decoder models");
        }
        if self.vocab < 4 {
            return fail("vocab must be >= 4 (pad, bos, eos are reserved)");
        }
        if self.d_m == 0 || self.h == 0 || self.d_k == 0 || self.d_ff == 0 {
            return fail("d_m, h, d_k and d_ff must be positive");
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive");
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d_m, d_ff) = (self.d_m, self.d_ff);
        let attn = AttentionParams::<f64>::parameter_count(self.h, d_m, self.d_k);
        let ffn = 2 * d_m * d_ff + d_ff + d_m;
        let embeddings = (self.vocab + self.max_positions) * d_m;
        match self.architecture {
            Architecture::EncoderDecoder => {
                embeddings
                    + self.encoder_layers * (attn + ffn + 4 * d_m)
                    + 2 * d_m
                    + self.decoder_layers * (2 * attn + ffn + 6 * d_m)
                    + 2 * d_m
            }
            Architecture::DecoderOnly => {
                embeddings + self.decoder_layers * (attn + ffn + 4 * d_m) + 2 * d_m
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T = f64> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn zeros(d_m: usize) -> Self {
        Self {
            gain: Tensor::zeros(&[d_m]),
            shift: Tensor::zeros(&[d_m]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(layer_norm(x, &self.gain, &self.shift, T::from_f64(LN_EPS))?)
    }

    fn cast<U: Scalar>(&self) -> LayerNorm<U> {
        LayerNorm {
            gain: self.gain.cast(),
            shift: self.shift.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T = f64> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> FeedForward<T> {
    fn zeros(d_m: usize, d_ff: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[d_m, d_ff]),
            b1: Tensor::zeros(&[d_ff]),
            w2: Tensor::zeros(&[d_ff, d_m]),
            b2: Tensor::zeros(&[d_m]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let hidden = matmul(x, &self.w1)?.add_row(&self.b1)?.relu();
        Ok(matmul(&hidden, &self.w2)?.add_row(&self.b2)?)
    }

    fn cast<U: Scalar>(&self) -> FeedForward<U> {
        FeedForward {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T = f64> {
    pub attn_norm: LayerNorm<T>,
    pub self_attn: AttentionParams<T>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention<T = f64> {
    pub norm: LayerNorm<T>,
    pub attn: AttentionParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T = f64> {
    pub self_norm: LayerNorm<T>,
    pub self_attn: AttentionParams<T>,
    pub cross: Option<CrossAttention<T>>,
    pub ffn_norm: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f64> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub encoder_norm: Option<LayerNorm<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub decoder_norm: LayerNorm<T>,
}

fn zero_attention<T: Scalar>(config: &ModelConfig) -> AttentionParams<T> {
    let (h, d_m, d_k) = (config.h, config.d_m, config.d_k);
    let heads = |shape: &[usize]| (0..h).map(|_| Tensor::zeros(shape)).collect::<Vec<_>>();
    AttentionParams {
        h,
        d_m,
        d_k,
        wq: heads(&[d_m, d_k]),
        wk: heads(&[d_m, d_k]),
        wv: heads(&[d_m, d_k]),
        wo: heads(&[d_k, d_m]),
        bq: heads(&[d_k]),
        bk: heads(&[d_k]),
        bv: heads(&[d_k]),
        bo: Tensor::zeros(&[d_m]),
        include_key_bias: true,
        include_value_bias: true,
    }
}

fn push_attention<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    params: &'a mut AttentionParams<T>,
) {
    let h = params.h;
    let names = ["wq", "wk", "wv", "wo", "bq", "bk", "bv"];
    for (idx, t) in params.tensors_mut().into_iter().enumerate() {
        let name = if idx == 7 * h {
            format!("{prefix}.bo")
        } else {
            format!("{prefix}.{}.{}", names[idx / h], idx % h)
        };
        out.push((name, t));
    }
}

fn push_norm<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    norm: &'a mut LayerNorm<T>,
) {
    out.push((format!("{prefix}.gain"), &mut norm.gain));
    out.push((format!("{prefix}.shift"), &mut norm.shift));
}

fn push_ffn<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    ffn: &'a mut FeedForward<T>,
) {
    out.push((format!("{prefix}.w1"), &mut ffn.w1));
    out.push((format!("{prefix}.b1"), &mut ffn.b1));
    out.push((format!("{prefix}.w2"), &mut ffn.w2));
    out.push((format!("{prefix}.b2"), &mut ffn.b2));
}

impl<T: Scalar> Model<T> {
    /// Model with every weight zero, shaped for `config`.
    fn skeleton(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d_m = config.d_m;
        let enc_dec = config.architecture == Architecture::EncoderDecoder;
        let encoder = if enc_dec {
            (0..config.encoder_layers)
                .map(|_| EncoderLayer {
                    attn_norm: LayerNorm::zeros(d_m),
                    self_attn: zero_attention(config),
                    ffn_norm: LayerNorm::zeros(d_m),
                    ffn: FeedForward::zeros(d_m, config.d_ff),
                })
                .collect()
        } else {
            Vec::new()
        };
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer {
                self_norm: LayerNorm::zeros(d_m),
                self_attn: zero_attention(config),
                cross: enc_dec.then(|| CrossAttention {
                    norm: LayerNorm::zeros(d_m),
                    attn: zero_attention(config),
                }),
                ffn_norm: LayerNorm::zeros(d_m),
                ffn: FeedForward::zeros(d_m, config.d_ff),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding: Tensor::zeros(&[config.vocab, d_m]),
            position_embedding: Tensor::zeros(&[config.max_positions, d_m]),
            encoder,
            encoder_norm: enc_dec.then(|| LayerNorm::zeros(d_m)),
            decoder,
            decoder_norm: LayerNorm::zeros(d_m),
        })
    }

    /// Every parameter tensor with its name, in traversal order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        out.push(("token_embedding".to_string(), &mut self.token_embedding));
        out.push((
            "position_embedding".to_string(),
            &mut self.position_embedding,
        ));
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            push_norm(
                &mut out,
                &format!("encoder.{l}.attn_norm"),
                &mut layer.attn_norm,
            );
            push_attention(
                &mut out,
                &format!("encoder.{l}.self_attn"),
                &mut layer.self_attn,
            );
            push_norm(
                &mut out,
                &format!("encoder.{l}.ffn_norm"),
                &mut layer.ffn_norm,
            );
            push_ffn(&mut out, &format!("encoder.{l}.ffn"), &mut layer.ffn);
        }
        if let Some(norm) = self.encoder_norm.as_mut() {
            push_norm(&mut out, "encoder_norm", norm);
        }
        for (l, layer) in self.decoder.iter_mut().enumerate() {
            push_norm(
                &mut out,
                &format!("decoder.{l}.self_norm"),
                &mut layer.self_norm,
            );
            push_attention(
                &mut out,
                &format!("decoder.{l}.self_attn"),
                &mut layer.self_attn,
            );
            if let Some(cross) = layer.cross.as_mut() {
                push_norm(
                    &mut out,
                    &format!("decoder.{l}.cross_norm"),
                    &mut cross.norm,
                );
                push_attention(
                    &mut out,
                    &format!("decoder.{l}.cross_attn"),
                    &mut cross.attn,
                );
            }
            push_norm(
                &mut out,
                &format!("decoder.{l}.ffn_norm"),
                &mut layer.ffn_norm,
            );
            push_ffn(&mut out, &format!("decoder.{l}.ffn"), &mut layer.ffn);
        }
        push_norm(&mut out, "decoder_norm", &mut self.decoder_norm);
        out
    }

    /// Names and shapes of every parameter tensor in traversal order.
    pub fn tensor_layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let mut skeleton = Model::<T>::skeleton(config)?;
        Ok(skeleton
            .named_tensors_mut()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec()))
            .collect())
    }

    pub fn parameter_count(&self) -> usize {
        let mut sum = self.token_embedding.len() + self.position_embedding.len();
        let attn = |p: &AttentionParams<T>| p.tensors().iter().map(|t| t.len()).sum::<usize>();
        let norm = |n: &LayerNorm<T>| n.gain.len() + n.shift.len();
        let ffn = |f: &FeedForward<T>| f.w1.len() + f.b1.len() + f.w2.len() + f.b2.len();
        for layer in &self.encoder {
            sum += norm(&layer.attn_norm)
                + attn(&layer.self_attn)
                + norm(&layer.ffn_norm)
                + ffn(&layer.ffn);
        }
        sum += self.encoder_norm.as_ref().map_or(0, norm);
        for layer in &self.decoder {
            sum += norm(&layer.self_norm)
                + attn(&layer.self_attn)
                + norm(&layer.ffn_norm)
                + ffn(&layer.ffn);
            if let Some(c) = &layer.cross {
                sum += norm(&c.norm) + attn(&c.attn);
            }
        }
        sum + norm(&self.decoder_norm)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayer {
                    attn_norm: l.attn_norm.cast(),
                    self_attn: l.self_attn.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    ffn: l.ffn.cast(),
                })
                .collect(),
            encoder_norm: self.encoder_norm.as_ref().map(LayerNorm::cast),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    self_norm: l.self_norm.cast(),
                    self_attn: l.self_attn.cast(),
                    cross: l.cross.as_ref().map(|c| CrossAttention {
                        norm: c.norm.cast(),
                        attn: c.attn.cast(),
                    }),
                    ffn_norm: l.ffn_norm.cast(),
                    ffn: l.ffn.cast(),
                })
                .collect(),
            decoder_norm: self.decoder_norm.cast(),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(ModelError::Input(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings for `tokens` placed at `start..`.
    fn embed(&self, tokens: &[u32], start: usize) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        let end = start + tokens.len();
        if end > self.config.max_positions {
            return Err(ModelError::Length {
                len: end,
                max: self.config.max_positions,
            });
        }
        let d_m = self.config.d_m;
        let mut data = Vec::with_capacity(tokens.len() * d_m);
        for (i, &tok) in tokens.iter().enumerate() {
            let e = self.token_embedding.row(tok as usize);
            let p = self.position_embedding.row(start + i);
            data.extend(e.iter().zip(p).map(|(&a, &b)| a + b));
        }
        Ok(Tensor::new(vec![tokens.len(), d_m], data)?)
    }

    /// Tied output projection of the final layer-norm output.
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(matmul_nt(
            &self.decoder_norm.forward(x)?,
            &self.token_embedding,
        )?)
    }

    /// Encoder output for `tokens`.
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let norm = self
            .encoder_norm
            .as_ref()
            .ok_or_else(|| ModelError::Mode("encode requires an encoder-decoder model".into()))?;
        if tokens.is_empty() {
            return Err(ModelError::Input("encoder input is empty".into()));
        }
        let mut x = self.embed(tokens, 0)?;
        for layer in &self.encoder {
            let a = layer.attn_norm.forward(&x)?;
            x = x.add(&multi_head_attention(&a, &a, &layer.self_attn)?)?;
            x = x.add(&layer.ffn.forward(&layer.ffn_norm.forward(&x)?)?)?;
        }
        norm.forward(&x)
    }

    /// Non-incremental decoder forward of an encoder-decoder model over the
    /// whole decoder sequence `tokens`, returning logits for every position.
    pub fn decode_full(&self, encoder_out: &Tensor<T>, tokens: &[u32]) -> Result<Tensor<T>> {
        if self.config.architecture != Architecture::EncoderDecoder {
            return Err(ModelError::Mode(
                "decode_full requires an encoder-decoder model".into(),
            ));
        }
        let mut x = self.embed(tokens, 0)?;
        for layer in &self.decoder {
            let a = layer.self_norm.forward(&x)?;
            x = x.add(&causal_multi_head_attention(&a, &layer.self_attn)?)?;
            let cross = layer.cross.as_ref().expect("encoder-decoder layer");
            let c = cross.norm.forward(&x)?;
            x = x.add(&multi_head_attention(&c, encoder_out, &cross.attn)?)?;
            x = x.add(&layer.ffn.forward(&layer.ffn_norm.forward(&x)?)?)?;
        }
        self.logits(&x)
    }

    /// Non-incremental causal forward of a decoder-only model. Returns logits
    /// for every position and the per-layer self-attention inputs.
    fn causal_forward(&self, tokens: &[u32]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if self.config.architecture != Architecture::DecoderOnly {
            return Err(ModelError::Mode(
                "causal forward requires a decoder-only model".into(),
            ));
        }
        let mut x = self.embed(tokens, 0)?;
        let mut inputs = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let a = layer.self_norm.forward(&x)?;
            x = x.add(&causal_multi_head_attention(&a, &layer.self_attn)?)?;
            inputs.push(a);
            x = x.add(&layer.ffn.forward(&layer.ffn_norm.forward(&x)?)?)?;
        }
        Ok((self.logits(&x)?, inputs))
    }

    /// Logits for every position of a decoder-only sequence.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        Ok(self.causal_forward(tokens)?.0)
    }

    /// Prepare decoding state for `lanes` beam lanes.
    pub fn init_decoder_state(
        &self,
        input: DecoderInput<'_, T>,
        mode: AttentionMode,
        lanes: usize,
    ) -> Result<DecoderState<T>> {
        if lanes < 1 {
            return Err(ModelError::Parameter("beams must be >= 1".into()));
        }
        let layers = self.decoder.len();
        let (h, d_k, d_m) = (self.config.h, self.config.d_k, self.config.d_m);
        let empty_lane = || Lane {
            tokens: Vec::new(),
            self_kv: (0..layers).map(|_| KvCache::new(h, d_k)).collect(),
            cross_kv: Vec::new(),
        };
        match (self.config.architecture, input) {
            (Architecture::EncoderDecoder, DecoderInput::Encoded(enc)) => {
                if enc.shape().len() != 2 || enc.cols() != d_m || enc.rows() == 0 {
                    return Err(ModelError::Input(format!(
                        "encoder output has shape {:?}, expected [n >= 1, {d_m}]",
                        enc.shape()
                    )));
                }
                let mut lane = empty_lane();
                let shared = match mode {
                    AttentionMode::MhaCached => {
                        lane.cross_kv = self
                            .decoder
                            .iter()
                            .map(|l| {
                                let cross = l.cross.as_ref().expect("encoder-decoder layer");
                                KvCache::from_hidden(enc, &cross.attn)
                            })
                            .collect::<std::result::Result<_, _>>()?;
                        SharedInput::None
                    }
                    AttentionMode::El | AttentionMode::MhaNoCache => {
                        SharedInput::Encoder(Arc::new(HiddenCache::new(enc.clone())))
                    }
                };
                Ok(DecoderState {
                    mode,
                    architecture: Architecture::EncoderDecoder,
                    input_len: enc.rows(),
                    steps: 0,
                    shared,
                    lanes: vec![lane; lanes],
                })
            }
            (Architecture::DecoderOnly, DecoderInput::Prefix(prefix)) => {
                if prefix.is_empty() {
                    return Err(ModelError::Input(
                        "decoder-only prefix must be non-empty".into(),
                    ));
                }
                let mut lane = empty_lane();
                let shared = match mode {
                    AttentionMode::MhaNoCache => {
                        self.check_tokens(prefix)?;
                        if prefix.len() > self.config.max_positions {
                            return Err(ModelError::Length {
                                len: prefix.len(),
                                max: self.config.max_positions,
                            });
                        }
                        SharedInput::PrefixTokens(Arc::new(prefix.to_vec()))
                    }
                    AttentionMode::El => {
                        let (_, inputs) = self.causal_forward(prefix)?;
                        SharedInput::Prefix(Arc::new(
                            inputs.into_iter().map(HiddenCache::new).collect(),
                        ))
                    }
                    AttentionMode::MhaCached => {
                        let (_, inputs) = self.causal_forward(prefix)?;
                        lane.self_kv = inputs
                            .iter()
                            .zip(&self.decoder)
                            .map(|(a, l)| KvCache::from_hidden(a, &l.self_attn))
                            .collect::<std::result::Result<_, _>>()?;
                        SharedInput::None
                    }
                };
                Ok(DecoderState {
                    mode,
                    architecture: Architecture::DecoderOnly,
                    input_len: prefix.len(),
                    steps: 0,
                    shared,
                    lanes: vec![lane; lanes],
                })
            }
            (arch, _) => Err(ModelError::Mode(format!(
                "{arch} model given the wrong kind of decoder input"
            ))),
        }
    }

    /// Feed one token per lane and return next-token logits `[lanes x vocab]`.
    pub fn decoder_step(
        &self,
        state: &mut DecoderState<T>,
        tokens: &[u32],
        mode: AttentionMode,
    ) -> Result<Tensor<T>> {
        if state.mode != mode {
            return Err(ModelError::State(format!(
                "state was initialized for {} but step requested {mode}",
                state.mode
            )));
        }
        if state.architecture != self.config.architecture {
            return Err(ModelError::State(
                "state belongs to a different architecture".into(),
            ));
        }
        if state.lanes.first().map(|l| l.self_kv.len()) != Some(self.decoder.len()) {
            return Err(ModelError::State(
                "state layer count does not match the model".into(),
            ));
        }
        if tokens.len() != state.lanes.len() {
            return Err(ModelError::State(format!(
                "{} tokens for {} lanes",
                tokens.len(),
                state.lanes.len()
            )));
        }
        self.check_tokens(tokens)?;
        let position = state.next_position();
        if position >= self.config.max_positions {
            return Err(ModelError::Length {
                len: position + 1,
                max: self.config.max_positions,
            });
        }
        let logits = match mode {
            AttentionMode::MhaNoCache => self.step_recompute(state, tokens)?,
            AttentionMode::MhaCached | AttentionMode::El => {
                self.step_cached(state, tokens, position)?
            }
        };
        for (lane, &tok) in state.lanes.iter_mut().zip(tokens) {
            lane.tokens.push(tok);
        }
        state.steps += 1;
        Ok(logits)
    }

    fn step_recompute(&self, state: &DecoderState<T>, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut rows = Vec::with_capacity(tokens.len() * self.config.vocab);
        for (lane, &tok) in state.lanes.iter().zip(tokens) {
            let logits = match &state.shared {
                SharedInput::Encoder(enc) => {
                    let mut seq = lane.tokens.clone();
                    seq.push(tok);
                    self.decode_full(enc.hidden(), &seq)?
                }
                SharedInput::PrefixTokens(prefix) => {
                    let mut seq = prefix.as_ref().clone();
                    seq.extend_from_slice(&lane.tokens);
                    seq.push(tok);
                    self.forward_full(&seq)?
                }
                _ => return Err(ModelError::State("recompute state lost its input".into())),
            };
            rows.extend_from_slice(logits.row(logits.rows() - 1));
        }
        Ok(Tensor::new(vec![tokens.len(), self.config.vocab], rows)?)
    }

    fn step_cached(
        &self,
        state: &mut DecoderState<T>,
        tokens: &[u32],
        position: usize,
    ) -> Result<Tensor<T>> {
        let lanes = tokens.len();
        let mut rows = Vec::with_capacity(lanes * self.config.d_m);
        for &tok in tokens {
            rows.extend_from_slice(self.embed(&[tok], position)?.data());
        }
        let mut x = Tensor::new(vec![lanes, self.config.d_m], rows)?;
        for (l, layer) in self.decoder.iter().enumerate() {
            let a = layer.self_norm.forward(&x)?;
            let mut att = Vec::with_capacity(x.len());
            for (r, lane) in state.lanes.iter_mut().enumerate() {
                let q = a.slice_rows(r, r + 1)?;
                let out = match &state.shared {
                    SharedInput::Prefix(prefix) => {
                        lane.self_kv[l].append(&q, &layer.self_attn)?;
                        mixed_self_attention(&q, &prefix[l], &lane.self_kv[l], &layer.self_attn)?
                    }
                    _ => mha_incremental_step(&q, &q, &mut lane.self_kv[l], &layer.self_attn)?,
                };
                att.extend_from_slice(out.data());
            }
            x = x.add(&Tensor::new(x.shape().to_vec(), att)?)?;

            if let Some(cross) = &layer.cross {
                let c = cross.norm.forward(&x)?;
                let out = match &state.shared {
                    SharedInput::Encoder(enc) => el_attention_rows(&c, enc.hidden(), &cross.attn)?,
                    _ => {
                        let mut out = Vec::with_capacity(x.len());
                        for (r, lane) in state.lanes.iter().enumerate() {
                            let q = c.slice_rows(r, r + 1)?;
                            out.extend_from_slice(
                                mha_over_cache(&q, &lane.cross_kv[l], &cross.attn)?.data(),
                            );
                        }
                        Tensor::new(x.shape().to_vec(), out)?
                    }
                };
                x = x.add(&out)?;
            }
            x = x.add(&layer.ffn.forward(&layer.ffn_norm.forward(&x)?)?)?;
        }
        self.logits(&x)
    }
}

impl Model<f64> {
    /// Build a model with every weight drawn from `U[-0.1, 0.1)` in traversal
    /// order from a generator seeded with `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let mut rng = Rng::new(config.seed);
        for (_, t) in model.named_tensors_mut() {
            *t = seeded_uniform(t.shape(), &mut rng, INIT_RANGE.0, INIT_RANGE.1)?;
        }
        Ok(model)
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header =
            serde_json::to_vec(&self.config).map_err(|e| ModelError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + header.len() + self.parameter_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut copy = self.clone();
        for (_, t) in copy.named_tensors_mut() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |at: usize, what: &str| -> Result<[u8; 4]> {
            bytes
                .get(at..at + 4)
                .map(|b| b.try_into().expect("4 bytes"))
                .ok_or_else(|| ModelError::Truncated(what.to_string()))
        };
        let magic = word(0, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(word(4, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(version));
        }
        let header_len = u32::from_le_bytes(word(8, "header length")?) as usize;
        let header = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| ModelError::Truncated("header".into()))?;
        let config: ModelConfig =
            serde_json::from_slice(header).map_err(|e| ModelError::Header(e.to_string()))?;
        let payload = &bytes[12 + header_len..];
        // a ragged tail means the file was cut; a whole number of values that
        // disagrees with the header means the header describes other shapes
        if !payload.len().is_multiple_of(8) {
            return Err(ModelError::Truncated("tensor payload".into()));
        }
        let mut model = Self::skeleton(&config)?;
        let expected: usize = model.parameter_count();
        let available = payload.len() / 8;
        let mut offset = 0;
        let tensors = model.named_tensors_mut();
        let last_name = tensors.last().map(|(n, _)| n.clone()).unwrap_or_default();
        for (name, t) in tensors {
            let count = t.len();
            if offset + count > available {
                return Err(ModelError::ShapeMismatch { tensor: name });
            }
            let values: Vec<f64> = payload[offset * 8..(offset + count) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *t = Tensor::new(t.shape().to_vec(), values)?;
            offset += count;
        }
        if available != expected {
            return Err(ModelError::ShapeMismatch { tensor: last_name });
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

/// What the decoder attends to besides its own output.
#[derive(Debug, Clone, Copy)]
pub enum DecoderInput<'a, T = f64> {
    /// Encoder output of an encoder-decoder model.
    Encoded(&'a Tensor<T>),
    /// Prefix token ids of a decoder-only model.
    Prefix(&'a [u32]),
}

#[derive(Debug, Clone)]
enum SharedInput<T> {
    /// Encoder output kept once for all layers and lanes.
    Encoder(Arc<HiddenCache<T>>),
    /// Per-layer self-attention inputs over the prefix, shared by all lanes.
    Prefix(Arc<Vec<HiddenCache<T>>>),
    PrefixTokens(Arc<Vec<u32>>),
    None,
}

#[derive(Debug, Clone)]
struct Lane<T> {
    tokens: Vec<u32>,
    /// Per-layer self-attention cache. For decoder-only models in
    /// `MhaCached` mode it starts with the projected prefix.
    self_kv: Vec<KvCache<T>>,
    /// Per-layer cross-attention cache (`MhaCached`, encoder-decoder only).
    cross_kv: Vec<KvCache<T>>,
}

/// Generation-time state of one input with one or more beam lanes.
#[derive(Debug, Clone)]
pub struct DecoderState<T = f64> {
    mode: AttentionMode,
    architecture: Architecture,
    input_len: usize,
    steps: usize,
    shared: SharedInput<T>,
    lanes: Vec<Lane<T>>,
}

impl<T: Scalar> DecoderState<T> {
    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    pub fn lanes(&self) -> usize {
        self.lanes.len()
    }

    /// Decoder tokens fed so far in every lane.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lane_tokens(&self, lane: usize) -> &[u32] {
        &self.lanes[lane].tokens
    }

    fn next_position(&self) -> usize {
        match self.architecture {
            Architecture::EncoderDecoder => self.steps,
            Architecture::DecoderOnly => self.input_len + self.steps,
        }
    }

    /// Bytes held for the input: the shared encoder output or prefix hidden
    /// states, or every lane's projected input keys and values.
    pub fn input_state_bytes(&self) -> usize {
        let shared = match &self.shared {
            SharedInput::Encoder(enc) => enc.byte_size(),
            SharedInput::Prefix(layers) => layers.iter().map(HiddenCache::byte_size).sum(),
            SharedInput::PrefixTokens(_) | SharedInput::None => 0,
        };
        let per_lane: usize = self
            .lanes
            .iter()
            .map(|lane| {
                let cross: usize = lane.cross_kv.iter().map(KvCache::byte_size).sum();
                let prefix = if self.architecture == Architecture::DecoderOnly
                    && self.mode == AttentionMode::MhaCached
                {
                    lane.self_kv
                        .iter()
                        .map(|kv| 2 * kv.heads() * self.input_len * kv.keys(0).cols() * T::BYTES)
                        .sum()
                } else {
                    0
                };
                cross + prefix
            })
            .sum();
        shared + per_lane
    }

    /// Bytes of all cached state, input-related and generated.
    pub fn total_state_bytes(&self) -> usize {
        let shared = match &self.shared {
            SharedInput::Encoder(enc) => enc.byte_size(),
            SharedInput::Prefix(layers) => layers.iter().map(HiddenCache::byte_size).sum(),
            SharedInput::PrefixTokens(_) | SharedInput::None => 0,
        };
        shared
            + self
                .lanes
                .iter()
                .flat_map(|lane| lane.self_kv.iter().chain(&lane.cross_kv))
                .map(KvCache::byte_size)
                .sum::<usize>()
    }

    /// Rebuild the lane list from `indices` (lanes may repeat or disappear).
    /// Shared input state is never copied.
    pub fn select_lanes(&mut self, indices: &[usize]) -> Result<()> {
        if indices.is_empty() {
            return Err(ModelError::State("cannot drop every lane".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.lanes.len()) {
            return Err(ModelError::State(format!(
                "lane {bad} out of range for {} lanes",
                self.lanes.len()
            )));
        }
        self.lanes = indices.iter().map(|&i| self.lanes[i].clone()).collect();
        Ok(())
    }

    /// Whether two states hold the same shared input allocation.
    pub fn shares_input_with(&self, other: &Self) -> bool {
        match (&self.shared, &other.shared) {
            (SharedInput::Encoder(a), SharedInput::Encoder(b)) => Arc::ptr_eq(a, b),
            (SharedInput::Prefix(a), SharedInput::Prefix(b)) => Arc::ptr_eq(a, b),
            (SharedInput::PrefixTokens(a), SharedInput::PrefixTokens(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}
