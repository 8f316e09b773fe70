//! Bias-free pre-norm transformer encoder with a tied MLM head.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, Rng};
use crate::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    /// Scale of the sinusoidal table; `None` means `1/sqrt(hidden_dim)`.
    #[serde(default)]
    pub position_scale: Option<f64>,
}

impl ModelConfig {
    /// Small encoder used for desk-scale runs.
    pub fn desk(layers: usize, hidden_dim: usize, heads: usize, vocab_size: usize) -> Self {
        ModelConfig {
            layers,
            hidden_dim,
            heads,
            ffn_dim: 4 * hidden_dim,
            max_seq_len: 128,
            vocab_size,
            dropout_rate: 0.0,
            position_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 || self.vocab_size == 0
        {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return bad(format!(
                "hidden_dim {} must be even for sinusoidal positions",
                self.hidden_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn position_scale(&self) -> f64 {
        self.position_scale
            .unwrap_or_else(|| 1.0 / (self.hidden_dim as f64).sqrt())
    }
}

/// Encoder dimensions that do not depend on the vocabulary or input length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            layers: 2,
            hidden_dim: 768,
            heads: 12,
            ffn_dim: 3072,
            dropout_rate: 0.0,
        }
    }
}

impl ModelShape {
    pub fn new(layers: usize, hidden_dim: usize, heads: usize) -> Self {
        ModelShape {
            layers,
            hidden_dim,
            heads,
            ffn_dim: 4 * hidden_dim,
            dropout_rate: 0.0,
        }
    }

    pub fn to_config(&self, vocab_size: usize, max_seq_len: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_seq_len,
            vocab_size,
            dropout_rate: self.dropout_rate,
            position_scale: None,
        }
    }
}

/// Sinusoidal table: `(p, 2i) = s*sin(p / 10000^(2i/dim))`, `(p, 2i+1)` uses cos.
pub fn sinusoidal_positions<T: Scalar>(seq_len: usize, dim: usize, scale: f64) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!("sinusoidal dimension {dim} must be even")));
    }
    let mut data = Vec::with_capacity(seq_len * dim);
    for p in 0..seq_len {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = p as f64 / freq;
            data.push(T::lit(scale * angle.sin()));
            data.push(T::lit(scale * angle.cos()));
        }
    }
    Tensor::from_vec(&[seq_len, dim], data)
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: ParamId,
    pub offset: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln_attn: NormIds,
    query: ParamId,
    key: ParamId,
    value: ParamId,
    out: ParamId,
    ln_ffn: NormIds,
    ffn_up: ParamId,
    ffn_down: ParamId,
}

/// Handles into a [`ParamStore`] for one encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: ModelConfig,
    prefix: String,
    tok_emb: ParamId,
    blocks: Vec<BlockIds>,
    final_ln: NormIds,
}

/// Per-forward outputs kept for inspection.
pub struct EncoderOutput {
    pub hidden: Var,
    /// Attention node of each layer, first to last.
    pub attention: Vec<Var>,
    pub input: Var,
}

pub(crate) fn init_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<NormIds> {
    let gain = store.insert(
        format!("{name}.gain"),
        ParamKind::NormGain,
        Tensor::full(&[dim], T::one()),
    )?;
    let offset = store.insert(format!("{name}.offset"), ParamKind::NormOffset, Tensor::zeros(&[dim]))?;
    Ok(NormIds { gain, offset })
}

pub(crate) fn bind_norm<T: Scalar>(store: &ParamStore<T>, name: &str, dim: usize) -> Result<NormIds> {
    Ok(NormIds {
        gain: store.expect(&format!("{name}.gain"), &[dim])?,
        offset: store.expect(&format!("{name}.offset"), &[dim])?,
    })
}

impl Encoder {
    /// Registers freshly initialized parameters under `prefix`.
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
        let linear = |store: &mut ParamStore<T>, name: String, shape: [usize; 2], rng: &mut Rng| {
            store.insert(name, ParamKind::Linear, normal_tensor(&shape, INIT_STD, rng))
        };
        let tok_emb = store.insert(
            format!("{prefix}tok_emb"),
            ParamKind::Embedding,
            normal_tensor(&[cfg.vocab_size, d], INIT_STD, rng),
        )?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{prefix}blocks.{l}");
            let ln_attn = init_norm(store, &format!("{p}.ln_attn"), d)?;
            let query = linear(store, format!("{p}.attn.query"), [d, d], rng)?;
            let key = linear(store, format!("{p}.attn.key"), [d, d], rng)?;
            let value = linear(store, format!("{p}.attn.value"), [d, d], rng)?;
            let out = linear(store, format!("{p}.attn.out"), [d, d], rng)?;
            let ln_ffn = init_norm(store, &format!("{p}.ln_ffn"), d)?;
            let ffn_up = linear(store, format!("{p}.ffn.up"), [d, f], rng)?;
            let ffn_down = linear(store, format!("{p}.ffn.down"), [f, d], rng)?;
            blocks.push(BlockIds {
                ln_attn,
                query,
                key,
                value,
                out,
                ln_ffn,
                ffn_up,
                ffn_down,
            });
        }
        let final_ln = init_norm(store, &format!("{prefix}final_ln"), d)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            prefix: prefix.to_string(),
            tok_emb,
            blocks,
            final_ln,
        })
    }

    /// Resolves an encoder whose parameters already live in `store`.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
        let tok_emb = store.expect(&format!("{prefix}tok_emb"), &[cfg.vocab_size, d])?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{prefix}blocks.{l}");
            blocks.push(BlockIds {
                ln_attn: bind_norm(store, &format!("{p}.ln_attn"), d)?,
                query: store.expect(&format!("{p}.attn.query"), &[d, d])?,
                key: store.expect(&format!("{p}.attn.key"), &[d, d])?,
                value: store.expect(&format!("{p}.attn.value"), &[d, d])?,
                out: store.expect(&format!("{p}.attn.out"), &[d, d])?,
                ln_ffn: bind_norm(store, &format!("{p}.ln_ffn"), d)?,
                ffn_up: store.expect(&format!("{p}.ffn.up"), &[d, f])?,
                ffn_down: store.expect(&format!("{p}.ffn.down"), &[f, d])?,
            });
        }
        let final_ln = bind_norm(store, &format!("{prefix}final_ln"), d)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            prefix: prefix.to_string(),
            tok_emb,
            blocks,
            final_ln,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Shape("empty id sequence".into()));
        }
        if ids.len() > self.cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence of {} exceeds max_seq_len {}",
                ids.len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embedding rows plus the positional table, as graph nodes.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, ids: &[usize]) -> Result<(Var, Var)> {
        self.check_ids(ids)?;
        let tok = g.gather_rows(bound.var(self.tok_emb), ids.to_vec());
        let pos = g.constant(sinusoidal_positions(
            ids.len(),
            self.cfg.hidden_dim,
            self.cfg.position_scale(),
        )?);
        Ok((tok, pos))
    }

    /// Runs the encoder. `extra_input`, when given, is added to the token
    /// and positional embeddings before the first block. `attention_mask`
    /// marks real (true) versus padding (false) positions.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        ids: &[usize],
        attention_mask: Option<&[bool]>,
        extra_input: Option<Var>,
        mut dropout: Option<&mut Rng>,
    ) -> Result<EncoderOutput> {
        if let Some(m) = attention_mask {
            if m.len() != ids.len() {
                return Err(Error::Shape(format!("mask of {} for {} ids", m.len(), ids.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Shape("attention mask hides every position".into()));
            }
        }
        let (tok, pos) = self.embed(g, bound, ids)?;
        let mut x = g.add(tok, pos);
        if let Some(extra) = extra_input {
            if g.value(extra).shape() != g.value(x).shape() {
                return Err(Error::Shape(format!(
                    "extra input {:?} does not match embeddings {:?}",
                    g.value(extra).shape(),
                    g.value(x).shape()
                )));
            }
            x = g.add(x, extra);
        }
        let input = x;
        let rate = self.cfg.dropout_rate;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = g.layer_norm(x, bound.var(b.ln_attn.gain), bound.var(b.ln_attn.offset));
            let q = g.matmul(h, bound.var(b.query));
            let k = g.matmul(h, bound.var(b.key));
            let v = g.matmul(h, bound.var(b.value));
            let a = g.attention(q, k, v, self.cfg.heads, attention_mask);
            attention.push(a);
            let mut a = g.matmul(a, bound.var(b.out));
            if let Some(rng) = dropout.as_deref_mut() {
                a = apply_dropout(g, a, rate, rng);
            }
            x = g.add(x, a);

            let h = g.layer_norm(x, bound.var(b.ln_ffn.gain), bound.var(b.ln_ffn.offset));
            let up = g.matmul(h, bound.var(b.ffn_up));
            let act = g.gelu(up);
            let mut f = g.matmul(act, bound.var(b.ffn_down));
            if let Some(rng) = dropout.as_deref_mut() {
                f = apply_dropout(g, f, rate, rng);
            }
            x = g.add(x, f);
        }
        let hidden = g.layer_norm(x, bound.var(self.final_ln.gain), bound.var(self.final_ln.offset));
        Ok(EncoderOutput {
            hidden,
            attention,
            input,
        })
    }

    /// Tied-embedding MLM logits, `hidden * tok_emb^T`.
    pub fn mlm_logits<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, hidden: Var) -> Var {
        g.matmul_t(hidden, bound.var(self.tok_emb))
    }
}

fn apply_dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut Rng) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = (0..g.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    g.mask_scale(x, mask)
}

/// Standalone forward returning the final hidden states.
pub fn encoder_forward<T: Scalar>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    ids: &[usize],
    attention_mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = encoder.forward(&mut g, &bound, ids, attention_mask, None, None)?;
    g.check_finite(0)?;
    Ok(g.value(out.hidden).clone())
}

/// `hidden * embedding^T` for a plain hidden-state tensor.
pub fn mlm_logits<T: Scalar>(encoder: &Encoder, store: &ParamStore<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
    let emb = store.get(encoder.token_embedding());
    if hidden.cols() != emb.cols() {
        return Err(Error::Shape(format!(
            "hidden width {} does not match embedding width {}",
            hidden.cols(),
            emb.cols()
        )));
    }
    Ok(hidden.matmul_t(emb))
}
