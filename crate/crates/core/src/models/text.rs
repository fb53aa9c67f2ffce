//! Tiny post-LN transformer encoder with a mean pooler.
//!
//! Pad positions are masked out of attention (as keys) and out of the mean
//! pool, so a sentence's prediction does not depend on how much padding
//! follows it.

use super::image::{activate, dense};
use super::{Layer, ModelConfig, ParamRole, TextConfig, INPUT, LOGITS, LOSS, TARGET, TOKENS};
use crate::error::Result;
use crate::graph::{Graph, GraphBuilder, NodeId};
use crate::tensor::Tensor;

pub(super) const TOKEN_TABLE: &str = "embedding.token";
const POSITION_TABLE: &str = "embedding.position";
const LN_EPS: f64 = 1e-5;
/// Additive attention bias on pad keys: `[T]`, 0 for real tokens.
pub(super) const MASK_BIAS: &str = "mask_bias";
/// Mean-pool weights: `[1, T]`, uniform over real tokens.
pub(super) const POOL_WEIGHTS: &str = "pool_weights";
const MASKED: f64 = -1e4;

/// Attention and pooling inputs derived from which positions hold real
/// tokens. With no real token at all, every position counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TextMask {
    pub(super) bias: Tensor,
    pub(super) pool: Tensor,
}

impl TextMask {
    pub fn from_real(real: &[bool]) -> Self {
        let t = real.len();
        let n = real.iter().filter(|&&r| r).count();
        let (bias, pool) = if n == 0 {
            (vec![0.0; t], vec![1.0 / t as f64; t])
        } else {
            let bias = real.iter().map(|&r| if r { 0.0 } else { MASKED }).collect();
            let pool = real.iter().map(|&r| if r { 1.0 / n as f64 } else { 0.0 }).collect();
            (bias, pool)
        };
        Self {
            bias: Tensor::vector(bias),
            pool: Tensor::new(vec![1, t], pool).expect("t > 0"),
        }
    }

    pub fn from_tokens(tokens: &Tensor, pad_id: usize) -> Self {
        let real: Vec<bool> = tokens.data().iter().map(|&v| v as usize != pad_id).collect();
        Self::from_real(&real)
    }

    /// Every position treated as a real token.
    pub fn unmasked(t: usize) -> Self {
        Self::from_real(&vec![true; t])
    }
}

fn weight(fan_in: usize, fan_out: usize) -> ParamRole {
    ParamRole::Weight { fan_in, fan_out }
}

pub(super) fn layers(c: &TextConfig, classes: usize) -> Vec<Layer> {
    let (d, f) = (c.embed_dim, c.ff_dim);
    let mut out = Vec::new();
    let mut emb = Layer::new("embedding");
    emb.push("token", &[c.vocab_size, d], weight(c.vocab_size, d));
    emb.push("position", &[c.max_len, d], weight(c.max_len, d));
    out.push(emb);
    for k in 1..=c.layers {
        let mut l = Layer::new(format!("encoder.layer.{k}"));
        for proj in ["query", "key", "value", "attn_out"] {
            l.push(&format!("{proj}.weight"), &[d, d], weight(d, d));
            l.push(&format!("{proj}.bias"), &[d], ParamRole::Bias);
        }
        l.push("ln1.gain", &[d], ParamRole::Gain);
        l.push("ln1.shift", &[d], ParamRole::Bias);
        l.push("ff1.weight", &[d, f], weight(d, f));
        l.push("ff1.bias", &[f], ParamRole::Bias);
        l.push("ff2.weight", &[f, d], weight(f, d));
        l.push("ff2.bias", &[d], ParamRole::Bias);
        l.push("ln2.gain", &[d], ParamRole::Gain);
        l.push("ln2.shift", &[d], ParamRole::Bias);
        out.push(l);
    }
    let mut pooler = Layer::new("pooler");
    pooler.push("weight", &[d, d], weight(d, d));
    pooler.push("bias", &[d], ParamRole::Bias);
    out.push(pooler);
    let mut cls = Layer::new("classifier");
    cls.push("weight", &[d, classes], weight(d, classes));
    cls.push("bias", &[classes], ParamRole::Bias);
    out.push(cls);
    out
}

fn layer_norm(b: &mut GraphBuilder, x: NodeId, prefix: &str, d: usize) -> Result<NodeId> {
    let gain = b.param(&format!("{prefix}.gain"), &[d])?;
    let shift = b.param(&format!("{prefix}.shift"), &[d])?;
    b.layer_norm(x, gain, shift, LN_EPS)
}

fn encoder_block(
    b: &mut GraphBuilder,
    h: NodeId,
    mask: NodeId,
    name: &str,
    c: &TextConfig,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let (d, heads) = (c.embed_dim, c.heads);
    let dh = d / heads;
    let q = dense(b, h, &format!("{name}.query"), d, d)?;
    let k = dense(b, h, &format!("{name}.key"), d, d)?;
    let v = dense(b, h, &format!("{name}.value"), d, d)?;
    let mut per_head = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = b.slice(q, 1, i * dh, dh)?;
        let kh = b.slice(k, 1, i * dh, dh)?;
        let vh = b.slice(v, 1, i * dh, dh)?;
        let kt = b.transpose(kh)?;
        let scores = b.matmul(qh, kt)?;
        let scores = b.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = b.add_bias(scores, mask)?;
        let attn = b.softmax(scores)?;
        per_head.push(b.matmul(attn, vh)?);
    }
    let merged = b.concat(&per_head, 1)?;
    let attended = dense(b, merged, &format!("{name}.attn_out"), d, d)?;
    let res = b.add(h, attended)?;
    let h1 = layer_norm(b, res, &format!("{name}.ln1"), d)?;
    let ff = dense(b, h1, &format!("{name}.ff1"), d, c.ff_dim)?;
    let ff = activate(b, ff, cfg.activation)?;
    let ff = dense(b, ff, &format!("{name}.ff2"), c.ff_dim, d)?;
    let res = b.add(h1, ff)?;
    layer_norm(b, res, &format!("{name}.ln2"), d)
}

/// With `tokens = true` the graph starts from token ids (training and
/// prediction); otherwise from token embeddings (attribution domain).
pub(super) fn graph(c: &TextConfig, cfg: &ModelConfig, tokens: bool) -> Result<Graph> {
    let (t, d) = (c.max_len, c.embed_dim);
    let mut b = GraphBuilder::new();
    let embedded = if tokens {
        let ids = b.input(TOKENS, &[t])?;
        let table = b.param(TOKEN_TABLE, &[c.vocab_size, d])?;
        b.gather(table, ids)?
    } else {
        b.input(INPUT, &[t, d])?
    };
    let mask = b.input(MASK_BIAS, &[t])?;
    let pool = b.input(POOL_WEIGHTS, &[1, t])?;
    let pos = b.param(POSITION_TABLE, &[t, d])?;
    let mut h = b.add(embedded, pos)?;
    for k in 1..=c.layers {
        h = encoder_block(&mut b, h, mask, &format!("encoder.layer.{k}"), c, cfg)?;
    }
    let pooled = b.matmul(pool, h)?;
    let pooled = dense(&mut b, pooled, "pooler", d, d)?;
    let pooled = b.tanh(pooled);
    let out = dense(&mut b, pooled, "classifier", d, cfg.num_classes)?;
    let logits = b.reshape(out, &[cfg.num_classes])?;
    b.output(LOGITS, logits);
    if tokens {
        let target = b.input(TARGET, &[cfg.num_classes])?;
        let loss = b.cross_entropy(logits, target)?;
        b.output(LOSS, loss);
    }
    Ok(b.build())
}
