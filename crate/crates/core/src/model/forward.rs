use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::scalar::Scalar;
use crate::substrate::{Graph, Tensor, Var};
use crate::vocab;

use super::config::ModelConfig;
use super::params::{LayerParam, ParamVars, Params};

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`forward`] calls made on this thread so far.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(Cell::get)
}

/// Role of a sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Text,
    Image,
    LatentText,
    LatentVision,
    Rationale,
    Answer,
}

/// Content embeddings (positional embeddings are added inside [`forward`])
/// together with one tag per row.
#[derive(Clone, Debug)]
pub struct EmbeddedSeq {
    pub var: Var,
    pub tags: Vec<Tag>,
}

impl EmbeddedSeq {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Indices carrying `tag`, ascending.
    pub fn positions(&self, tag: Tag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `n_layers + 1` residual streams; entry 0 is the input with positions added.
    pub hidden: Vec<Var>,
    /// `[layer][head]` post-softmax attention, each `T x T`.
    pub attn: Vec<Vec<Var>>,
    pub logits: Var,
}

/// Materialized values of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<S> {
    pub hidden: Vec<Tensor<S>>,
    pub attn: Vec<Vec<Tensor<S>>>,
    pub logits: Tensor<S>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn from_graph(g: &Graph<S>, vars: &ForwardVars) -> Self {
        Self {
            hidden: vars.hidden.iter().map(|v| g.value(*v).clone()).collect(),
            attn: vars
                .attn
                .iter()
                .map(|heads| heads.iter().map(|v| g.value(*v).clone()).collect())
                .collect(),
            logits: g.value(vars.logits).clone(),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }

    /// Attention from `query` to `key`, summed over every layer and head.
    pub fn summed_attention(&self, query: usize, key: usize) -> f64 {
        self.attn
            .iter()
            .flatten()
            .map(|a| a.at(query, key).widen())
            .sum()
    }

    /// Row `query` of the layer- and head-summed attention.
    pub fn summed_attention_row(&self, query: usize) -> Vec<f64> {
        let t = self.seq_len();
        let mut row = vec![0.0; t];
        for a in self.attn.iter().flatten() {
            for (r, v) in row.iter_mut().zip(a.row(query)) {
                *r += v.widen();
            }
        }
        row
    }
}

/// Text embeddings for `tokens`.
pub fn embed_tokens<S: Scalar>(g: &mut Graph<S>, pv: &ParamVars, tokens: &[usize]) -> Result<Var> {
    g.embed_lookup(pv.tok_embed(), tokens)
}

/// `J` patch embeddings: digit table + marker table + patch-position table.
pub fn embed_patches<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    digits: &[usize],
    markers: &[usize],
) -> Result<Var> {
    if digits.len() != cfg.n_patches || markers.len() != cfg.n_patches {
        return Err(contract_err!(
            "image must have exactly {} patches, got {} digits / {} markers",
            cfg.n_patches,
            digits.len(),
            markers.len()
        ));
    }
    let d = g.embed_lookup(pv.patch_digit(), digits)?;
    let m = g.embed_lookup(pv.patch_marker(), markers)?;
    let dm = g.add(d, m)?;
    g.add(dm, pv.patch_pos())
}

/// `[question tokens][J patch embeddings]`, tagged text then image.
pub fn embed_inputs<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    question: &[usize],
    digits: &[usize],
    markers: &[usize],
) -> Result<EmbeddedSeq> {
    if question.is_empty() {
        return Err(contract_err!("question must contain at least one token"));
    }
    if let Some(t) = question.iter().find(|t| **t >= cfg.vocab_size) {
        return Err(contract_err!("token id {t} outside vocab of {}", cfg.vocab_size));
    }
    let needed = question.len() + cfg.n_patches;
    if needed > cfg.max_seq {
        return Err(Error::Capacity {
            needed,
            max_seq: cfg.max_seq,
        });
    }
    let text = embed_tokens(g, pv, question)?;
    let image = embed_patches(g, pv, cfg, digits, markers)?;
    let var = g.concat_rows(&[text, image])?;
    let mut tags = vec![Tag::Text; question.len()];
    tags.extend(std::iter::repeat_n(Tag::Image, cfg.n_patches));
    Ok(EmbeddedSeq { var, tags })
}

fn tag_numeric(layer: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("layer {layer}: {m}")),
        other => other,
    }
}

/// Causal pre-norm transformer over a `T x d_model` content sequence.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    seq: Var,
) -> Result<ForwardVars> {
    let shape = g.shape(seq).to_vec();
    let t = shape[0];
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(contract_err!("forward expects [T, {}], got {shape:?}", cfg.d_model));
    }
    if t == 0 || t > cfg.max_seq {
        return Err(Error::Capacity {
            needed: t,
            max_seq: cfg.max_seq,
        });
    }
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let pos = g.slice_rows(pv.pos_embed(), 0, t)?;
    let mut x = g.add(seq, pos)?;
    let mut hidden = vec![x];
    let mut attn = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |which| pv.layer(l, which);
        let block = (|| -> Result<(Var, Vec<Var>)> {
            let h = g.layer_norm(x, p(LayerParam::Ln1Gain), p(LayerParam::Ln1Bias))?;
            let qkv = g.matmul(h, p(LayerParam::Qkv))?;
            let qkv = g.add(qkv, p(LayerParam::QkvBias))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut outs = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let q = g.slice_cols(qkv, hd * dh, (hd + 1) * dh)?;
                let k = g.slice_cols(qkv, cfg.d_model + hd * dh, cfg.d_model + (hd + 1) * dh)?;
                let v = g.slice_cols(qkv, 2 * cfg.d_model + hd * dh, 2 * cfg.d_model + (hd + 1) * dh)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, inv_sqrt)?;
                let weights = g.causal_softmax_rows(scores)?;
                outs.push(g.matmul(weights, v)?);
                heads.push(weights);
            }
            let o = g.concat_cols(&outs)?;
            let o = g.matmul(o, p(LayerParam::Out))?;
            let o = g.add(o, p(LayerParam::OutBias))?;
            let x1 = g.add(x, o)?;
            let h2 = g.layer_norm(x1, p(LayerParam::Ln2Gain), p(LayerParam::Ln2Bias))?;
            let f = g.matmul(h2, p(LayerParam::Ff1))?;
            let f = g.add(f, p(LayerParam::Ff1Bias))?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p(LayerParam::Ff2))?;
            let f = g.add(f, p(LayerParam::Ff2Bias))?;
            Ok((g.add(x1, f)?, heads))
        })()
        .map_err(|e| tag_numeric(l, e))?;
        x = block.0;
        hidden.push(x);
        attn.push(block.1);
    }
    let fused = g
        .layer_norm(x, pv.final_gain(), pv.final_bias())
        .map_err(|e| tag_numeric(cfg.n_layers, e))?;
    let head_t = g.transpose(pv.head())?;
    let logits = g.matmul(fused, head_t)?;
    Ok(ForwardVars {
        hidden,
        attn,
        logits,
    })
}

/// Softmax of the final-position logits.
pub fn next_token_distribution<S: Scalar>(trace: &ForwardTrace<S>) -> Result<Vec<f64>> {
    let t = trace.seq_len();
    if t == 0 {
        return Err(contract_err!("empty trace"));
    }
    Ok(softmax(&trace.logits.row(t - 1).iter().map(|v| v.widen()).collect::<Vec<_>>()))
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Tokens emitted by [`greedy_decode`] and the forward passes spent on them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub passes: usize,
}

/// Greedy decoding from a content-embedding prefix until `<eos>` or `max_len` tokens.
pub fn greedy_decode<S: Scalar>(params: &Params<S>, prefix: &Tensor<S>, max_len: usize) -> Result<Decoded> {
    let cfg = params.config();
    if prefix.rows() + max_len > cfg.max_seq {
        return Err(Error::Capacity {
            needed: prefix.rows() + max_len,
            max_seq: cfg.max_seq,
        });
    }
    let mut seq = prefix.clone();
    let mut tokens = Vec::new();
    let mut passes = 0;
    while tokens.len() < max_len {
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let sv = g.constant(seq.clone());
        let out = forward(&mut g, &pv, cfg, sv)?;
        passes += 1;
        let logits = g.value(out.logits);
        let next = argmax(logits.row(logits.rows() - 1));
        tokens.push(next);
        if next == vocab::EOS {
            break;
        }
        let mut data = seq.into_data();
        data.extend_from_slice(params.tensor(0).row(next));
        seq = Tensor::new(vec![data.len() / cfg.d_model, cfg.d_model], data)?;
    }
    Ok(Decoded { tokens, passes })
}
