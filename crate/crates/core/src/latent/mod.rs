//! Step-wise multimodal latent reasoning: hidden-state feedback plus
//! attention-selected image embeddings, inserted block by block.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::model::{embed_inputs, embed_tokens, forward, greedy_decode, EmbeddedSeq, ForwardTrace, ForwardVars, ParamVars, Params, Tag};
use crate::scalar::Scalar;
use crate::substrate::{Graph, Tensor, Var};
use crate::tasks::Sample;
use crate::vocab;

/// What a latent block is made of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Hidden state followed by `k` selected image embeddings.
    #[default]
    Full,
    /// The `k` selected image embeddings only.
    NoLatentText,
    /// The hidden state only.
    NoLatentVision,
    /// One `<latent>` token embedding; no forward pass is spent.
    NoLatentPart,
}

impl BlockKind {
    pub fn block_len(self, k: usize) -> usize {
        match self {
            BlockKind::Full => k + 1,
            BlockKind::NoLatentText => k,
            BlockKind::NoLatentVision | BlockKind::NoLatentPart => 1,
        }
    }

    fn selects(self) -> bool {
        matches!(self, BlockKind::Full | BlockKind::NoLatentText)
    }

    fn runs_forward(self) -> bool {
        self != BlockKind::NoLatentPart
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentOptions {
    pub k: usize,
    pub exclude_previous: bool,
    pub block: BlockKind,
    /// Keep the full forward trace of every latent step.
    pub capture_traces: bool,
}

impl Default for LatentOptions {
    fn default() -> Self {
        Self {
            k: 4,
            exclude_previous: true,
            block: BlockKind::Full,
            capture_traces: false,
        }
    }
}

impl LatentOptions {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }

    pub fn block_len(&self) -> usize {
        self.block.block_len(self.k)
    }
}

/// Top-`k` image positions by score, descending, ties to the lower index.
///
/// Positions in `excluded` rank after every fresh one, so they are only picked
/// once the fresh candidates run out and every block keeps its `k` rows.
pub fn select_top_k(scores: &[f64], image_positions: &[usize], k: usize, excluded: &[usize]) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Selection("k must be at least 1".into()));
    }
    if image_positions.is_empty() {
        return Err(Error::Selection("no image position to select from".into()));
    }
    if let Some(p) = image_positions.iter().find(|p| **p >= scores.len()) {
        return Err(Error::Selection(format!("image position {p} beyond the {} scored keys", scores.len())));
    }
    let rank = |mut v: Vec<usize>| {
        v.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
        v
    };
    let (used, fresh): (Vec<usize>, Vec<usize>) = image_positions.iter().partition(|p| excluded.contains(p));
    let mut out = rank(fresh);
    if out.len() < k {
        out.extend(rank(used));
    }
    out.truncate(k);
    Ok(out)
}

/// Selection driven by the final query row of `trace`, summed over layers and heads.
pub fn select_latent_vision<S: Scalar>(
    trace: &ForwardTrace<S>,
    image_positions: &[usize],
    k: usize,
    excluded: &[usize],
) -> Result<Vec<usize>> {
    let t = trace.seq_len();
    if t == 0 {
        return Err(Error::Selection("empty trace".into()));
    }
    select_top_k(&trace.summed_attention_row(t - 1), image_positions, k, excluded)
}

fn summed_row<S: Scalar>(g: &Graph<S>, fv: &ForwardVars, q: usize) -> Vec<f64> {
    let mut row = vec![0.0; q + 1];
    for v in fv.attn.iter().flatten() {
        for (r, a) in row.iter_mut().zip(g.value(*v).row(q)) {
            *r += a.widen();
        }
    }
    row
}

/// The growing latent sequence with its bookkeeping.
#[derive(Clone, Debug)]
pub struct LatentState<S> {
    pub seq: Var,
    pub tags: Vec<Tag>,
    /// Insertion points `l_1..l_N`.
    pub latent_positions: Vec<usize>,
    pub step_index: usize,
    pub selected_sets: Vec<Vec<usize>>,
    pub image_positions: Vec<usize>,
    /// Length before any block was inserted, placeholders included.
    pub base_len: usize,
    /// Query row of each step (the position whose hidden state became latent text).
    pub query_rows: Vec<usize>,
    /// Layer- and head-summed attention row at each step's query.
    pub attention_rows: Vec<Vec<f64>>,
    pub traces: Vec<ForwardTrace<S>>,
    pub forward_passes: usize,
}

impl<S: Scalar> LatentState<S> {
    /// Appends `n_latent` `<latent>` placeholders after the question and image.
    pub fn new(g: &mut Graph<S>, pv: &ParamVars, inputs: EmbeddedSeq, n_latent: usize) -> Result<Self> {
        let image_positions = inputs.positions(Tag::Image);
        let base0 = inputs.len();
        let (seq, mut tags) = (inputs.var, inputs.tags);
        let seq = if n_latent > 0 {
            let slots = embed_tokens(g, pv, &vec![vocab::LATENT; n_latent])?;
            g.concat_rows(&[seq, slots])?
        } else {
            seq
        };
        tags.extend(std::iter::repeat_n(Tag::LatentText, n_latent));
        Ok(Self {
            seq,
            tags,
            latent_positions: (base0..base0 + n_latent).collect(),
            step_index: 0,
            selected_sets: Vec::new(),
            image_positions,
            base_len: base0 + n_latent,
            query_rows: Vec::new(),
            attention_rows: Vec::new(),
            traces: Vec::new(),
            forward_passes: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn n_latent(&self) -> usize {
        self.latent_positions.len()
    }

    pub fn is_done(&self) -> bool {
        self.step_index == self.n_latent()
    }

    fn excluded(&self) -> Vec<usize> {
        self.selected_sets.iter().flatten().copied().collect()
    }
}

/// One latent step: forward over the prefix before `l_i`, build the block and
/// insert it at `l_i`, shifting every later insertion point by the block length.
pub fn latent_step<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    params: &Params<S>,
    state: &mut LatentState<S>,
    opts: &LatentOptions,
) -> Result<()> {
    let cfg = params.config();
    let i = state.step_index;
    if i >= state.n_latent() {
        return Err(contract_err!("all {} latent steps already taken", state.n_latent()));
    }
    let width = opts.block_len();
    if opts.block.selects() && opts.k == 0 {
        return Err(Error::Selection("k must be at least 1".into()));
    }
    let needed = state.len() + width;
    if needed > cfg.max_seq {
        return Err(Error::Capacity {
            needed,
            max_seq: cfg.max_seq,
        });
    }
    let l = state.latent_positions[i];
    let len = state.len();

    let (block, block_tags, selected) = if opts.block.runs_forward() {
        let prefix = g.slice_rows(state.seq, 0, l)?;
        let fv = forward(g, pv, cfg, prefix)?;
        state.forward_passes += 1;
        let q = l - 1;
        let row = summed_row(g, &fv, q);
        if opts.capture_traces {
            state.traces.push(ForwardTrace::from_graph(g, &fv));
        }
        let selected = if opts.block.selects() {
            let excluded = if opts.exclude_previous { state.excluded() } else { Vec::new() };
            select_top_k(&row, &state.image_positions, opts.k, &excluded)?
        } else {
            Vec::new()
        };
        state.query_rows.push(q);
        state.attention_rows.push(row);
        let mut parts = Vec::new();
        let mut tags = Vec::new();
        if opts.block != BlockKind::NoLatentText {
            parts.push(g.slice_rows(fv.hidden[cfg.n_layers], q, l)?);
            tags.push(Tag::LatentText);
        }
        if !selected.is_empty() {
            parts.push(g.gather_rows(state.seq, &selected)?);
            tags.extend(std::iter::repeat_n(Tag::LatentVision, selected.len()));
        }
        (g.concat_rows(&parts)?, tags, selected)
    } else {
        (embed_tokens(g, pv, &[vocab::LATENT])?, vec![Tag::LatentText], Vec::new())
    };

    let inserted = block_tags.len();
    let mut parts = vec![];
    if l > 0 {
        parts.push(g.slice_rows(state.seq, 0, l)?);
    }
    parts.push(block);
    if l < len {
        parts.push(g.slice_rows(state.seq, l, len)?);
    }
    state.seq = g.concat_rows(&parts)?;
    state.tags.splice(l..l, block_tags);
    for later in &mut state.latent_positions[i + 1..] {
        *later += inserted;
    }
    state.selected_sets.push(selected);
    state.step_index += 1;
    Ok(())
}

/// Runs every remaining latent step of `state`.
pub fn finish_latent_phase<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    params: &Params<S>,
    state: &mut LatentState<S>,
    opts: &LatentOptions,
) -> Result<()> {
    while !state.is_done() {
        latent_step(g, pv, params, state, opts)?;
    }
    Ok(())
}

/// Embeds `sample`, appends `n_latent` placeholders and runs all latent steps in `g`.
pub fn run_latent_phase_in<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    params: &Params<S>,
    sample: &Sample,
    n_latent: usize,
    opts: &LatentOptions,
) -> Result<LatentState<S>> {
    let cfg = params.config();
    let inputs = embed_inputs(
        g,
        pv,
        cfg,
        &sample.question_tokens,
        &sample.grid.digit_codes(),
        &sample.grid.marker_codes(),
    )?;
    let mut state = LatentState::new(g, pv, inputs, n_latent)?;
    finish_latent_phase(g, pv, params, &mut state, opts)?;
    Ok(state)
}

/// Latent phase without gradients; returns the final state and its sequence values.
pub fn run_latent_phase<S: Scalar>(
    sample: &Sample,
    params: &Params<S>,
    n_latent: usize,
    opts: &LatentOptions,
) -> Result<(LatentState<S>, Tensor<S>)> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let state = run_latent_phase_in(&mut g, &pv, params, sample, n_latent, opts)?;
    let seq = g.value(state.seq).clone();
    Ok((state, seq))
}

/// Everything observed while answering one sample.
#[derive(Clone, Debug)]
pub struct RunRecord<S> {
    pub sample_id: u64,
    pub n_latent: usize,
    pub tokens: Vec<usize>,
    pub latent_passes: usize,
    pub decode_passes: usize,
    pub latency_ms: f64,
    pub state: LatentState<S>,
}

/// AR steps: one per latent step plus one per emitted token.
pub fn count_ar_steps<S>(record: &RunRecord<S>) -> usize {
    ar_steps(record.n_latent, record.tokens.len())
}

pub fn ar_steps(n_latent: usize, n_emitted: usize) -> usize {
    n_latent + n_emitted
}

/// Latent phase followed by greedy decoding of any remaining explicit steps and the answer.
pub fn infer<S: Scalar>(
    sample: &Sample,
    params: &Params<S>,
    n_latent: usize,
    opts: &LatentOptions,
    max_answer_len: usize,
) -> Result<RunRecord<S>> {
    let start = Instant::now();
    let (state, seq) = run_latent_phase(sample, params, n_latent, opts)?;
    let budget = max_answer_len.min(params.config().max_seq.saturating_sub(seq.rows()));
    let decoded = greedy_decode(params, &seq, budget)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(RunRecord {
        sample_id: sample.id,
        n_latent,
        tokens: decoded.tokens,
        latent_passes: state.forward_passes,
        decode_passes: decoded.passes,
        latency_ms,
        state,
    })
}

/// Tokens after the last `<step>`, with `<eos>` and padding removed.
pub fn extract_answer(tokens: &[usize]) -> Vec<usize> {
    let from = tokens.iter().rposition(|t| *t == vocab::STEP).map_or(0, |p| p + 1);
    tokens[from..]
        .iter()
        .copied()
        .take_while(|t| *t != vocab::EOS)
        .filter(|t| *t != vocab::PAD)
        .collect()
}

#[cfg(test)]
mod tests;
