//! Progressive training: stage `n` replaces the first `n` rationale steps with
//! latent blocks and supervises only what remains.

mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{finish_latent_phase, LatentOptions, LatentState};
use crate::model::{embed_inputs, embed_tokens, forward, ParamVars, Params, Tag};
use crate::scalar::Scalar;
use crate::substrate::{Graph, Tensor, Var};
use crate::tasks::Sample;
use crate::vocab;

pub use optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub n_stages: usize,
    pub epochs_per_stage: usize,
    pub seed: u64,
    pub k: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            n_stages: 4,
            epochs_per_stage: 3,
            seed: 0,
            k: 4,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.n_stages == 0 {
            return fail("n_stages must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.grad_clip < 0.0 {
            return fail("eps must be positive and grad_clip non-negative");
        }
        Ok(())
    }
}

/// How rationales are used during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Explicit steps, progressively replaced by latent blocks.
    #[default]
    Rationale,
    /// Question straight to answer.
    AnswerOnly,
}

/// What stage `n` does with one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: usize,
    pub n_latent: usize,
    /// Indices of the rationale steps kept as explicit text.
    pub explicit_steps: Vec<usize>,
}

impl StagePlan {
    /// Short rationales saturate: they never get more latent slots than steps.
    pub fn for_sample(stage: usize, sample: &Sample, supervision: Supervision) -> Self {
        match supervision {
            Supervision::Rationale => {
                let n_latent = stage.min(sample.n_steps());
                Self {
                    stage,
                    n_latent,
                    explicit_steps: (n_latent..sample.n_steps()).collect(),
                }
            }
            Supervision::AnswerOnly => Self {
                stage,
                n_latent: 0,
                explicit_steps: Vec::new(),
            },
        }
    }
}

/// A staged training sequence before latent blocks are materialized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageExample {
    pub question: Vec<usize>,
    pub digits: Vec<usize>,
    pub markers: Vec<usize>,
    pub n_latent: usize,
    /// Explicit step tokens (each closed by `<step>`), answer tokens, `<eos>`.
    pub continuation: Vec<usize>,
    /// One tag per position of `question ⊕ image ⊕ slots ⊕ continuation`.
    pub tags: Vec<Tag>,
    /// True on the positions whose token is a training target.
    pub mask: Vec<bool>,
    pub latent_slots: Vec<usize>,
}

impl StageExample {
    pub fn prefix_len(&self) -> usize {
        self.question.len() + self.digits.len() + self.n_latent
    }

    pub fn n_supervised(&self) -> usize {
        self.continuation.len()
    }
}

pub fn build_stage_example(sample: &Sample, plan: &StagePlan) -> Result<StageExample> {
    if plan.n_latent > sample.n_steps() {
        return Err(Error::Staging(format!(
            "sample {} has {} steps, plan wants {} latent",
            sample.id,
            sample.n_steps(),
            plan.n_latent
        )));
    }
    if let Some(i) = plan.explicit_steps.iter().find(|i| **i >= sample.n_steps()) {
        return Err(Error::Staging(format!("sample {} has no step {i}", sample.id)));
    }
    let mut continuation = Vec::new();
    let mut cont_tags = Vec::new();
    for i in &plan.explicit_steps {
        continuation.extend(&sample.rationale_steps[*i]);
        continuation.push(vocab::STEP);
    }
    cont_tags.resize(continuation.len(), Tag::Rationale);
    continuation.extend(&sample.answer_tokens);
    continuation.push(vocab::EOS);
    cont_tags.resize(continuation.len(), Tag::Answer);

    let q = sample.question_tokens.len();
    let j = crate::vocab::GRID_CELLS;
    let mut tags = vec![Tag::Text; q];
    tags.extend(std::iter::repeat_n(Tag::Image, j));
    tags.extend(std::iter::repeat_n(Tag::LatentText, plan.n_latent));
    tags.extend(&cont_tags);
    let mask = tags.iter().map(|t| matches!(t, Tag::Rationale | Tag::Answer)).collect();
    Ok(StageExample {
        question: sample.question_tokens.clone(),
        digits: sample.grid.digit_codes(),
        markers: sample.grid.marker_codes(),
        n_latent: plan.n_latent,
        continuation,
        tags,
        mask,
        latent_slots: (q + j..q + j + plan.n_latent).collect(),
    })
}

/// Final-pass logits of one example and its `(row, target)` pairs.
#[derive(Clone, Debug)]
pub struct ExampleLogits {
    pub logits: Var,
    pub targets: Vec<(usize, usize)>,
    /// Tags of the full sequence after latent blocks were inserted.
    pub tags: Vec<Tag>,
}

/// Multipass latent phase followed by one teacher-forced forward over the whole sequence.
pub fn example_logits<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    params: &Params<S>,
    ex: &StageExample,
    opts: &LatentOptions,
) -> Result<ExampleLogits> {
    let cfg = params.config();
    let inputs = embed_inputs(g, pv, cfg, &ex.question, &ex.digits, &ex.markers)?;
    let mut state = LatentState::new(g, pv, inputs, ex.n_latent)?;
    finish_latent_phase(g, pv, params, &mut state, opts)?;
    let start = state.len();
    let cont = embed_tokens(g, pv, &ex.continuation)?;
    let full = g.concat_rows(&[state.seq, cont])?;
    let fv = forward(g, pv, cfg, full)?;
    let targets = ex
        .continuation
        .iter()
        .enumerate()
        .map(|(i, t)| (start + i - 1, *t))
        .collect();
    let mut tags = state.tags;
    tags.extend(&ex.tags[ex.prefix_len()..]);
    Ok(ExampleLogits {
        logits: fv.logits,
        targets,
        tags,
    })
}

/// Optional additive offset on an example's logits, given its index and final tags.
pub type LogitProbe<'a, S> = dyn FnMut(usize, &[Tag]) -> Option<Tensor<S>> + 'a;

/// Mean negative log-likelihood over every supervised position of the batch.
pub fn batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    params: &Params<S>,
    batch: &[StageExample],
    opts: &LatentOptions,
    mut probe: Option<&mut LogitProbe<'_, S>>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let denom: usize = batch.iter().map(StageExample::n_supervised).sum();
    let mut total = None;
    for (i, ex) in batch.iter().enumerate() {
        let out = example_logits(g, pv, params, ex, opts)?;
        let mut logits = out.logits;
        if let Some(offset) = probe.as_mut().and_then(|p| p(i, &out.tags)) {
            let c = g.constant(offset);
            logits = g.add(logits, c)?;
        }
        let nll = g.masked_nll(logits, &out.targets, denom as f64)?;
        total = Some(match total {
            None => nll,
            Some(t) => g.add(t, nll)?,
        });
    }
    Ok(total.unwrap())
}

/// Loss value of a batch, without gradients.
pub fn stage_loss<S: Scalar>(params: &Params<S>, batch: &[StageExample], opts: &LatentOptions) -> Result<f64> {
    stage_loss_probed(params, batch, opts, None)
}

pub fn stage_loss_probed<S: Scalar>(
    params: &Params<S>,
    batch: &[StageExample],
    opts: &LatentOptions,
    probe: Option<&mut LogitProbe<'_, S>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let loss = batch_loss(&mut g, &pv, params, batch, opts, probe)?;
    Ok(g.value(loss).item()?.widen())
}

/// Loss and one gradient tensor per parameter, in parameter order.
pub fn loss_and_grads<S: Scalar>(
    params: &Params<S>,
    batch: &[StageExample],
    opts: &LatentOptions,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, true);
    let loss = batch_loss(&mut g, &pv, params, batch, opts, None)?;
    let value = g.value(loss).item()?.widen();
    let grads = g.backward(loss)?;
    Ok((value, pv.all().iter().map(|v| grads.get(*v)).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub wallclock_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageLog {
    pub stage: usize,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + stage as u64);
    rng
}

/// Trains one stage in place. Shuffling depends only on `(seed, stage)`, so a
/// stage started from a saved checkpoint matches an uninterrupted run.
pub fn train_stage<S: Scalar>(
    params: &mut Params<S>,
    data: &[Sample],
    stage: usize,
    supervision: Supervision,
    cfg: &TrainConfig,
    opts: &LatentOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<StageLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let examples = data
        .iter()
        .map(|s| build_stage_example(s, &StagePlan::for_sample(stage, s, supervision)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stage_rng(cfg.seed, stage);
    let mut adam = Adam::new(cfg, params);
    let mut log = StageLog {
        stage,
        ..StageLog::default()
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs_per_stage {
        let clock = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<StageExample> = chunk.iter().map(|i| examples[*i].clone()).collect();
            let step = log.steps;
            let diverged = |detail: String| Error::Divergence { stage, step, detail };
            let (loss, grads) = loss_and_grads(params, &batch, opts).map_err(|e| match e {
                Error::Numeric(m) => diverged(m),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            adam.step(params, &grads)?;
            if !params.is_finite() {
                return Err(diverged("non-finite parameters after update".into()));
            }
            sum += loss;
            batches += 1;
            log.steps += 1;
        }
        let entry = EpochLog {
            stage,
            epoch,
            mean_loss: sum / batches as f64,
            wallclock_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        log::info!("stage {stage} epoch {epoch}: mean loss {:.4}", entry.mean_loss);
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Runs stages `first_stage..n_stages`, calling `on_stage` after each one
/// (typically to write a checkpoint).
pub fn train_curriculum<S: Scalar>(
    params: &mut Params<S>,
    data: &[Sample],
    supervision: Supervision,
    cfg: &TrainConfig,
    opts: &LatentOptions,
    first_stage: usize,
    mut on_epoch: impl FnMut(&EpochLog),
    mut on_stage: impl FnMut(usize, &Params<S>, &StageLog) -> Result<()>,
) -> Result<Vec<StageLog>> {
    cfg.validate()?;
    let mut logs = Vec::new();
    for stage in first_stage..cfg.n_stages {
        let log = train_stage(params, data, stage, supervision, cfg, opts, &mut on_epoch)?;
        on_stage(stage, params, &log)?;
        logs.push(log);
    }
    Ok(logs)
}
