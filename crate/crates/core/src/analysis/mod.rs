//! Accuracy, efficiency and attention diagnostics, ablations and sweeps.

mod metrics;

use serde::{Deserialize, Serialize};

use crate::curriculum::{train_curriculum, StageLog, Supervision, TrainConfig};
use crate::error::{contract_err, Result};
use crate::latent::{count_ar_steps, extract_answer, infer, BlockKind, LatentOptions, RunRecord};
use crate::model::{ModelConfig, Params, Tag};
use crate::scalar::Scalar;
use crate::tasks::Sample;

pub use metrics::{attention_focus, attention_ratio, exact_match_accuracy, focus_of_row, ratio_of_row, spearman, FOCUS_EPS};

/// Longest decode allowed after the latent phase.
pub const MAX_ANSWER_LEN: usize = 32;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub ar_steps_mean: f64,
    pub latency_ms_mean: f64,
    pub per_step_ratio: Vec<f64>,
    pub per_step_focus: Vec<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub ratio: f64,
    pub focus: f64,
}

/// Per-sample outcome of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: u64,
    pub n_latent: usize,
    pub tokens: Vec<usize>,
    pub correct: bool,
    pub ar_steps: usize,
    pub latency_ms: f64,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Attention ratio and focus of every latent step of `record`.
///
/// Step `i` uses the query row that produced its latent text; the ratio puts
/// that step's selected image positions over the question text and the latent
/// text positions before the query, and the focus is taken over every key the
/// query can see. Steps that ran no forward pass (`no_latent_part`) have no
/// attention and are skipped.
pub fn attention_trajectory<S>(record: &RunRecord<S>) -> Result<Vec<TrajectoryPoint>> {
    let st = &record.state;
    (0..st.query_rows.len())
        .map(|i| {
            let q = st.query_rows[i];
            let row = &st.attention_rows[i];
            let text: Vec<usize> = (0..=q)
                .filter(|p| matches!(st.tags[*p], Tag::Text | Tag::LatentText))
                .collect();
            let all: Vec<usize> = (0..=q).collect();
            Ok(TrajectoryPoint {
                step: i + 1,
                ratio: ratio_of_row(row, &st.selected_sets[i], &text)?,
                focus: focus_of_row(row, &all)?,
            })
        })
        .collect()
}

/// Greedy evaluation with `n_latent` latent steps (capped per sample at its step count).
pub fn evaluate<S: Scalar>(
    params: &Params<S>,
    samples: &[Sample],
    n_latent: usize,
    opts: &LatentOptions,
) -> Result<(RunMetrics, Vec<SampleResult>)> {
    if samples.is_empty() {
        return Err(contract_err!("nothing to evaluate"));
    }
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        let n = n_latent.min(s.n_steps());
        let rec = infer(s, params, n, opts, MAX_ANSWER_LEN)?;
        let trajectory = attention_trajectory(&rec)?;
        results.push(SampleResult {
            id: s.id,
            n_latent: n,
            correct: extract_answer(&rec.tokens) == s.answer_tokens,
            ar_steps: count_ar_steps(&rec),
            latency_ms: rec.latency_ms,
            tokens: rec.tokens,
            trajectory,
        });
    }
    results.sort_by_key(|r| r.id);
    Ok((summarize(&results), results))
}

pub fn summarize(results: &[SampleResult]) -> RunMetrics {
    let n = results.len() as f64;
    let steps = results.iter().map(|r| r.trajectory.len()).max().unwrap_or(0);
    let mean_at = |i: usize, f: &dyn Fn(&TrajectoryPoint) -> f64| {
        let vals: Vec<f64> = results.iter().filter_map(|r| r.trajectory.get(i)).map(f).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    RunMetrics {
        accuracy: results.iter().filter(|r| r.correct).count() as f64 / n,
        ar_steps_mean: results.iter().map(|r| r.ar_steps as f64).sum::<f64>() / n,
        latency_ms_mean: results.iter().map(|r| r.latency_ms).sum::<f64>() / n,
        per_step_ratio: (0..steps).map(|i| mean_at(i, &|p| p.ratio)).collect(),
        per_step_focus: (0..steps).map(|i| mean_at(i, &|p| p.focus)).collect(),
        n_samples: results.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoLatentText,
    NoLatentVision,
    NoLatentPart,
    NoCot,
    ExplicitCot,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoLatentText,
        Variant::NoLatentVision,
        Variant::NoLatentPart,
        Variant::NoCot,
        Variant::ExplicitCot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLatentText => "no_latent_text",
            Variant::NoLatentVision => "no_latent_vision",
            Variant::NoLatentPart => "no_latent_part",
            Variant::NoCot => "no_cot",
            Variant::ExplicitCot => "explicit_cot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| contract_err!("unknown variant {s:?}"))
    }

    pub fn block(self) -> BlockKind {
        match self {
            Variant::NoLatentText => BlockKind::NoLatentText,
            Variant::NoLatentVision => BlockKind::NoLatentVision,
            Variant::NoLatentPart => BlockKind::NoLatentPart,
            _ => BlockKind::Full,
        }
    }

    pub fn supervision(self) -> Supervision {
        if self == Variant::NoCot {
            Supervision::AnswerOnly
        } else {
            Supervision::Rationale
        }
    }

    /// Stages trained and latent steps used at evaluation.
    pub fn schedule(self, cfg: &TrainConfig) -> (usize, usize) {
        match self {
            Variant::NoCot => (cfg.n_stages, 0),
            Variant::ExplicitCot => (1, 0),
            _ => (cfg.n_stages, cfg.n_stages - 1),
        }
    }

    pub fn latent_options(self, base: &LatentOptions) -> LatentOptions {
        LatentOptions {
            block: self.block(),
            ..base.clone()
        }
    }
}

/// Weights after every stage of one training run.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub stages: Vec<Params<f32>>,
    pub logs: Vec<StageLog>,
}

impl TrainedRun {
    pub fn last(&self) -> &Params<f32> {
        self.stages.last().expect("at least one stage")
    }
}

/// Trains `variant` from a fresh initialization seeded by `train.seed`.
pub fn train_variant(
    variant: Variant,
    data: &[Sample],
    model: &ModelConfig,
    train: &TrainConfig,
    latent: &LatentOptions,
) -> Result<TrainedRun> {
    let (n_stages, _) = variant.schedule(train);
    let cfg = TrainConfig {
        n_stages,
        ..train.clone()
    };
    let mut params = Params::init(model, train.seed)?;
    let mut stages = Vec::new();
    let logs = train_curriculum(
        &mut params,
        data,
        variant.supervision(),
        &cfg,
        &variant.latent_options(latent),
        0,
        |_| {},
        |_, p, _| {
            stages.push(p.clone());
            Ok(())
        },
    )?;
    Ok(TrainedRun { stages, logs })
}

/// Trains and evaluates one ablation variant.
pub fn run_ablation(
    variant: Variant,
    train_set: &[Sample],
    test_set: &[Sample],
    model: &ModelConfig,
    train: &TrainConfig,
    latent: &LatentOptions,
) -> Result<RunMetrics> {
    let run = train_variant(variant, train_set, model, train, latent)?;
    let (_, n_latent) = variant.schedule(train);
    Ok(evaluate(run.last(), test_set, n_latent, &variant.latent_options(latent))?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub accuracy: f64,
    pub ar_steps_mean: f64,
    pub latency_ms_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Rank correlation between k and accuracy.
    pub spearman: f64,
}

/// One full curriculum per latent-vision length.
pub fn sweep_latent_length(
    k_values: &[usize],
    train_set: &[Sample],
    test_set: &[Sample],
    model: &ModelConfig,
    train: &TrainConfig,
    latent: &LatentOptions,
) -> Result<SweepReport> {
    if k_values.is_empty() {
        return Err(contract_err!("no k values to sweep"));
    }
    let mut rows = Vec::new();
    for &k in k_values {
        let opts = LatentOptions { k, ..latent.clone() };
        let tc = TrainConfig { k, ..train.clone() };
        let m = run_ablation(Variant::Full, train_set, test_set, model, &tc, &opts)?;
        rows.push(SweepRow {
            k,
            accuracy: m.accuracy,
            ar_steps_mean: m.ar_steps_mean,
            latency_ms_mean: m.latency_ms_mean,
        });
    }
    let ks: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    Ok(SweepReport {
        spearman: spearman(&ks, &accs),
        rows,
    })
}

#[cfg(test)]
mod tests;
