use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tasks::{generate_dataset, generate_sample, TaskSpec};
use crate::substrate::Tensor;

fn params(seed: u64) -> Params<f32> {
    Params::init(&ModelConfig::default(), seed).unwrap()
}

fn random_trace(rng: &mut ChaCha8Rng, t: usize) -> ForwardTraceF64 {
    let mut layer = || -> Vec<Tensor<f64>> {
        (0..2)
            .map(|_| {
                let mut a = Tensor::zeros(vec![t, t]);
                for q in 0..t {
                    let raw: Vec<f64> = (0..=q).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    for (k, v) in raw.iter().enumerate() {
                        a.data_mut()[q * t + k] = v / z;
                    }
                }
                a
            })
            .collect()
    };
    ForwardTraceF64 {
        hidden: vec![],
        attn: vec![layer(), layer(), layer()],
        logits: Tensor::zeros(vec![t, 3]),
    }
}

type ForwardTraceF64 = crate::model::ForwardTrace<f64>;

#[test]
fn trace_metrics_match_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let t = rng.gen_range(6..30);
        let tr = random_trace(&mut rng, t);
        let q = rng.gen_range(3..t);
        let image: Vec<usize> = (0..=q).filter(|_| rng.gen_bool(0.3)).collect();
        let text: Vec<usize> = (0..=q).filter(|p| !image.contains(p)).collect();
        if text.is_empty() {
            continue;
        }
        let sum_at = |p: usize| -> f64 {
            let mut s = 0.0;
            for l in &tr.attn {
                for h in l {
                    s += h.at(q, p);
                }
            }
            s
        };
        let num: f64 = image.iter().map(|p| sum_at(*p)).sum();
        let den: f64 = text.iter().map(|p| sum_at(*p)).sum();
        assert!((attention_ratio(&tr, q, &image, &text).unwrap() - num / den).abs() < 1e-9);
        let all: Vec<usize> = (0..=q).collect();
        let z: f64 = all.iter().map(|p| sum_at(*p)).sum();
        let h: f64 = all.iter().map(|p| sum_at(*p) / z).filter(|x| *x > 0.0).map(|x| -x * x.ln()).sum();
        let f = attention_focus(&tr, q, &all).unwrap();
        assert!((f - 1.0 / (h + 1e-6)).abs() < 1e-9);
        assert!(f >= 1.0 / ((all.len() as f64).ln() + 1e-6) - 1e-12 && f <= 1e6);
    }
}

#[test]
fn trajectory_length_and_manual_recompute() {
    let p = params(2);
    let s = generate_sample(3, 7, 3).unwrap();
    let opts = LatentOptions {
        capture_traces: true,
        ..LatentOptions::default()
    };
    let rec = infer(&s, &p, 0, &opts, 4).unwrap();
    assert!(attention_trajectory(&rec).unwrap().is_empty());

    let rec = infer(&s, &p, 3, &opts, 4).unwrap();
    let traj = attention_trajectory(&rec).unwrap();
    assert_eq!(traj.len(), 3);
    for (i, point) in traj.iter().enumerate() {
        let tr = &rec.state.traces[i];
        let q = tr.seq_len() - 1;
        assert_eq!(q, rec.state.query_rows[i]);
        let text: Vec<usize> = (0..=q)
            .filter(|p| matches!(rec.state.tags[*p], Tag::Text | Tag::LatentText))
            .collect();
        let r = attention_ratio(tr, q, &rec.state.selected_sets[i], &text).unwrap();
        let f = attention_focus(tr, q, &(0..=q).collect::<Vec<_>>()).unwrap();
        assert!((r - point.ratio).abs() < 1e-9);
        assert!((f - point.focus).abs() < 1e-9);
        assert!(point.focus >= 1.0 / (((q + 1) as f64).ln() + FOCUS_EPS) && point.focus <= 1.0 / FOCUS_EPS);
    }
}

#[test]
fn evaluate_reports_per_step_lists() {
    let p = params(3);
    let d = generate_dataset(&TaskSpec {
        n_samples: 10,
        short_rationale_fraction: 0.0,
        ..TaskSpec::default()
    })
    .unwrap();
    let (m, per) = evaluate(&p, &d.test, 3, &LatentOptions::default()).unwrap();
    assert_eq!(m.n_samples, d.test.len());
    assert_eq!(m.per_step_ratio.len(), 3);
    assert_eq!(m.per_step_focus.len(), 3);
    assert!((0.0..=1.0).contains(&m.accuracy));
    let mean = per.iter().map(|r| r.ar_steps as f64).sum::<f64>() / per.len() as f64;
    assert_eq!(m.ar_steps_mean, mean);
    assert!(m.ar_steps_mean >= 1.0);
    assert!(matches!(evaluate(&p, &[], 0, &LatentOptions::default()), Err(Error::Contract(_))));
}

#[test]
fn unknown_variant_is_a_contract_error() {
    assert!(matches!(Variant::parse("no_vision"), Err(Error::Contract(_))));
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
    }
}

fn tiny() -> (Vec<Sample>, Vec<Sample>, ModelConfig, TrainConfig) {
    let d = generate_dataset(&TaskSpec {
        n_samples: 10,
        ..TaskSpec::default()
    })
    .unwrap();
    let mc = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs_per_stage: 1,
        ..TrainConfig::default()
    };
    (d.train, d.test, mc, tc)
}

#[test]
fn every_ablation_yields_metrics() {
    let (train, test, mc, tc) = tiny();
    for v in Variant::ALL {
        let m = run_ablation(v, &train, &test, &mc, &tc, &LatentOptions::default()).unwrap();
        assert_eq!(m.n_samples, test.len());
        let (_, n_latent) = v.schedule(&tc);
        assert!(m.per_step_ratio.len() <= n_latent);
    }
}

#[test]
fn sweep_has_one_row_per_k() {
    let (train, test, mc, tc) = tiny();
    let tc = TrainConfig { n_stages: 2, ..tc };
    let rep = sweep_latent_length(&[1, 16], &train, &test, &mc, &tc, &LatentOptions::default()).unwrap();
    assert_eq!(rep.rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 16]);
    assert!(sweep_latent_length(&[], &train, &test, &mc, &tc, &LatentOptions::default()).is_err());
}
