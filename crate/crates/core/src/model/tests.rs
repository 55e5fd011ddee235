use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::scalar::Scalar;
use crate::substrate::{Graph, Tensor};
use crate::vocab;

fn random_codes(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
    let digits = (0..cfg.n_patches).map(|_| rng.gen_range(0..cfg.n_digits)).collect();
    let markers = (0..cfg.n_patches).map(|_| rng.gen_range(0..cfg.n_markers)).collect();
    (digits, markers)
}

fn run_trace(params: &Params<f32>, seq: &Tensor<f32>) -> ForwardTrace<f32> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let sv = g.constant(seq.clone());
    let out = forward(&mut g, &pv, params.config(), sv).unwrap();
    ForwardTrace::from_graph(&g, &out)
}

fn random_seq(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![t, d], |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn embed_inputs_layout() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (digits, markers) = random_codes(&mut rng, &cfg);
    let question: Vec<usize> = (0..12).map(|i| 5 + i).collect();
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let seq = embed_inputs(&mut g, &pv, &cfg, &question, &digits, &markers).unwrap();
    assert_eq!(seq.len(), 28);
    assert_eq!(g.shape(seq.var), &[28, cfg.d_model]);
    assert!(seq.tags[..12].iter().all(|t| *t == Tag::Text));
    assert!(seq.tags[12..].iter().all(|t| *t == Tag::Image));
    assert_eq!(seq.positions(Tag::Image), (12..28).collect::<Vec<_>>());
}

#[test]
fn embed_inputs_rejects_bad_inputs() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 1).unwrap();
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let digits = vec![0; 16];
    let markers = vec![0; 16];
    let r = embed_inputs(&mut g, &pv, &cfg, &[], &digits, &markers);
    assert!(matches!(r, Err(Error::Contract(_))));
    let r = embed_inputs(&mut g, &pv, &cfg, &[1], &digits[..15], &markers[..15]);
    assert!(matches!(r, Err(Error::Contract(_))));
    let long = vec![1; cfg.max_seq];
    let r = embed_inputs(&mut g, &pv, &cfg, &long, &digits, &markers);
    assert!(matches!(r, Err(Error::Capacity { .. })));
}

#[test]
fn embed_inputs_is_deterministic() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (digits, markers) = random_codes(&mut rng, &cfg);
    let embed = || {
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let s = embed_inputs(&mut g, &pv, &cfg, &[1, 9, 20], &digits, &markers).unwrap();
        g.value(s.var).clone()
    };
    assert_eq!(embed(), embed());
}

#[test]
fn logits_are_causal() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_seq(&mut rng, 20, cfg.d_model);
    let base = run_trace(&params, &seq);
    for t in [0usize, 7, 18] {
        let mut perturbed = seq.clone();
        for v in perturbed.data_mut()[(t + 1) * cfg.d_model..].iter_mut() {
            *v += 0.5;
        }
        let tr = run_trace(&params, &perturbed);
        for row in 0..=t {
            assert_eq!(base.logits.row(row), tr.logits.row(row), "row {row} after change at {}", t + 1);
        }
        assert_ne!(base.logits.row(t + 1), tr.logits.row(t + 1));
    }
}

#[test]
fn attention_rows_are_causal_distributions() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tr = run_trace(&params, &random_seq(&mut rng, 17, cfg.d_model));
    assert_eq!(tr.attn.len(), cfg.n_layers);
    assert_eq!(tr.hidden.len(), cfg.n_layers + 1);
    for heads in &tr.attn {
        assert_eq!(heads.len(), cfg.n_heads);
        for a in heads {
            for q in 0..17 {
                let s: f64 = a.row(q).iter().map(|v| v.widen()).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(a.row(q)[q + 1..].iter().all(|v| *v == 0.0));
            }
        }
    }
}

#[test]
fn hidden_zero_is_input_plus_positions() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = random_seq(&mut rng, 9, cfg.d_model);
    let tr = run_trace(&params, &seq);
    let pos = params.tensor(1);
    for i in 0..9 * cfg.d_model {
        assert_eq!(tr.hidden[0].data()[i], seq.data()[i] + pos.data()[i]);
    }
}

#[test]
fn last_hidden_matches_prefix_rerun() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = random_seq(&mut rng, 30, cfg.d_model);
    let full = run_trace(&params, &seq);
    for t in [0usize, 11, 29] {
        let prefix = Tensor::new(vec![t + 1, cfg.d_model], seq.data()[..(t + 1) * cfg.d_model].to_vec()).unwrap();
        let short = run_trace(&params, &prefix);
        assert_eq!(full.hidden[cfg.n_layers].row(t), short.hidden[cfg.n_layers].row(t));
    }
}

#[test]
fn zero_head_gives_uniform_distribution() {
    let cfg = ModelConfig::default();
    let mut params = Params::<f32>::init(&cfg, 7).unwrap();
    let head = params.len() - 1;
    params.tensor_mut(head).data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tr = run_trace(&params, &random_seq(&mut rng, 5, cfg.d_model));
    let p = next_token_distribution(&tr).unwrap();
    for v in &p {
        assert!((v - 1.0 / cfg.vocab_size as f64).abs() < 1e-12);
    }
}

#[test]
fn distribution_normalizes_and_argmax_matches_dot_products() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let t = rng.gen_range(1..40);
        let tr = run_trace(&params, &random_seq(&mut rng, t, cfg.d_model));
        let p = next_token_distribution(&tr).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // independent oracle: final norm of the last hidden state, then W·h per row
        let h = tr.hidden[cfg.n_layers].row(t - 1);
        let mean = h.iter().map(|v| *v as f64).sum::<f64>() / cfg.d_model as f64;
        let var = h.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / cfg.d_model as f64;
        let gain = params.tensor(params.len() - 3);
        let bias = params.tensor(params.len() - 2);
        let fused: Vec<f64> = (0..cfg.d_model)
            .map(|j| (h[j] as f64 - mean) / (var + 1e-5).sqrt() * gain.data()[j] as f64 + bias.data()[j] as f64)
            .collect();
        let w = params.tensor(params.len() - 1);
        let scores: Vec<f64> = (0..cfg.vocab_size)
            .map(|r| w.row(r).iter().zip(&fused).map(|(a, b)| *a as f64 * b).sum())
            .collect();
        let best = (0..cfg.vocab_size).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        let arg = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        assert_eq!(arg, best);
    }
}

#[test]
fn decode_zero_budget() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = greedy_decode(&params, &random_seq(&mut rng, 4, cfg.d_model), 0).unwrap();
    assert_eq!(d, Decoded { tokens: vec![], passes: 0 });
}

#[test]
fn decode_stops_at_forced_eos() {
    let cfg = ModelConfig::default();
    let mut params = Params::<f32>::init(&cfg, 10).unwrap();
    let n = params.len();
    params.tensor_mut(n - 3).data_mut().fill(0.0);
    params.tensor_mut(n - 2).data_mut().fill(1.0);
    let head = params.tensor_mut(n - 1);
    head.data_mut().fill(0.0);
    let d = cfg.d_model;
    head.data_mut()[vocab::EOS * d..(vocab::EOS + 1) * d].fill(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let out = greedy_decode(&params, &random_seq(&mut rng, 6, cfg.d_model), 20).unwrap();
    assert_eq!(out, Decoded { tokens: vec![vocab::EOS], passes: 1 });
}

#[test]
fn decode_passes_equal_emitted_tokens() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..4 {
        let params = Params::<f32>::init(&cfg, seed).unwrap();
        let max_len = rng.gen_range(1..12);
        let before = forward_pass_count();
        let out = greedy_decode(&params, &random_seq(&mut rng, 10, cfg.d_model), max_len).unwrap();
        assert_eq!(out.passes, out.tokens.len());
        assert_eq!((forward_pass_count() - before) as usize, out.passes);
        assert!(out.tokens.len() <= max_len);
    }
}

#[test]
fn decode_capacity_is_checked_up_front() {
    let cfg = ModelConfig::default();
    let params = Params::<f32>::init(&cfg, 12).unwrap();
    let seq = Tensor::<f32>::zeros(vec![cfg.max_seq - 5, cfg.d_model]);
    assert!(matches!(greedy_decode(&params, &seq, 6), Err(Error::Capacity { .. })));
}

#[test]
fn forward_rejects_oversized_sequences() {
    let cfg = ModelConfig::micro();
    let params = Params::<f32>::init(&cfg, 13).unwrap();
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let s = g.constant(Tensor::zeros(vec![cfg.max_seq + 1, cfg.d_model]));
    assert!(matches!(forward(&mut g, &pv, &cfg, s), Err(Error::Capacity { .. })));
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::default();
    cfg.n_heads = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(ModelConfig::micro().validate().is_ok());
}
