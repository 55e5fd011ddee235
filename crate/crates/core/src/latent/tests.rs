use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{forward_pass_count, ModelConfig};
use crate::tasks::{generate_sample, QUESTION_LEN};

fn params(seed: u64) -> Params<f32> {
    Params::init(&ModelConfig::default(), seed).unwrap()
}

#[test]
fn selection_examples() {
    let scores = [0.0, 0.2, 0.5, 0.3];
    assert_eq!(select_top_k(&scores, &[1, 2, 3], 2, &[]).unwrap(), vec![2, 3]);
    let mut tied = vec![0.0; 12];
    tied[4] = 0.7;
    tied[9] = 0.7;
    assert_eq!(select_top_k(&tied, &(0..12).collect::<Vec<_>>(), 1, &[]).unwrap(), vec![4]);
    let all: Vec<usize> = (0..4).collect();
    assert_eq!(select_top_k(&scores, &all, 4, &[]).unwrap(), vec![2, 3, 1, 0]);
    assert_eq!(select_top_k(&scores, &all, 3, &[2]).unwrap(), vec![3, 1, 0]);
    assert_eq!(select_top_k(&scores, &all, 9, &[2]).unwrap(), vec![3, 1, 0, 2]);
    assert_eq!(select_top_k(&scores, &[1], 1, &[1]).unwrap(), vec![1]);
    assert!(matches!(select_top_k(&scores, &[], 1, &[]), Err(Error::Selection(_))));
    assert!(matches!(select_top_k(&scores, &[1], 0, &[]), Err(Error::Selection(_))));
}

#[test]
fn selection_from_trace_sums_layers_and_heads() {
    let p = params(1);
    let s = generate_sample(0, 0, 3).unwrap();
    let mut g = Graph::new();
    let pv = p.bind(&mut g, false);
    let inputs = embed_inputs(&mut g, &pv, p.config(), &s.question_tokens, &s.grid.digit_codes(), &s.grid.marker_codes()).unwrap();
    let images = inputs.positions(Tag::Image);
    let fv = forward(&mut g, &pv, p.config(), inputs.var).unwrap();
    let tr = ForwardTrace::from_graph(&g, &fv);
    let q = tr.seq_len() - 1;
    let mut brute: Vec<(f64, usize)> = images
        .iter()
        .map(|j| {
            let mut s = 0.0;
            for layer in &tr.attn {
                for head in layer {
                    s += head.at(q, *j) as f64;
                }
            }
            (s, *j)
        })
        .collect();
    brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let want: Vec<usize> = brute.iter().take(5).map(|x| x.1).collect();
    assert_eq!(select_latent_vision(&tr, &images, 5, &[]).unwrap(), want);
}

fn state_with_base(p: &Params<f32>, g: &mut Graph<f32>, text_len: usize, n_latent: usize) -> LatentState<f32> {
    let cfg = p.config();
    let pv = p.bind(g, false);
    let question: Vec<usize> = (0..text_len).map(|i| 5 + i % 30).collect();
    let inputs = embed_inputs(g, &pv, cfg, &question, &[3; 16], &[5; 16]).unwrap();
    LatentState::new(g, &pv, inputs, n_latent).unwrap()
}

#[test]
fn insertion_points_shift_by_block_length() {
    let p = params(2);
    let mut g = Graph::new();
    let mut st = state_with_base(&p, &mut g, 14, 3);
    assert_eq!(st.latent_positions, vec![30, 31, 32]);
    let pv = p.bind(&mut g, false);
    let opts = LatentOptions::with_k(4);
    latent_step(&mut g, &pv, &p, &mut st, &opts).unwrap();
    assert_eq!(st.latent_positions, vec![30, 36, 37]);
    assert_eq!(st.len(), 33 + 5);
    latent_step(&mut g, &pv, &p, &mut st, &opts).unwrap();
    assert_eq!(st.latent_positions, vec![30, 36, 42]);
    assert_eq!(st.len(), 33 + 10);
    latent_step(&mut g, &pv, &p, &mut st, &opts).unwrap();
    assert_eq!(st.len(), 33 + 15);
    assert_eq!(&st.tags[30..35], &[Tag::LatentText, Tag::LatentVision, Tag::LatentVision, Tag::LatentVision, Tag::LatentVision]);
    assert!(latent_step(&mut g, &pv, &p, &mut st, &opts).is_err());
}

#[test]
fn latent_text_matches_a_fresh_prefix_run() {
    let p = params(3);
    let s = generate_sample(1, 4, 3).unwrap();
    let opts = LatentOptions::with_k(4);
    let mut g = Graph::new();
    let pv = p.bind(&mut g, false);
    let state = run_latent_phase_in(&mut g, &pv, &p, &s, 3, &opts).unwrap();
    let seq = g.value(state.seq).clone();
    let d = p.config().d_model;
    for (i, l) in state.latent_positions.iter().enumerate() {
        let prefix = Tensor::new(vec![*l, d], seq.data()[..l * d].to_vec()).unwrap();
        let mut g2 = Graph::new();
        let pv2 = p.bind(&mut g2, false);
        let sv = g2.constant(prefix);
        let fv = forward(&mut g2, &pv2, p.config(), sv).unwrap();
        let fresh = g2.value(fv.hidden[p.config().n_layers]).row(l - 1).to_vec();
        assert_eq!(seq.row(*l), &fresh[..], "step {i}");
        // selected embeddings are copies of the image rows
        for (j, src) in state.selected_sets[i].iter().enumerate() {
            assert_eq!(seq.row(l + 1 + j), seq.row(*src));
        }
    }
}

#[test]
fn zero_latent_steps_leave_inputs_untouched() {
    let p = params(4);
    let s = generate_sample(1, 5, 3).unwrap();
    let before = forward_pass_count();
    let (state, seq) = run_latent_phase(&s, &p, 0, &LatentOptions::default()).unwrap();
    assert_eq!(forward_pass_count(), before);
    let mut g = Graph::new();
    let pv = p.bind(&mut g, false);
    let inputs = embed_inputs(&mut g, &pv, p.config(), &s.question_tokens, &s.grid.digit_codes(), &s.grid.marker_codes()).unwrap();
    assert_eq!(&seq, g.value(inputs.var));
    assert_eq!(state.tags, inputs.tags);
}

#[test]
fn three_steps_cost_three_passes_and_fifteen_positions() {
    let p = params(5);
    let s = generate_sample(1, 6, 3).unwrap();
    let before = forward_pass_count();
    let (state, seq) = run_latent_phase(&s, &p, 3, &LatentOptions::with_k(4)).unwrap();
    assert_eq!(forward_pass_count() - before, 3);
    assert_eq!(state.base_len, QUESTION_LEN + 16 + 3);
    assert_eq!(seq.rows(), state.base_len + 15);
    assert_eq!(state.tags.len(), seq.rows());
}

#[test]
fn exclude_previous_gives_disjoint_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..5 {
        let p = params(seed);
        let s = generate_sample(2, rng.gen_range(0..1000), 3).unwrap();
        let (state, _) = run_latent_phase(&s, &p, 3, &LatentOptions::with_k(4)).unwrap();
        let mut seen = HashSet::new();
        for set in &state.selected_sets {
            assert_eq!(set.len(), 4);
            assert!(set.iter().all(|j| state.image_positions.contains(j)));
            assert!(set.iter().all(|j| seen.insert(*j)));
        }
    }
}

#[test]
fn exhausted_selection_reuses_best_images() {
    let p = params(7);
    let s = generate_sample(3, 0, 3).unwrap();
    let (state, seq) = run_latent_phase(&s, &p, 3, &LatentOptions::with_k(8)).unwrap();
    let sizes: Vec<usize> = state.selected_sets.iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![8, 8, 8]);
    // two steps use up all 16 patches, so the third one picks among them again
    let mut first_two: Vec<usize> = state.selected_sets[..2].concat();
    first_two.sort_unstable();
    assert_eq!(first_two, state.image_positions);
    assert_eq!(seq.rows(), state.base_len + 3 * 9);
}

#[test]
fn ablation_blocks_follow_their_length_law() {
    let p = params(8);
    let s = generate_sample(3, 1, 3).unwrap();
    for (block, width) in [
        (BlockKind::Full, 5),
        (BlockKind::NoLatentText, 4),
        (BlockKind::NoLatentVision, 1),
        (BlockKind::NoLatentPart, 1),
    ] {
        let opts = LatentOptions {
            block,
            ..LatentOptions::with_k(4)
        };
        let before = forward_pass_count();
        let (state, seq) = run_latent_phase(&s, &p, 3, &opts).unwrap();
        assert_eq!(seq.rows(), state.base_len + 3 * width, "{block:?}");
        let passes = forward_pass_count() - before;
        assert_eq!(passes, if block == BlockKind::NoLatentPart { 0 } else { 3 });
        let latent = state.tags.iter().filter(|t| matches!(t, Tag::LatentText | Tag::LatentVision)).count();
        assert_eq!(latent, 3 + 3 * width);
    }
}

#[test]
fn ar_steps_are_latent_steps_plus_tokens() {
    let p = params(9);
    for n in 0..=3 {
        let s = generate_sample(4, n as u64, 3).unwrap();
        let before = forward_pass_count();
        let rec = infer(&s, &p, n, &LatentOptions::with_k(4), 6).unwrap();
        assert_eq!(count_ar_steps(&rec), n + rec.tokens.len());
        assert_eq!((forward_pass_count() - before) as usize, count_ar_steps(&rec));
        assert!(rec.state.tags.iter().all(|t| !matches!(t, Tag::Rationale | Tag::Answer)));
    }
}

#[test]
fn capacity_is_enforced() {
    let cfg = ModelConfig {
        max_seq: 40,
        ..ModelConfig::default()
    };
    let p = Params::<f32>::init(&cfg, 1).unwrap();
    let s = generate_sample(0, 0, 3).unwrap();
    let r = run_latent_phase(&s, &p, 3, &LatentOptions::with_k(4));
    assert!(matches!(r, Err(Error::Capacity { .. })));
}

#[test]
fn answer_extraction() {
    let a = vocab::letter(2);
    assert_eq!(extract_answer(&[a, vocab::EOS]), vec![a]);
    assert_eq!(extract_answer(&[9, 9, vocab::STEP, a, vocab::EOS, 7]), vec![a]);
    assert_eq!(extract_answer(&[vocab::STEP]), Vec::<usize>::new());
}
