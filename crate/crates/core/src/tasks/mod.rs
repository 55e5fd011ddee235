//! Grid-Sum: follow arrows across a 4x4 digit grid and pick the option equal
//! to the sum of the visited digits.

mod grid;
mod segment;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{embed_patches, Params};
use crate::scalar::Scalar;
use crate::substrate::{Graph, Tensor};
use crate::vocab::{self, Direction, GRID_CELLS, N_OPTIONS};

pub use grid::{step, walk, Marker, PatchGrid, GRID_SIDE};
pub use segment::{group_sizes, segment_rationale};

/// Rationales longer than this are merged down to it.
pub const MAX_STEPS: usize = 3;
/// Longest path whose sum (plus distractors) still has number tokens.
pub const MAX_HOPS: usize = vocab::MAX_NUMBER / 9;
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub n_samples: usize,
    pub hop_count: usize,
    pub seed: u64,
    /// Exact share of samples built from a shorter (1 or 2 hop) path.
    pub short_rationale_fraction: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_samples: 2500,
            hop_count: 3,
            seed: 0,
            short_rationale_fraction: 0.1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Spec("n_samples must be positive".into()));
        }
        if self.hop_count == 0 || self.hop_count > MAX_HOPS {
            return Err(Error::Spec(format!(
                "hop_count {} infeasible: paths of 1..={MAX_HOPS} hops fit the grid and number range",
                self.hop_count
            )));
        }
        if !(0.0..=1.0).contains(&self.short_rationale_fraction) {
            return Err(Error::Spec(format!(
                "short_rationale_fraction {} outside [0, 1]",
                self.short_rationale_fraction
            )));
        }
        Ok(())
    }

    pub fn n_short(&self) -> usize {
        (self.short_rationale_fraction * self.n_samples as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub n_native_steps: usize,
    /// Hop count of this sample's path.
    pub difficulty: usize,
    pub answer_value: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: u64,
    pub question_tokens: Vec<usize>,
    pub grid: PatchGrid,
    pub rationale_steps: Vec<Vec<usize>>,
    /// The option letter; `<eos>` is appended when staging.
    pub answer_tokens: Vec<usize>,
    pub answer_label: String,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn n_steps(&self) -> usize {
        self.rationale_steps.len()
    }
}

/// Fields encoded in a question: `<bos> start first-dir hops (letter value)x4 ?`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Question {
    pub start: usize,
    pub first: Direction,
    pub hops: usize,
    pub options: Vec<usize>,
}

pub const QUESTION_LEN: usize = 4 + 2 * N_OPTIONS + 1;

pub fn encode_question(q: &Question) -> Vec<usize> {
    let mut t = vec![vocab::BOS, vocab::cell(q.start), vocab::direction(q.first), vocab::number(q.hops)];
    for (i, v) in q.options.iter().enumerate() {
        t.push(vocab::letter(i));
        t.push(vocab::number(*v));
    }
    t.push(vocab::QUESTION_MARK);
    t
}

pub fn parse_question(tokens: &[usize]) -> Result<Question> {
    let bad = || Error::Format(format!("malformed question {tokens:?}"));
    if tokens.len() != QUESTION_LEN || tokens[0] != vocab::BOS || tokens[QUESTION_LEN - 1] != vocab::QUESTION_MARK {
        return Err(bad());
    }
    let start = (0..GRID_CELLS).find(|c| vocab::cell(*c) == tokens[1]).ok_or_else(bad)?;
    let first = Direction::ALL
        .into_iter()
        .find(|d| vocab::direction(*d) == tokens[2])
        .ok_or_else(bad)?;
    let hops = vocab::value_of(tokens[3]).ok_or_else(bad)?;
    let mut options = Vec::with_capacity(N_OPTIONS);
    for i in 0..N_OPTIONS {
        if tokens[4 + 2 * i] != vocab::letter(i) {
            return Err(bad());
        }
        options.push(vocab::value_of(tokens[5 + 2 * i]).ok_or_else(bad)?);
    }
    Ok(Question {
        start,
        first,
        hops,
        options,
    })
}

/// One native rationale sentence: `dir cell has digit sum total`.
pub fn step_sentence(dir: Direction, cell: usize, digit: usize, total: usize) -> Vec<usize> {
    vec![
        vocab::direction(dir),
        vocab::cell(cell),
        vocab::HAS,
        vocab::number(digit),
        vocab::SUM,
        vocab::number(total),
    ]
}

fn random_path(rng: &mut ChaCha8Rng, hops: usize) -> (usize, Vec<Direction>, Vec<usize>) {
    loop {
        let start = rng.gen_range(0..GRID_CELLS);
        let mut visited = vec![start];
        let mut dirs = Vec::with_capacity(hops);
        let mut at = start;
        for _ in 0..hops {
            let open: Vec<(Direction, usize)> = Direction::ALL
                .into_iter()
                .filter_map(|d| step(at, d).map(|c| (d, c)))
                .filter(|(_, c)| !visited.contains(c))
                .collect();
            let Some(&(d, c)) = open.choose(rng) else { break };
            dirs.push(d);
            visited.push(c);
            at = c;
        }
        if dirs.len() == hops {
            return (start, dirs, visited[1..].to_vec());
        }
    }
}

/// Builds sample `id`. The option window is drawn first and the path digits
/// are then conditioned on a uniformly chosen member, so the question text
/// carries no information about which option is correct.
pub fn generate_sample(seed: u64, id: u64, hops: usize) -> Result<Sample> {
    if hops == 0 || hops > MAX_HOPS {
        return Err(Error::Spec(format!("hop_count {hops} infeasible")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);

    let (start, dirs, path) = random_path(&mut rng, hops);
    let lo = rng.gen_range(0..=9 * hops - (N_OPTIONS - 1));
    let total = lo + rng.gen_range(0..N_OPTIONS);
    let path_digits: Vec<u8> = loop {
        let d: Vec<u8> = (0..hops).map(|_| rng.gen_range(0..10u8)).collect();
        if d.iter().map(|x| *x as usize).sum::<usize>() == total {
            break d;
        }
    };

    let mut markers = [Marker::Plain; GRID_CELLS];
    let mut digits = [0u8; GRID_CELLS];
    for c in 0..GRID_CELLS {
        digits[c] = rng.gen_range(0..10);
        markers[c] = Marker::from_code(rng.gen_range(1..Marker::COUNT)).unwrap();
    }
    markers[start] = Marker::Start;
    for (i, c) in path.iter().enumerate() {
        if i + 1 < hops {
            markers[*c] = Marker::Arrow(dirs[i + 1]);
        }
    }
    let mut grid = PatchGrid::new(digits, markers)?;
    for (c, d) in path.iter().zip(&path_digits) {
        grid.set_digit(*c, *d);
    }

    let mut options: Vec<usize> = (lo..lo + N_OPTIONS).collect();
    options.shuffle(&mut rng);
    let answer = options.iter().position(|v| *v == total).unwrap();

    let mut native = Vec::with_capacity(hops);
    let mut running = 0;
    for (i, c) in path.iter().enumerate() {
        running += grid.digit(*c);
        native.push(step_sentence(dirs[i], *c, grid.digit(*c), running));
    }
    let question = Question {
        start,
        first: dirs[0],
        hops,
        options,
    };
    Ok(Sample {
        id,
        question_tokens: encode_question(&question),
        grid,
        rationale_steps: segment_rationale(&native, MAX_STEPS),
        answer_tokens: vec![vocab::letter(answer)],
        answer_label: vocab::describe(vocab::letter(answer)),
        meta: SampleMeta {
            n_native_steps: hops,
            difficulty: hops,
            answer_value: total,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn split_key(seed: u64, id: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.to_le_bytes());
    h.finalize().into()
}

/// Deterministic dataset with a seeded-hash 80/20 split; both halves are sorted by id.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_samples as u64;
    let mut order: Vec<u64> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut hops = vec![spec.hop_count; spec.n_samples];
    for id in &order[..spec.n_short()] {
        hops[*id as usize] = if spec.hop_count <= 2 {
            spec.hop_count
        } else {
            rng.gen_range(1..=2)
        };
    }
    let samples = (0..n)
        .map(|id| generate_sample(spec.seed, id, hops[id as usize]))
        .collect::<Result<Vec<_>>>()?;

    let mut ranked: Vec<u64> = (0..n).collect();
    ranked.sort_by_key(|id| split_key(spec.seed, *id));
    let n_test = (TEST_FRACTION * n as f64).round() as usize;
    let mut is_test = vec![false; spec.n_samples];
    for id in &ranked[..n_test] {
        is_test[*id as usize] = true;
    }
    let (test, train) = samples.into_iter().partition(|s| is_test[s.id as usize]);
    Ok(Dataset { train, test })
}

/// One JSON object per line, in the given order.
pub fn to_jsonl(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let s: Sample = serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            check_sample(&s).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            Ok(s)
        })
        .collect()
}

fn check_sample(s: &Sample) -> Result<()> {
    parse_question(&s.question_tokens)?;
    if s.rationale_steps.is_empty() || s.rationale_steps.iter().any(Vec::is_empty) {
        return Err(Error::Format(format!("sample {} has an empty rationale step", s.id)));
    }
    let all = s.rationale_steps.iter().flatten().chain(&s.answer_tokens);
    if let Some(t) = all.into_iter().find(|t| **t >= vocab::VOCAB_SIZE) {
        return Err(Error::Format(format!("sample {} has token {t} outside the vocabulary", s.id)));
    }
    Ok(())
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The `J` patch embeddings of `grid` under `params`.
pub fn render_image<S: Scalar>(grid: &PatchGrid, params: &Params<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let v = embed_patches(&mut g, &pv, params.config(), &grid.digit_codes(), &grid.marker_codes())?;
    Ok(g.value(v).clone())
}

/// Answer recovered by walking the grid from the question, ignoring the stored rationale.
pub fn solve_from_grid(sample: &Sample) -> Result<usize> {
    let q = parse_question(&sample.question_tokens)?;
    let total: usize = walk(&sample.grid, q.start, q.first, q.hops)?
        .into_iter()
        .map(|c| sample.grid.digit(c))
        .sum();
    q.options
        .iter()
        .position(|v| *v == total)
        .map(vocab::letter)
        .ok_or_else(|| Error::Spec(format!("sample {}: sum {total} is not an option", sample.id)))
}
