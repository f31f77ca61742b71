//! Synthetic nonstationary Markov sequences.
//!
//! A fixed bank of transition matrices is sampled once. Each sequence is a
//! concatenation of 1–5 segments, each a Markov walk under a different
//! matrix from the bank. Two labels come with every sequence:
//!
//! * `global`: number of segments minus one (classes `0..=4`);
//! * `local`: bank index of the matrix driving the final segment.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::rng::{self, Rng};
use crate::seqdata::{Dataset, EventSequence, FieldSchema, Schema};

pub const FIELD: &str = "label";
pub const GLOBAL_TASK: &str = "global";
pub const LOCAL_TASK: &str = "local";

const DIRICHLET_ALPHA: f64 = 0.3;
const MIN_MATRIX_TV: f64 = 0.05;
const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub num_matrices: usize,
    /// Number of Markov states, also the cardinality of the `label` field.
    pub label_vocab: usize,
    pub parts_range: (usize, usize),
    pub segment_length_range: (usize, usize),
    pub num_sequences: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            num_matrices: 10,
            label_vocab: 8,
            parts_range: (1, 5),
            segment_length_range: (38, 62),
            num_sequences: 1000,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let (pmin, pmax) = self.parts_range;
        let (lmin, lmax) = self.segment_length_range;
        if pmin < 1 || pmin > pmax {
            return Err(Error::config(format!("bad parts range {:?}", self.parts_range)));
        }
        if self.num_matrices < pmax {
            return Err(Error::config(format!(
                "num_matrices ({}) must be at least the maximum part count ({pmax})",
                self.num_matrices
            )));
        }
        if self.label_vocab < 2 {
            return Err(Error::config("label_vocab must be at least 2"));
        }
        if lmin < 1 || lmin > lmax {
            return Err(Error::config(format!(
                "bad segment length range {:?}",
                self.segment_length_range
            )));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema::new(vec![FieldSchema::categorical(FIELD, self.label_vocab)])
            .expect("label_vocab validated")
    }
}

/// Row-stochastic matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    vocab: usize,
    probs: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let vocab = rows.len();
        let mut probs = Vec::with_capacity(vocab * vocab);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != vocab {
                return Err(Error::Shape(format!("row {i} has {} entries, want {vocab}", r.len())));
            }
            let s: f64 = r.iter().sum();
            if r.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::config(format!("row {i} is not a distribution")));
            }
            probs.extend_from_slice(r);
        }
        Ok(TransitionMatrix { vocab, probs })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.vocab..(state + 1) * self.vocab]
    }

    /// Mean row-wise total-variation distance, i.e. the TV distance of the
    /// flattened matrices each normalised to total mass one.
    pub fn tv_distance(&self, other: &TransitionMatrix) -> f64 {
        0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / self.vocab as f64
    }

    pub fn step(&self, state: usize, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let row = self.row(state);
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // rounding: fall back to the last state with positive mass
        row.iter().rposition(|p| *p > 0.0).unwrap_or(self.vocab - 1)
    }
}

fn sample_matrix(vocab: usize, gamma: &Gamma<f64>, rng: &mut Rng) -> TransitionMatrix {
    let mut probs = Vec::with_capacity(vocab * vocab);
    for _ in 0..vocab {
        loop {
            let row: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng)).collect();
            let s: f64 = row.iter().sum();
            if s > 0.0 && s.is_finite() {
                probs.extend(row.iter().map(|x| x / s));
                break;
            }
        }
    }
    TransitionMatrix { vocab, probs }
}

/// Samples `k` pairwise-distinct matrices with Dirichlet(0.3) rows.
pub fn sample_transition_matrices(
    k: usize,
    vocab: usize,
    rng: &mut Rng,
) -> Result<Vec<TransitionMatrix>> {
    if k < 1 || vocab < 2 {
        return Err(Error::config(format!("need k >= 1 and vocab >= 2, got k={k} vocab={vocab}")));
    }
    let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).expect("valid gamma parameters");
    let mut out: Vec<TransitionMatrix> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut attempts = 0;
        loop {
            let m = sample_matrix(vocab, &gamma, rng);
            if out.iter().all(|o| o.tv_distance(&m) > MIN_MATRIX_TV) {
                out.push(m);
                break;
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLES {
                return Err(Error::Generator(format!(
                    "could not sample {k} distinct {vocab}x{vocab} matrices"
                )));
            }
        }
    }
    Ok(out)
}

/// A Markov walk of `len` states starting from `start`.
pub fn walk(matrix: &TransitionMatrix, start: usize, len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut s = start;
    for _ in 0..len {
        out.push(s);
        s = matrix.step(s, rng);
    }
    out
}

/// Matrix bank plus the knobs needed to draw sequences from it.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    pub config: ToyConfig,
    pub matrices: Vec<TransitionMatrix>,
}

/// Generator-side record of how a sequence was built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    pub matrices: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl ToyGenerator {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived(config.seed, rng::stream_id("toy-matrices"));
        let matrices = sample_transition_matrices(config.num_matrices, config.label_vocab, &mut r)?;
        Ok(ToyGenerator { config, matrices })
    }

    pub fn plan(&self, rng: &mut Rng) -> SegmentPlan {
        let (pmin, pmax) = self.config.parts_range;
        let (lmin, lmax) = self.config.segment_length_range;
        let parts = rng.random_range(pmin..=pmax);
        let matrices = index::sample(rng, self.config.num_matrices, parts).into_vec();
        let lengths = (0..parts).map(|_| rng.random_range(lmin..=lmax)).collect();
        SegmentPlan { matrices, lengths }
    }

    /// Realises a plan. The first state is uniform; each later segment
    /// continues from the previous segment's final state under its own matrix.
    pub fn realise(&self, id: String, plan: &SegmentPlan, rng: &mut Rng) -> EventSequence {
        let total: usize = plan.lengths.iter().sum();
        let mut states = Vec::with_capacity(total);
        let mut state = rng.random_range(0..self.config.label_vocab);
        for (seg, (&m, &len)) in plan.matrices.iter().zip(&plan.lengths).enumerate() {
            let matrix = &self.matrices[m];
            if seg > 0 {
                state = matrix.step(state, rng);
            }
            let w = walk(matrix, state, len, rng);
            state = *w.last().expect("segment length >= 1");
            states.extend(w);
        }
        let mut labels = BTreeMap::new();
        labels.insert(GLOBAL_TASK.to_string(), plan.matrices.len() as i64 - 1);
        labels.insert(LOCAL_TASK.to_string(), *plan.matrices.last().unwrap() as i64);
        EventSequence {
            id,
            timestamps: (0..total).map(|i| i as f64).collect(),
            categorical: vec![states.into_iter().map(|s| s as u32).collect()],
            numerical: vec![],
            labels,
        }
    }

    pub fn generate_sequence(&self, id: String, rng: &mut Rng) -> EventSequence {
        let plan = self.plan(rng);
        self.realise(id, &plan, rng)
    }

    /// Sequence `i` draws from its own derived stream, so the dataset is
    /// identical whichever execution mode builds it.
    pub fn generate_dataset(&self, mode: ExecMode) -> Dataset {
        let idx: Vec<usize> = (0..self.config.num_sequences).collect();
        let seqs = par::map(mode, &idx, |&i| {
            let mut r = rng::derived(self.config.seed, i as u64);
            self.generate_sequence(format!("toy-{i:06}"), &mut r)
        });
        Dataset { schema: self.config.schema(), sequences: seqs }
    }
}

pub fn generate_dataset(config: &ToyConfig) -> Result<Dataset> {
    Ok(ToyGenerator::new(config.clone())?.generate_dataset(ExecMode::Parallel))
}
