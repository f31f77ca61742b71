//! Next-event, contrastive and supervised losses.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::masks::{TokenLayout, TokenTag};
use crate::model::NtpOutputs;
use crate::rng::Rng;
use crate::seqdata::{EventSequence, Schema};

pub const DEFAULT_MARGIN: f64 = 0.5;
pub const DEFAULT_SUBSEQUENCES: usize = 5;
const MIN_SUBSEQUENCE: usize = 10;

/// Per-field weights of the next-event loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub categorical: Vec<f64>,
    pub numerical: Vec<f64>,
    pub delta_t: f64,
}

impl LossWeights {
    pub fn uniform(schema: &Schema) -> Self {
        LossWeights {
            categorical: vec![1.0; schema.num_categorical()],
            numerical: vec![1.0; schema.num_numerical()],
            delta_t: 1.0,
        }
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.categorical.len() != schema.num_categorical() || self.numerical.len() != schema.num_numerical() {
            return Err(Error::config("loss weights do not match the schema"));
        }
        let all = || self.categorical.iter().chain(&self.numerical).chain(std::iter::once(&self.delta_t));
        if all().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !all().any(|w| *w > 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        LossWeights {
            categorical: self.categorical.iter().map(|w| w * c).collect(),
            numerical: self.numerical.iter().map(|w| w * c).collect(),
            delta_t: self.delta_t * c,
        }
    }
}

/// For each position, the source index of the event it must predict: the
/// next event position, skipping history tokens. History, pad and the last
/// event get `None`.
pub fn ntp_targets(layout: &TokenLayout) -> Vec<Option<usize>> {
    let mut out = vec![None; layout.len()];
    let mut next_event: Option<usize> = None;
    for i in (0..layout.len()).rev() {
        if layout.tags[i] == TokenTag::Event {
            out[i] = next_event;
            next_event = layout.event_index[i];
        }
    }
    out
}

/// Weighted next-event loss of one row and its number of supervised positions.
pub fn ntp_loss(
    g: &mut Graph,
    out: &NtpOutputs,
    seq: &EventSequence,
    layout: &TokenLayout,
    weights: &LossWeights,
) -> Result<(Var, usize)> {
    let targets = ntp_targets(layout);
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::NoValidPositions);
    }
    let mut terms = Vec::new();
    for (f, logits) in out.categorical.iter().enumerate() {
        let w = weights.categorical[f];
        if w == 0.0 {
            continue;
        }
        let t: Vec<Option<usize>> = targets.iter().map(|k| k.map(|k| seq.categorical[f][k] as usize)).collect();
        let l = g.cross_entropy(*logits, &t)?;
        terms.push(g.scale(l, w));
    }
    for (f, pred) in out.numerical.iter().enumerate() {
        let w = weights.numerical[f];
        if w == 0.0 {
            continue;
        }
        let t: Vec<Option<f64>> = targets.iter().map(|k| k.map(|k| seq.numerical[f][k])).collect();
        let l = g.mae(*pred, &t)?;
        terms.push(g.scale(l, w));
    }
    if weights.delta_t != 0.0 {
        let t: Vec<Option<f64>> = targets
            .iter()
            .zip(&layout.timestamps)
            .map(|(k, ti)| k.map(|k| seq.timestamps[k] - ti))
            .collect();
        let l = g.mae(out.delta_t, &t)?;
        terms.push(g.scale(l, weights.delta_t));
    }
    let mut total = *terms.first().ok_or_else(|| Error::config("all loss weights are zero"))?;
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    Ok((total, count))
}

/// `k` random contiguous slices; each length is uniform in
/// `[min(10, N), N]` and its start uniform among the valid ones.
pub fn sample_subsequences(seq: &EventSequence, k: usize, rng: &mut Rng) -> Result<Vec<EventSequence>> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("sequence `{}` has {n} events; need at least 2", seq.id)));
    }
    let min_len = MIN_SUBSEQUENCE.min(n);
    Ok((0..k)
        .map(|_| {
            let len = rng.random_range(min_len..=n);
            let start = rng.random_range(0..=n - len);
            seq.slice(start, start + len)
        })
        .collect())
}

/// `‖a−b‖²` for a positive pair, `max(0, ε − ‖a−b‖)²` otherwise.
pub fn contrastive_loss(a: &[f64], b: &[f64], same: bool, margin: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "contrastive_loss: dimension mismatch");
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if same {
        sq
    } else {
        (margin - sq.sqrt()).max(0.0).powi(2)
    }
}

/// Mean contrastive loss over all unordered pairs of `embeddings`.
pub fn coles_batch_loss(g: &mut Graph, embeddings: &[Var], ids: &[String], margin: f64) -> Result<Var> {
    if embeddings.len() != ids.len() {
        return Err(Error::Shape(format!("{} embeddings for {} ids", embeddings.len(), ids.len())));
    }
    if ids.iter().all(|id| *id == ids[0]) {
        return Err(Error::Degenerate("contrastive batch needs at least two distinct ids".into()));
    }
    let mut terms = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            terms.push(g.contrastive(embeddings[i], embeddings[j], ids[i] == ids[j], margin));
        }
    }
    let stacked = g.concat_rows(&terms);
    Ok(g.mean(stacked))
}

/// Cross-entropy of `[1, classes]` logits against `label`.
pub fn supervised_loss(g: &mut Graph, logits: Var, label: i64) -> Result<Var> {
    let classes = g.value(logits).cols();
    if label < 0 || label as usize >= classes {
        return Err(Error::config(format!("label {label} outside 0..{classes}")));
    }
    g.cross_entropy(logits, &[Some(label as usize)])
}
