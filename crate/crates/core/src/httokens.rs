//! History-token count, placement and insertion.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{Selection, TokenLayout, TokenTag};
use crate::rng::Rng;
use crate::seqdata::PaddedBatch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    Uniform,
    #[default]
    BiasEnd,
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Placement::Uniform),
            "bias-end" | "bias_end" => Ok(Placement::BiasEnd),
            _ => Err(Error::config(format!("unknown placement `{s}` (expected uniform or bias-end)"))),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Uniform => "uniform",
            Placement::BiasEnd => "bias-end",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HTConfig {
    /// History tokens per event, `f`.
    pub frequency: f64,
    /// Per-batch application probability, `p`.
    pub probability: f64,
    pub placement: Placement,
    pub selection: Selection,
}

impl Default for HTConfig {
    fn default() -> Self {
        HTConfig { frequency: 0.1, probability: 0.5, placement: Placement::BiasEnd, selection: Selection::Last }
    }
}

impl HTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency >= 0.0) || !self.frequency.is_finite() {
            return Err(Error::config(format!("ht frequency must be >= 0, got {}", self.frequency)));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config(format!("ht probability must be in [0, 1], got {}", self.probability)));
        }
        Ok(())
    }
}

/// Insertion points and timestamps of the history tokens of one row.
///
/// Position `k` means "immediately after event `k`" (1-based), so the
/// token's timestamp is that of event `k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HTPlan {
    pub positions: Vec<usize>,
    pub timestamps: Vec<f64>,
}

impl HTPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn from_positions(mut positions: Vec<usize>, timestamps: &[f64]) -> Self {
        positions.sort_unstable();
        let ts = positions.iter().map(|k| timestamps[k - 1]).collect();
        HTPlan { positions, timestamps: ts }
    }
}

/// `max(1, ⌊f·L⌋)`.
pub fn ht_count(len: usize, frequency: f64) -> usize {
    ((frequency * len as f64).floor() as usize).max(1)
}

fn sample_range(lo: usize, hi: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, hi - lo + 1, n).into_iter().map(|i| lo + i).collect()
}

/// `n` distinct points uniform over `1..=L`, `L = timestamps.len()`.
pub fn plan_uniform(timestamps: &[f64], n: usize, rng: &mut Rng) -> Result<HTPlan> {
    let len = timestamps.len();
    if n == 0 || n > len {
        return Err(Error::config(format!("cannot place {n} history tokens in a row of {len} events")));
    }
    Ok(HTPlan::from_positions(sample_range(1, len, n, rng), timestamps))
}

/// `n` distinct points uniform over `⌈μ/2⌉..=L` (lower bound at least 1),
/// falling back to `1..=L` when that range holds fewer than `n` points.
pub fn plan_bias_end(timestamps: &[f64], mean_len: f64, n: usize, rng: &mut Rng) -> Result<HTPlan> {
    let len = timestamps.len();
    if n == 0 || n > len {
        return Err(Error::config(format!("cannot place {n} history tokens in a row of {len} events")));
    }
    let lo = ((mean_len / 2.0).ceil() as usize).max(1);
    let positions = if lo <= len && len - lo + 1 >= n {
        sample_range(lo, len, n, rng)
    } else {
        sample_range(1, len, n, rng)
    };
    Ok(HTPlan::from_positions(positions, timestamps))
}

pub fn should_apply(probability: f64, rng: &mut Rng) -> bool {
    rng.random::<f64>() < probability
}

/// A single token after the last event.
pub fn inference_plan(timestamps: &[f64]) -> Result<HTPlan> {
    match timestamps.last() {
        None => Err(Error::config("inference plan needs at least one event")),
        Some(t) => Ok(HTPlan { positions: vec![timestamps.len()], timestamps: vec![*t] }),
    }
}

/// Count and placement for one row under `config`.
pub fn plan_row(timestamps: &[f64], config: &HTConfig, mean_len: f64, rng: &mut Rng) -> Result<HTPlan> {
    let n = ht_count(timestamps.len(), config.frequency);
    match config.placement {
        Placement::Uniform => plan_uniform(timestamps, n, rng),
        Placement::BiasEnd => plan_bias_end(timestamps, mean_len, n, rng),
    }
}

/// Interleaves the history tokens of `plan` with a row's events.
pub fn apply_plan(timestamps: &[f64], plan: &HTPlan) -> Result<TokenLayout> {
    let len = timestamps.len();
    if plan.positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("history positions must be strictly increasing"));
    }
    if plan.positions.iter().any(|k| *k == 0 || *k > len) {
        return Err(Error::config(format!("history position outside 1..={len}")));
    }
    let mut layout = TokenLayout { tags: Vec::new(), event_index: Vec::new(), timestamps: Vec::new() };
    let mut next = plan.positions.iter().zip(&plan.timestamps).peekable();
    for (k, t) in timestamps.iter().enumerate() {
        layout.tags.push(TokenTag::Event);
        layout.event_index.push(Some(k));
        layout.timestamps.push(*t);
        if let Some((_, ht)) = next.next_if(|(p, _)| **p == k + 1) {
            layout.tags.push(TokenTag::History);
            layout.event_index.push(None);
            layout.timestamps.push(*ht);
        }
    }
    Ok(layout)
}

/// Event-only view of an augmented layout: source event indices in order.
pub fn strip_history(layout: &TokenLayout) -> Vec<usize> {
    layout.event_index.iter().flatten().copied().collect()
}

/// Per-row plans for one training batch, or `None` when this batch is
/// left plain. `rng` should be a stream reserved for these decisions.
pub fn plan_batch(batch: &PaddedBatch, config: &HTConfig, rng: &mut Rng) -> Result<Option<Vec<HTPlan>>> {
    if !should_apply(config.probability, rng) {
        return Ok(None);
    }
    let mean_len = batch.mean_len();
    batch
        .sequences
        .iter()
        .map(|s| plan_row(&s.timestamps, config, mean_len, rng))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Layouts for every row, padded to a common width. Without plans the rows
/// are plain event layouts.
pub fn batch_layouts(batch: &PaddedBatch, plans: Option<&[HTPlan]>) -> Result<Vec<TokenLayout>> {
    let rows: Vec<TokenLayout> = match plans {
        None => batch.sequences.iter().map(|s| TokenLayout::events(&s.timestamps)).collect(),
        Some(plans) => batch
            .sequences
            .iter()
            .zip(plans)
            .map(|(s, p)| apply_plan(&s.timestamps, p))
            .collect::<Result<_>>()?,
    };
    let width = rows.iter().map(|l| l.len()).max().unwrap_or(0);
    Ok(rows.into_iter().map(|l| l.padded(width)).collect())
}
