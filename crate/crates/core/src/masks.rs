//! Attention masks over event / history-token layouts.
//!
//! Rows are attending tokens, columns attended tokens. Every mask built here
//! is causal over positions, never lets a row read a pad column, and always
//! allows non-pad self-attention.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenTag {
    Event,
    History,
    Pad,
}

impl TokenTag {
    pub fn symbol(self) -> char {
        match self {
            TokenTag::Event => 'E',
            TokenTag::History => 'H',
            TokenTag::Pad => 'P',
        }
    }
}

/// Per-position description of an (augmented) row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub tags: Vec<TokenTag>,
    /// Index of the source event for `Event` positions.
    pub event_index: Vec<Option<usize>>,
    pub timestamps: Vec<f64>,
}

impl TokenLayout {
    /// Layout of a plain event row with no history tokens.
    pub fn events(timestamps: &[f64]) -> Self {
        TokenLayout {
            tags: vec![TokenTag::Event; timestamps.len()],
            event_index: (0..timestamps.len()).map(Some).collect(),
            timestamps: timestamps.to_vec(),
        }
    }

    /// Builds a layout from tag symbols (`E`, `H`, `P`); timestamps are the
    /// source-event index, history tokens copy the preceding event's time.
    pub fn from_symbols(symbols: &str) -> Result<Self> {
        let mut tags = Vec::new();
        let mut event_index = Vec::new();
        let mut timestamps = Vec::new();
        let mut next_event = 0usize;
        for c in symbols.chars().filter(|c| !c.is_whitespace()) {
            let tag = match c.to_ascii_uppercase() {
                'E' => TokenTag::Event,
                'H' => TokenTag::History,
                'P' => TokenTag::Pad,
                other => return Err(Error::Mask(format!("unknown layout symbol `{other}`"))),
            };
            tags.push(tag);
            match tag {
                TokenTag::Event => {
                    event_index.push(Some(next_event));
                    timestamps.push(next_event as f64);
                    next_event += 1;
                }
                TokenTag::History => {
                    event_index.push(None);
                    timestamps.push(next_event.saturating_sub(1) as f64);
                }
                TokenTag::Pad => {
                    event_index.push(None);
                    timestamps.push(0.0);
                }
            }
        }
        let layout = TokenLayout { tags, event_index, timestamps };
        layout.validate()?;
        Ok(layout)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tags.len();
        if self.event_index.len() != n || self.timestamps.len() != n {
            return Err(Error::Mask("layout arrays have different lengths".into()));
        }
        if let Some(first_pad) = self.tags.iter().position(|t| *t == TokenTag::Pad) {
            if self.tags[first_pad..].iter().any(|t| *t != TokenTag::Pad) {
                return Err(Error::Mask("pad tokens must form the tail of the layout".into()));
            }
        }
        for (i, (tag, ev)) in self.tags.iter().zip(&self.event_index).enumerate() {
            if (*tag == TokenTag::Event) != ev.is_some() {
                return Err(Error::Mask(format!("position {i}: event index/tag mismatch")));
            }
        }
        Ok(())
    }

    /// Number of non-pad positions.
    pub fn active_len(&self) -> usize {
        self.tags.iter().take_while(|t| **t != TokenTag::Pad).count()
    }

    pub fn history_positions(&self) -> Vec<usize> {
        self.positions(TokenTag::History)
    }

    pub fn event_positions(&self) -> Vec<usize> {
        self.positions(TokenTag::Event)
    }

    fn positions(&self, tag: TokenTag) -> Vec<usize> {
        self.tags.iter().enumerate().filter(|(_, t)| **t == tag).map(|(i, _)| i).collect()
    }

    pub fn has_history(&self) -> bool {
        self.tags.contains(&TokenTag::History)
    }

    /// Most recent history position strictly before `pos`.
    pub fn last_history_before(&self, pos: usize) -> Option<usize> {
        (0..pos).rev().find(|&j| self.tags[j] == TokenTag::History)
    }

    /// Last non-pad position, if it is a history token.
    pub fn final_history(&self) -> Option<usize> {
        let n = self.active_len();
        (n > 0 && self.tags[n - 1] == TokenTag::History).then(|| n - 1)
    }

    pub fn last_event(&self) -> Option<usize> {
        self.tags.iter().rposition(|t| *t == TokenTag::Event)
    }

    /// Drops the pad tail.
    pub fn trimmed(&self) -> TokenLayout {
        let n = self.active_len();
        TokenLayout {
            tags: self.tags[..n].to_vec(),
            event_index: self.event_index[..n].to_vec(),
            timestamps: self.timestamps[..n].to_vec(),
        }
    }

    /// Appends pad positions up to `width`.
    pub fn padded(&self, width: usize) -> TokenLayout {
        let mut out = self.clone();
        while out.len() < width {
            out.tags.push(TokenTag::Pad);
            out.event_index.push(None);
            out.timestamps.push(0.0);
        }
        out
    }

    pub fn symbols(&self) -> String {
        self.tags.iter().map(|t| t.symbol()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Last,
    Random,
}

impl std::str::FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Selection::Last),
            "random" => Ok(Selection::Random),
            _ => Err(Error::config(format!("unknown selection strategy `{s}`"))),
        }
    }
}

/// Dense boolean allow-matrix plus per-row padding flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allow: Vec<bool>,
    pad: Vec<bool>,
}

impl AttentionMask {
    pub fn new(size: usize) -> Self {
        AttentionMask { size, allow: vec![false; size * size], pad: vec![false; size] }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = AttentionMask::new(size);
        for i in 0..size {
            for j in 0..size {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.allow[row * self.size + col] = value;
    }

    pub fn is_pad_row(&self, row: usize) -> bool {
        self.pad[row]
    }

    pub fn set_pad_row(&mut self, row: usize, pad: bool) {
        self.pad[row] = pad;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allow[row * self.size..(row + 1) * self.size]
    }

    pub fn allowed_in_row(&self, row: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(row).iter().enumerate().filter(|(_, a)| **a).map(|(j, _)| j)
    }

    pub fn nnz(&self) -> usize {
        self.allow.iter().filter(|a| **a).count()
    }

    /// Copy with every column in `cols` cut off from all rows except itself.
    pub fn without_columns(&self, cols: &[usize]) -> AttentionMask {
        let mut m = self.clone();
        for &c in cols {
            for r in 0..self.size {
                if r != c {
                    m.set(r, c, false);
                }
            }
        }
        m
    }

    /// 0/1 grid, one row per line.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.size * (self.size + 1));
        for i in 0..self.size {
            for j in 0..self.size {
                s.push(if self.allowed(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn mark_pads(mask: &mut AttentionMask, layout: &TokenLayout) {
    for (i, t) in layout.tags.iter().enumerate() {
        mask.set_pad_row(i, *t == TokenTag::Pad);
    }
}

/// Lower-triangular mask over non-pad positions.
pub fn causal_mask(layout: &TokenLayout) -> Result<AttentionMask> {
    layout.validate()?;
    if layout.has_history() {
        return Err(Error::Mask("causal_mask: layout contains history tokens; use ht_mask".into()));
    }
    let n = layout.len();
    let active = layout.active_len();
    let mut m = AttentionMask::from_fn(n, |i, j| i < active && j <= i);
    mark_pads(&mut m, layout);
    Ok(m)
}

/// History-token mask.
///
/// * history row `h`: every earlier event plus itself;
/// * event row `i` with earlier history tokens: events after the most recent
///   history token up to `i`, plus exactly one history token (the most recent
///   for [`Selection::Last`], a uniform draw among earlier ones for
///   [`Selection::Random`]);
/// * event row with no earlier history token: causal over events.
pub fn ht_mask(layout: &TokenLayout, strategy: Selection, rng: &mut Rng) -> Result<AttentionMask> {
    layout.validate()?;
    if !layout.has_history() {
        return Err(Error::Mask("ht_mask: layout has no history tokens; use causal_mask".into()));
    }
    let n = layout.len();
    let mut m = AttentionMask::new(n);
    let mut seen_history: Vec<usize> = Vec::new();
    for i in 0..n {
        match layout.tags[i] {
            TokenTag::Pad => {}
            TokenTag::History => {
                for j in 0..i {
                    if layout.tags[j] == TokenTag::Event {
                        m.set(i, j, true);
                    }
                }
                m.set(i, i, true);
                seen_history.push(i);
            }
            TokenTag::Event => {
                let start = match seen_history.last() {
                    None => 0,
                    Some(&last) => {
                        let chosen = match strategy {
                            Selection::Last => last,
                            Selection::Random => {
                                seen_history[rng.random_range(0..seen_history.len())]
                            }
                        };
                        m.set(i, chosen, true);
                        last + 1
                    }
                };
                for j in start..=i {
                    if layout.tags[j] == TokenTag::Event {
                        m.set(i, j, true);
                    }
                }
            }
        }
    }
    mark_pads(&mut m, layout);
    Ok(m)
}

/// Structural violations of a mask against its layout.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskReport {
    /// `(row, col)` with `col > row`.
    pub future_edges: Vec<(usize, usize)>,
    /// History row reading another history column.
    pub history_edges: Vec<(usize, usize)>,
    /// Any row reading a pad column.
    pub pad_edges: Vec<(usize, usize)>,
    /// `(source event, target event)` pairs connected while bypassing every
    /// history token although the source precedes the target's latest one.
    pub bottleneck: Vec<(usize, usize)>,
}

impl MaskReport {
    pub fn is_clean(&self) -> bool {
        self.future_edges.is_empty()
            && self.history_edges.is_empty()
            && self.pad_edges.is_empty()
            && self.bottleneck.is_empty()
    }
}

/// Checks causality, the history/history and pad rules, and the bottleneck
/// property.
pub fn check_mask(mask: &AttentionMask, layout: &TokenLayout) -> MaskReport {
    let n = mask.size();
    let mut report = MaskReport::default();
    for i in 0..n {
        for j in mask.allowed_in_row(i) {
            if j > i {
                report.future_edges.push((i, j));
            }
            if layout.tags[j] == TokenTag::Pad {
                report.pad_edges.push((i, j));
            }
            if i != j
                && layout.tags[i] == TokenTag::History
                && layout.tags[j] == TokenTag::History
            {
                report.history_edges.push((i, j));
            }
        }
    }
    report.bottleneck = bottleneck_reachability(mask, layout);
    report
}

/// Deletes history nodes from the attention digraph (edge `j -> i` when row
/// `i` may read column `j`) and returns every event pair `(j, i)` such that
/// `j` still reaches `i` although `j` lies before the latest history token
/// preceding `i`. Paths of any length are considered, which covers stacks
/// of layers sharing the mask.
pub fn bottleneck_reachability(mask: &AttentionMask, layout: &TokenLayout) -> Vec<(usize, usize)> {
    let n = mask.size().min(layout.len());
    let is_event = |k: usize| layout.tags[k] == TokenTag::Event;
    // successors[j] = rows that read column j
    let mut successors = vec![Vec::new(); n];
    for i in (0..n).filter(|&i| is_event(i)) {
        for j in mask.allowed_in_row(i).filter(|&j| j < n && j != i && is_event(j)) {
            successors[j].push(i);
        }
    }
    let last_ht: Vec<Option<usize>> = (0..n).map(|i| layout.last_history_before(i)).collect();
    let mut violations = Vec::new();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for src in (0..n).filter(|&j| is_event(j)) {
        // Only sources that precede some later history token matter.
        if !last_ht.iter().any(|h| matches!(h, Some(h) if *h > src)) {
            continue;
        }
        seen.iter_mut().for_each(|s| *s = false);
        seen[src] = true;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &v in &successors[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        for (dst, h) in last_ht.iter().enumerate() {
            if let Some(h) = h {
                if seen[dst] && dst != src && src < *h && is_event(dst) {
                    violations.push((src, dst));
                }
            }
        }
    }
    violations
}
