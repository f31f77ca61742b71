//! Decoder-only transformer over event / history-token layouts.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{AttnPattern, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::encoder::{positional_matrix, Embedder, EmbedderConfig};
use crate::error::{Error, Result};
use crate::masks::{causal_mask, ht_mask, AttentionMask, Selection, TokenLayout, TokenTag};
use crate::rng::{self, Rng};
use crate::seqdata::{EventSequence, Schema};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig { layers: 2, d_model: 64, heads: 4, ff_dim: 128, dropout: 0.1 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(Error::config("ff_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// How a sequence-level vector is read off the hidden states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over blocks of the final history token's state.
    HistoryToken,
    /// Final-layer state of the last event.
    LastToken,
    /// Final-layer mean over event positions.
    MeanTokens,
    /// [`Pooling::HistoryToken`] read from a model whose history embedding was never trained.
    Cls,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ht" | "history-token" => Ok(Pooling::HistoryToken),
            "last" | "last-token" => Ok(Pooling::LastToken),
            "mean" | "mean-tokens" => Ok(Pooling::MeanTokens),
            "cls" => Ok(Pooling::Cls),
            _ => Err(Error::config(format!("unknown pooling `{s}` (ht, last, mean, cls)"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::HistoryToken => "ht",
            Pooling::LastToken => "last",
            Pooling::MeanTokens => "mean",
            Pooling::Cls => "cls",
        })
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Linear classification head on the layer-normalised history embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub task: String,
    pub classes: usize,
}

#[derive(Clone, Debug)]
struct Classifier {
    spec: ClassifierSpec,
    ln: (ParamId, ParamId),
    w: ParamId,
    b: ParamId,
}

/// Next-event predictions at every position.
#[derive(Clone, Debug)]
pub struct NtpOutputs {
    /// `[L', cardinality]` logits per categorical field.
    pub categorical: Vec<Var>,
    /// `[L', 1]` per numerical field.
    pub numerical: Vec<Var>,
    /// `[L', 1]` inter-event time.
    pub delta_t: Var,
}

/// Hidden states of one row: the token embeddings followed by each block's output.
#[derive(Clone, Debug)]
pub struct Hidden {
    pub layers: Vec<Var>,
}

impl Hidden {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("hidden states always include the input")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Metadata {
    schema: String,
    embedder: EmbedderConfig,
    transformer: TransformerConfig,
    classifier: Option<ClassifierSpec>,
}

/// Embedder, history embedding, transformer blocks and heads, plus the
/// parameter values they index.
#[derive(Clone, Debug)]
pub struct Model {
    schema: Schema,
    config: TransformerConfig,
    embedder: Embedder,
    history: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    ntp_w: ParamId,
    ntp_b: ParamId,
    classifier: Option<Classifier>,
    pub params: ParamStore,
}

fn linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> (ParamId, ParamId) {
    let std = 1.0 / (fan_in as f64).sqrt();
    let w = store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    (w, b)
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.g"), Tensor::matrix(1, d, vec![1.0; d]));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, d]));
    (g, b)
}

impl Model {
    pub fn new(schema: &Schema, embed: EmbedderConfig, config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if embed.d_model != config.d_model {
            return Err(Error::config("embedder and transformer widths differ"));
        }
        let rng = &mut rng::seeded(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embedder = Embedder::new(schema, embed, &mut store, rng)?;
        let history = store.add("history", Tensor::randn(&[1, d], 1.0, rng));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("block{l}");
            let std = 1.0 / (d as f64).sqrt();
            let ln1 = layer_norm_params(&mut store, &format!("{p}.ln1"), d);
            let wq = store.add(format!("{p}.wq"), Tensor::randn(&[d, d], std, rng));
            let wk = store.add(format!("{p}.wk"), Tensor::randn(&[d, d], std, rng));
            let wv = store.add(format!("{p}.wv"), Tensor::randn(&[d, d], std, rng));
            let (wo, bo) = linear(&mut store, &format!("{p}.wo"), d, d, rng);
            let ln2 = layer_norm_params(&mut store, &format!("{p}.ln2"), d);
            let (w1, b1) = linear(&mut store, &format!("{p}.ff1"), d, config.ff_dim, rng);
            let (w2, b2) = linear(&mut store, &format!("{p}.ff2"), config.ff_dim, d, rng);
            blocks.push(Block { ln1, wq, wk, wv, wo, bo, ln2, w1, b1, w2, b2 });
        }
        let ln_f = layer_norm_params(&mut store, "ln_f", d);
        let outputs: usize = schema.categorical().map(|(_, c)| c).sum::<usize>() + schema.num_numerical() + 1;
        let (ntp_w, ntp_b) = linear(&mut store, "ntp", d, outputs, rng);
        Ok(Model {
            schema: schema.clone(),
            config,
            embedder,
            history,
            blocks,
            ln_f,
            ntp_w,
            ntp_b,
            classifier: None,
            params: store,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn classifier(&self) -> Option<&ClassifierSpec> {
        self.classifier.as_ref().map(|c| &c.spec)
    }

    /// Replaces any classification head with a freshly initialised one.
    pub fn set_classifier(&mut self, task: &str, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(Error::config(format!("task `{task}` needs at least 2 classes, got {classes}")));
        }
        self.drop_classifier();
        let rng = &mut rng::seeded(seed);
        let d = self.config.d_model;
        let ln = layer_norm_params(&mut self.params, "cls.ln", d);
        let (w, b) = linear(&mut self.params, "cls", d, classes, rng);
        self.classifier = Some(Classifier { spec: ClassifierSpec { task: task.to_string(), classes }, ln, w, b });
        Ok(())
    }

    fn drop_classifier(&mut self) {
        if self.classifier.take().is_some() {
            let mut kept = ParamStore::new();
            for (name, t) in self.params.iter() {
                if !name.starts_with("cls") {
                    kept.add(name, t.clone());
                }
            }
            self.params = kept;
        }
    }

    /// Token embeddings of one row: projected events, the shared history
    /// vector at history positions and zeros at pads, plus the positional
    /// encoding of every non-pad position.
    pub fn embed_row(&self, g: &mut Graph, store: &ParamStore, seq: &EventSequence, layout: &TokenLayout) -> Result<Var> {
        if layout.event_index.iter().flatten().any(|k| *k >= seq.len()) {
            return Err(Error::Shape(format!("layout refers to events beyond the row's {}", seq.len())));
        }
        let d = self.config.d_model;
        let n = seq.len();
        let events = self.embedder.project(g, store, seq)?;
        let ht = g.param(store, self.history);
        let zero = g.constant(Tensor::zeros(&[1, d]));
        let base = g.concat_rows(&[events, ht, zero]);
        let idx: Vec<usize> = layout
            .tags
            .iter()
            .zip(&layout.event_index)
            .map(|(tag, ev)| match tag {
                TokenTag::Event => ev.expect("validated layout"),
                TokenTag::History => n,
                TokenTag::Pad => n + 1,
            })
            .collect();
        let tokens = g.gather_rows(base, &idx);
        let active = layout.active_len();
        let mut pe = positional_matrix(&layout.timestamps, self.embedder.config());
        pe.data_mut()[active * d..].fill(0.0);
        let pe = g.constant(pe);
        Ok(g.add(tokens, pe))
    }

    /// Runs the blocks on `tokens` (`[L', d]`) under `mask`. Passing an rng
    /// enables dropout.
    pub fn backbone(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        mask: &AttentionMask,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Hidden> {
        let len = g.value(tokens).rows();
        if mask.size() != len || g.value(tokens).cols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "tokens {:?} vs mask of size {}",
                g.value(tokens).shape(),
                mask.size()
            )));
        }
        let pattern = Arc::new(AttnPattern::from_mask(mask)?);
        let rate = self.config.dropout;
        let mut x = tokens;
        let mut layers = vec![x];
        for b in &self.blocks {
            let (g1, b1) = (g.param(store, b.ln1.0), g.param(store, b.ln1.1));
            let h = g.layer_norm(x, g1, b1);
            let (wq, wk, wv) = (g.param(store, b.wq), g.param(store, b.wk), g.param(store, b.wv));
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let a = g.attention(q, k, v, pattern.clone(), self.config.heads)?;
            let (wo, bo) = (g.param(store, b.wo), g.param(store, b.bo));
            let a = g.matmul(a, wo);
            let mut a = g.add_row(a, bo);
            if let Some(r) = dropout.as_deref_mut() {
                a = g.dropout(a, rate, r);
            }
            x = g.add(x, a);

            let (g2, b2) = (g.param(store, b.ln2.0), g.param(store, b.ln2.1));
            let h = g.layer_norm(x, g2, b2);
            let (w1, c1) = (g.param(store, b.w1), g.param(store, b.b1));
            let f = g.matmul(h, w1);
            let f = g.add_row(f, c1);
            let f = g.relu(f);
            let (w2, c2) = (g.param(store, b.w2), g.param(store, b.b2));
            let f = g.matmul(f, w2);
            let mut f = g.add_row(f, c2);
            if let Some(r) = dropout.as_deref_mut() {
                f = g.dropout(f, rate, r);
            }
            x = g.add(x, f);
            layers.push(x);
        }
        Ok(Hidden { layers })
    }

    /// [`Model::embed_row`] followed by [`Model::backbone`].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &EventSequence,
        layout: &TokenLayout,
        mask: &AttentionMask,
        dropout: Option<&mut Rng>,
    ) -> Result<Hidden> {
        if mask.size() != layout.len() {
            return Err(Error::Shape(format!("mask size {} != layout length {}", mask.size(), layout.len())));
        }
        let tokens = self.embed_row(g, store, seq, layout)?;
        self.backbone(g, store, tokens, mask, dropout)
    }

    /// Next-event heads applied to the layer-normalised final states.
    pub fn ntp_predict(&self, g: &mut Graph, store: &ParamStore, hidden: &Hidden) -> NtpOutputs {
        let (lg, lb) = (g.param(store, self.ln_f.0), g.param(store, self.ln_f.1));
        let h = g.layer_norm(hidden.last(), lg, lb);
        let (w, b) = (g.param(store, self.ntp_w), g.param(store, self.ntp_b));
        let out = g.matmul(h, w);
        let out = g.add_row(out, b);
        let mut off = 0;
        let mut categorical = Vec::new();
        for (_, card) in self.schema.categorical() {
            categorical.push(g.slice_cols(out, off, off + card));
            off += card;
        }
        let mut numerical = Vec::new();
        for _ in 0..self.schema.num_numerical() {
            numerical.push(g.slice_cols(out, off, off + 1));
            off += 1;
        }
        let delta_t = g.slice_cols(out, off, off + 1);
        NtpOutputs { categorical, numerical, delta_t }
    }

    /// `[1, classes]` logits from the history-token embedding.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, hidden: &Hidden, layout: &TokenLayout) -> Result<Var> {
        let c = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::config("model has no classification head"))?;
        let emb = extract_embedding(g, hidden, layout, Pooling::HistoryToken)?;
        let (lg, lb) = (g.param(store, c.ln.0), g.param(store, c.ln.1));
        let h = g.layer_norm(emb, lg, lb);
        let (w, b) = (g.param(store, c.w), g.param(store, c.b));
        let out = g.matmul(h, w);
        Ok(g.add_row(out, b))
    }

    /// Forward pass over `seq` with one history token appended after the
    /// last event, in evaluation mode.
    pub fn forward_inference(&self, g: &mut Graph, seq: &EventSequence) -> Result<(Hidden, TokenLayout)> {
        let layout = inference_layout(seq)?;
        let mask = ht_mask(&layout, Selection::Last, &mut rng::seeded(0))?;
        let hidden = self.forward(g, &self.params, seq, &layout, &mask, None)?;
        Ok((hidden, layout))
    }

    /// Sequence embeddings under several poolings from a single inference pass.
    pub fn embed(&self, seq: &EventSequence, poolings: &[Pooling]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let (hidden, layout) = self.forward_inference(&mut g, seq)?;
        poolings
            .iter()
            .map(|p| {
                let v = extract_embedding(&mut g, &hidden, &layout, *p)?;
                Ok(g.value(v).data().to_vec())
            })
            .collect()
    }

    /// Class probabilities for `seq` from the classification head.
    pub fn predict_proba(&self, seq: &EventSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (hidden, layout) = self.forward_inference(&mut g, seq)?;
        let logits = self.classify(&mut g, &self.params, &hidden, &layout)?;
        let z = g.value(logits).data();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / s).collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Metadata {
            schema: self.schema.to_toml(),
            embedder: self.embedder.config().clone(),
            transformer: self.config,
            classifier: self.classifier().cloned(),
        };
        Ok(Checkpoint::from_store(&self.params, serde_json::to_string(&meta)?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Metadata = serde_json::from_str(&ck.metadata)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let schema = Schema::parse_toml(&meta.schema)?;
        let mut model = Model::new(&schema, meta.embedder, meta.transformer, 0)?;
        if let Some(c) = &meta.classifier {
            model.set_classifier(&c.task, c.classes, 0)?;
        }
        let stored = ck.to_store();
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                stored.len(),
                model.params.len()
            )));
        }
        model.params.load_from(&stored)?;
        Ok(model)
    }
}

/// Events of `seq` followed by one history token carrying the last timestamp.
pub fn inference_layout(seq: &EventSequence) -> Result<TokenLayout> {
    let plan = crate::httokens::inference_plan(&seq.timestamps)?;
    crate::httokens::apply_plan(&seq.timestamps, &plan)
}

/// Attention mask for a layout: causal without history tokens, otherwise
/// the history-token mask under `selection`.
pub fn mask_for(layout: &TokenLayout, selection: Selection, rng: &mut Rng) -> Result<AttentionMask> {
    if layout.has_history() {
        ht_mask(layout, selection, rng)
    } else {
        causal_mask(layout)
    }
}

/// Sequence-level `[1, d]` vector read off one row's hidden states.
pub fn extract_embedding(g: &mut Graph, hidden: &Hidden, layout: &TokenLayout, pooling: Pooling) -> Result<Var> {
    match pooling {
        Pooling::HistoryToken | Pooling::Cls => {
            let pos = layout
                .final_history()
                .ok_or_else(|| Error::Mask("layout does not end with a history token".into()))?;
            let blocks = if hidden.layers.len() > 1 { &hidden.layers[1..] } else { &hidden.layers[..] };
            let rows: Vec<Var> = blocks.iter().map(|l| g.gather_rows(*l, &[pos])).collect();
            let stacked = g.concat_rows(&rows);
            let all: Vec<usize> = (0..rows.len()).collect();
            Ok(g.mean_rows(stacked, &all))
        }
        Pooling::LastToken => {
            let pos = layout.last_event().ok_or(Error::NoValidPositions)?;
            Ok(g.gather_rows(hidden.last(), &[pos]))
        }
        Pooling::MeanTokens => {
            let events = layout.event_positions();
            if events.is_empty() {
                return Err(Error::NoValidPositions);
            }
            Ok(g.mean_rows(hidden.last(), &events))
        }
    }
}
