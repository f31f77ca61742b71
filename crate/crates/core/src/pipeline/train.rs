//! Pretraining, supervised training and fine-tuning loops.

use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, AdamState, Graph, ParamGrads, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::httokens::{batch_layouts, plan_batch, HTConfig};
use crate::masks::TokenLayout;
use crate::model::{extract_embedding, inference_layout, mask_for, Model, Pooling};
use crate::objectives::{coles_batch_loss, ntp_loss, sample_subsequences, supervised_loss, LossWeights};
use crate::par::{self, ExecMode};
use crate::rng::{self, Rng};
use crate::seqdata::{make_batches, Dataset, EventSequence, PaddedBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ntp,
    Coles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub max_epochs: usize,
    pub sft_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub max_len: usize,
    /// History-token settings for next-event pretraining; `None` trains a
    /// plain causal model.
    pub ht: Option<HTConfig>,
    pub weight_categorical: f64,
    pub weight_numerical: f64,
    pub weight_delta_t: f64,
    pub coles_margin: f64,
    pub coles_subsequences: usize,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Ntp,
            max_epochs: 20,
            sft_epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            patience: 5,
            seed: 0,
            max_len: 512,
            ht: Some(HTConfig::default()),
            weight_categorical: 1.0,
            weight_numerical: 1.0,
            weight_delta_t: 1.0,
            coles_margin: crate::objectives::DEFAULT_MARGIN,
            coles_subsequences: crate::objectives::DEFAULT_SUBSEQUENCES,
            exec: ExecMode::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.sft_epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::config("batch_size and max_len must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.coles_margin > 0.0) || self.coles_subsequences < 2 {
            return Err(Error::config("coles needs a positive margin and at least 2 subsequences"));
        }
        if let Some(ht) = &self.ht {
            ht.validate()?;
        }
        Ok(())
    }

    fn weights(&self, model: &Model) -> LossWeights {
        let s = model.schema();
        LossWeights {
            categorical: vec![self.weight_categorical; s.num_categorical()],
            numerical: vec![self.weight_numerical; s.num_numerical()],
            delta_t: self.weight_delta_t,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Per-epoch validation values and the epoch whose parameters were kept.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Entry 0 is measured before the first update.
    pub val_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Validation values are losses (lower is better) or accuracies.
    pub higher_is_better: bool,
}

struct EarlyStopping {
    higher_is_better: bool,
    patience: usize,
    history: Vec<f64>,
    best: f64,
    best_epoch: usize,
    best_params: ParamStore,
}

impl EarlyStopping {
    fn new(initial: f64, params: &ParamStore, higher_is_better: bool, patience: usize) -> Self {
        EarlyStopping {
            higher_is_better,
            patience,
            history: vec![initial],
            best: initial,
            best_epoch: 0,
            best_params: params.clone(),
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    fn record(&mut self, epoch: usize, value: f64, params: &ParamStore) -> bool {
        self.history.push(value);
        let better = if self.higher_is_better { value > self.best } else { value < self.best };
        if better {
            self.best = value;
            self.best_epoch = epoch;
            self.best_params = params.clone();
        }
        epoch - self.best_epoch >= self.patience
    }

    fn finish(self, model: &mut Model) -> TrainReport {
        model.params = self.best_params;
        TrainReport {
            val_history: self.history,
            best_epoch: self.best_epoch,
            best_val: self.best,
            higher_is_better: self.higher_is_better,
        }
    }
}

fn stream(seed: u64, tag: &str) -> u64 {
    rng::derive_seed(seed, rng::stream_id(tag))
}

/// Sums per-row `(loss, gradients)` in row order.
fn reduce(model: &Model, rows: Vec<(f64, ParamGrads)>) -> (f64, ParamGrads) {
    let mut total = ParamGrads::zeros(&model.params);
    let mut loss = 0.0;
    for (l, g) in rows {
        loss += l;
        total.add_assign(&g);
    }
    (loss, total)
}

fn apply_step(model: &mut Model, opt: &mut AdamState, loss: f64, grads: &ParamGrads, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(what.to_string()));
    }
    opt.step(&mut model.params, grads)
}

struct NtpRow<'a> {
    seq: &'a EventSequence,
    layout: TokenLayout,
    mask: crate::masks::AttentionMask,
    dropout_seed: Option<u64>,
}

/// Layouts and masks for one next-event batch. History-token decisions
/// draw only from `ht_rng`.
fn ntp_rows<'a>(
    batch: &'a PaddedBatch,
    ht: Option<&HTConfig>,
    ht_rng: &mut Rng,
    dropout_seed: Option<u64>,
) -> Result<Vec<NtpRow<'a>>> {
    let plans = match ht {
        Some(cfg) => plan_batch(batch, cfg, ht_rng)?,
        None => None,
    };
    let selection = ht.map(|h| h.selection).unwrap_or_default();
    let layouts = batch_layouts(batch, plans.as_deref())?;
    batch
        .sequences
        .iter()
        .zip(layouts)
        .enumerate()
        .filter(|(_, (s, _))| s.len() >= 2)
        .map(|(i, (seq, layout))| {
            let layout = layout.trimmed();
            let mask = mask_for(&layout, selection, ht_rng)?;
            Ok(NtpRow { seq, layout, mask, dropout_seed: dropout_seed.map(|s| rng::derive_seed(s, i as u64)) })
        })
        .collect()
}

fn ntp_row_grad(model: &Model, row: &NtpRow, weights: &LossWeights, total: usize) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let mut drop_rng = row.dropout_seed.map(rng::seeded);
    let hidden = model.forward(&mut g, &model.params, row.seq, &row.layout, &row.mask, drop_rng.as_mut())?;
    let out = model.ntp_predict(&mut g, &model.params, &hidden);
    let (loss, count) = ntp_loss(&mut g, &out, row.seq, &row.layout, weights)?;
    let w = count as f64 / total as f64;
    let grads = g.backward_with(loss, Tensor::scalar(w));
    let mut pg = ParamGrads::zeros(&model.params);
    grads.accumulate_params(&g, &mut pg);
    Ok((g.value(loss).item() * w, pg))
}

fn ntp_row_loss(model: &Model, row: &NtpRow, weights: &LossWeights) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let hidden = model.forward(&mut g, &model.params, row.seq, &row.layout, &row.mask, None)?;
    let out = model.ntp_predict(&mut g, &model.params, &hidden);
    let (loss, count) = ntp_loss(&mut g, &out, row.seq, &row.layout, weights)?;
    Ok((g.value(loss).item() * count as f64, count))
}

fn supervised_count(rows: &[NtpRow]) -> usize {
    rows.iter().map(|r| crate::objectives::ntp_targets(&r.layout).iter().flatten().count()).sum()
}

fn ntp_validation(model: &Model, val: &Dataset, cfg: &TrainConfig, weights: &LossWeights) -> Result<f64> {
    let batches = make_batches(val, cfg.batch_size, cfg.max_len, stream(cfg.seed, "val-batches"))?;
    let ht_rng = &mut rng::seeded(stream(cfg.seed, "val-ht"));
    let mut sum = 0.0;
    let mut count = 0;
    for batch in &batches {
        let rows = ntp_rows(batch, cfg.ht.as_ref(), ht_rng, None)?;
        for (l, n) in par::try_map(cfg.exec, &rows, |r| ntp_row_loss(model, r, weights))? {
            sum += l;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("validation split has no next-event targets".into()));
    }
    Ok(sum / count as f64)
}

fn coles_embed(model: &Model, g: &mut Graph, seq: &EventSequence, dropout: Option<&mut Rng>) -> Result<crate::diffcore::Var> {
    let layout = TokenLayout::events(&seq.timestamps);
    let mask = crate::masks::causal_mask(&layout)?;
    let hidden = model.forward(g, &model.params, seq, &layout, &mask, dropout)?;
    extract_embedding(g, &hidden, &layout, Pooling::LastToken)
}

/// Subsequences of a batch together with their parent ids.
fn coles_views(batch: &PaddedBatch, k: usize, rng: &mut Rng) -> Vec<(EventSequence, String)> {
    let mut out = Vec::new();
    for s in &batch.sequences {
        // sequences too short to slice carry no contrastive signal
        if let Ok(subs) = sample_subsequences(s, k, rng) {
            out.extend(subs.into_iter().map(|v| (v, s.id.clone())));
        }
    }
    out
}

fn coles_step(model: &Model, views: &[(EventSequence, String)], cfg: &TrainConfig, dropout_seed: Option<u64>) -> Result<Option<(f64, ParamGrads)>> {
    let ids: Vec<String> = views.iter().map(|(_, id)| id.clone()).collect();
    if ids.iter().all(|id| *id == ids[0]) {
        return Ok(None);
    }
    let idx: Vec<usize> = (0..views.len()).collect();
    let forwards = par::try_map(cfg.exec, &idx, |&i| {
        let mut g = Graph::new();
        let mut r = dropout_seed.map(|s| rng::derived(s, i as u64));
        let e = coles_embed(model, &mut g, &views[i].0, r.as_mut())?;
        Ok::<_, Error>((g, e))
    })?;
    let mut lg = Graph::new();
    let inputs: Vec<_> = forwards.iter().map(|(g, e)| lg.input(g.value(*e).clone())).collect();
    let normed: Vec<_> = inputs.iter().map(|v| lg.l2_normalize(*v)).collect();
    let loss = coles_batch_loss(&mut lg, &normed, &ids, cfg.coles_margin)?;
    let loss_value = lg.value(loss).item();
    if dropout_seed.is_none() {
        return Ok(Some((loss_value, ParamGrads::zeros(&model.params))));
    }
    let lgrads = lg.backward(loss);
    let seeds: Vec<Tensor> = inputs.iter().map(|v| lgrads.wrt(&lg, *v)).collect();
    let work: Vec<usize> = (0..forwards.len()).collect();
    let rows = par::map(cfg.exec, &work, |&i| {
        let (g, e) = &forwards[i];
        let grads = g.backward_with(*e, seeds[i].clone());
        let mut pg = ParamGrads::zeros(&model.params);
        grads.accumulate_params(g, &mut pg);
        (0.0, pg)
    });
    let (_, total) = reduce(model, rows);
    Ok(Some((loss_value, total)))
}

fn coles_validation(model: &Model, val: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let batches = make_batches(val, cfg.batch_size, cfg.max_len, stream(cfg.seed, "val-batches"))?;
    let r = &mut rng::seeded(stream(cfg.seed, "val-views"));
    let mut sum = 0.0;
    let mut n = 0;
    for batch in &batches {
        let views = coles_views(batch, cfg.coles_subsequences, r);
        if let Some((l, _)) = coles_step(model, &views, cfg, None)? {
            sum += l;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("validation split yields no contrastive batch".into()));
    }
    Ok(sum / n as f64)
}

/// Self-supervised pretraining with early stopping on validation loss.
/// The model is left at its best-validation parameters.
pub fn pretrain(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let weights = cfg.weights(model);
    weights.validate(model.schema())?;
    let validate = |m: &Model| match cfg.objective {
        Objective::Ntp => ntp_validation(m, val, cfg, &weights),
        Objective::Coles => coles_validation(m, val, cfg),
    };
    let mut stop = EarlyStopping::new(validate(model)?, &model.params, false, cfg.patience);
    let mut opt = AdamState::new(&model.params, cfg.adam());
    let ht_rng = &mut rng::seeded(stream(cfg.seed, "ht"));
    let view_rng = &mut rng::seeded(stream(cfg.seed, "views"));
    let dropout_base = stream(cfg.seed, "dropout");
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(train, cfg.batch_size, cfg.max_len, rng::derive_seed(cfg.seed, epoch as u64))?;
        for (b, batch) in batches.iter().enumerate() {
            let dropout_seed = Some(rng::derive_seed(dropout_base, step));
            step += 1;
            let what = format!("pretraining epoch {epoch} batch {b}");
            match cfg.objective {
                Objective::Ntp => {
                    let rows = ntp_rows(batch, cfg.ht.as_ref(), ht_rng, dropout_seed)?;
                    let total = supervised_count(&rows);
                    if total == 0 {
                        continue;
                    }
                    let out = par::try_map(cfg.exec, &rows, |r| ntp_row_grad(model, r, &weights, total))?;
                    let (loss, grads) = reduce(model, out);
                    apply_step(model, &mut opt, loss, &grads, &what)?;
                }
                Objective::Coles => {
                    let views = coles_views(batch, cfg.coles_subsequences, view_rng);
                    if let Some((loss, grads)) = coles_step(model, &views, cfg, dropout_seed)? {
                        apply_step(model, &mut opt, loss, &grads, &what)?;
                    }
                }
            }
        }
        let v = validate(model)?;
        log::info!("{:?} pretraining epoch {epoch}: validation loss {v:.5}", cfg.objective);
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(format!("validation after epoch {epoch}")));
        }
        if stop.record(epoch, v, &model.params) {
            break;
        }
    }
    Ok(stop.finish(model))
}

fn label_of(seq: &EventSequence, task: &str) -> Result<i64> {
    seq.labels.get(task).copied().ok_or_else(|| Error::Validation {
        id: seq.id.clone(),
        field: task.to_string(),
        msg: "label missing".into(),
    })
}

/// Fraction of `data` the classification head labels correctly.
pub fn classifier_accuracy(model: &Model, data: &Dataset, task: &str, cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty split".into()));
    }
    let hits = par::try_map(cfg.exec, &data.sequences, |s| {
        let s = s.truncate_suffix(cfg.max_len);
        let p = model.predict_proba(&s)?;
        let pred = argmax(&p);
        Ok::<_, Error>((pred as i64 == label_of(&s, task)?) as usize)
    })?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn classifier_row_grad(model: &Model, seq: &EventSequence, task: &str, dropout_seed: u64, scale: f64) -> Result<(f64, ParamGrads)> {
    let label = label_of(seq, task)?;
    let mut g = Graph::new();
    let layout = inference_layout(seq)?;
    let mask = mask_for(&layout, Default::default(), &mut rng::seeded(0))?;
    let mut r = rng::seeded(dropout_seed);
    let hidden = model.forward(&mut g, &model.params, seq, &layout, &mask, Some(&mut r))?;
    let logits = model.classify(&mut g, &model.params, &hidden, &layout)?;
    let loss = supervised_loss(&mut g, logits, label)?;
    let grads = g.backward_with(loss, Tensor::scalar(scale));
    let mut pg = ParamGrads::zeros(&model.params);
    grads.accumulate_params(&g, &mut pg);
    Ok((g.value(loss).item() * scale, pg))
}

/// Trains every parameter of `model` (which must carry a classification
/// head for `task`) with cross-entropy, early-stopping on validation accuracy.
pub fn train_classifier(model: &mut Model, train: &Dataset, val: &Dataset, task: &str, epochs: usize, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    match model.classifier() {
        Some(c) if c.task == task => {}
        _ => return Err(Error::config(format!("model has no classification head for `{task}`"))),
    }
    train.labels(task)?;
    let mut stop = EarlyStopping::new(classifier_accuracy(model, val, task, cfg)?, &model.params, true, cfg.patience);
    let mut opt = AdamState::new(&model.params, cfg.adam());
    let dropout_base = stream(cfg.seed, "sft-dropout");
    let mut step = 0u64;
    for epoch in 1..=epochs {
        let batches = make_batches(train, cfg.batch_size, cfg.max_len, rng::derive_seed(cfg.seed, 1_000 + epoch as u64))?;
        for (b, batch) in batches.iter().enumerate() {
            let base = rng::derive_seed(dropout_base, step);
            step += 1;
            let scale = 1.0 / batch.len() as f64;
            let idx: Vec<usize> = (0..batch.len()).collect();
            let out = par::try_map(cfg.exec, &idx, |&i| {
                classifier_row_grad(model, &batch.sequences[i], task, rng::derive_seed(base, i as u64), scale)
            })?;
            let (loss, grads) = reduce(model, out);
            apply_step(model, &mut opt, loss, &grads, &format!("classifier epoch {epoch} batch {b}"))?;
        }
        let acc = classifier_accuracy(model, val, task, cfg)?;
        log::info!("classifier `{task}` epoch {epoch}: validation accuracy {acc:.4}");
        if stop.record(epoch, acc, &model.params) {
            break;
        }
    }
    Ok(stop.finish(model))
}

/// Replaces the heads of a pretrained model with a classifier for `task`
/// and trains end to end for `cfg.sft_epochs`.
pub fn finetune(pretrained: &Model, train: &Dataset, val: &Dataset, task: &str, classes: usize, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let mut model = pretrained.clone();
    model.set_classifier(task, classes, stream(cfg.seed, "sft-head"))?;
    let report = train_classifier(&mut model, train, val, task, cfg.sft_epochs, cfg)?;
    Ok((model, report))
}
