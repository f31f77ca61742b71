//! End-to-end experiments: data, training of every method, probing and reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EmbedderConfig;
use crate::error::{Error, Result};
use crate::httokens::{HTConfig, Placement};
use crate::masks::Selection;
use crate::model::{Model, Pooling, TransformerConfig};
use crate::par::{self, ExecMode};
use crate::rng;
use crate::seqdata::{compute_time_stats, load_dataset, split_dataset, Dataset, Schema, TimeStats};
use crate::toygen::{self, ToyConfig};

use super::downstream::LogisticRegression;
use super::embed::{extract_embeddings_multi, task_matrix, EmbeddingRecord};
use super::metrics::{accuracy, median, roc_auc};
use super::train::{classifier_accuracy, finetune, pretrain, train_classifier, Objective, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Transformer trained from scratch on each task.
    Supervised,
    /// Causal next-event model, last event state.
    NtpLast,
    /// Causal next-event model, mean of event states.
    NtpAvg,
    /// Contrastive pretraining, last event state.
    Coles,
    /// History-token pretraining, history-token embedding.
    NtpHt,
    /// Causal next-event model, untrained appended history token.
    NtpCls,
    /// History-token model fine-tuned end to end on each task.
    NtpHtSft,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Supervised,
        Method::NtpLast,
        Method::NtpAvg,
        Method::Coles,
        Method::NtpHt,
        Method::NtpCls,
        Method::NtpHtSft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::NtpLast => "ntp-last",
            Method::NtpAvg => "ntp-avg",
            Method::Coles => "coles",
            Method::NtpHt => "ntp-ht",
            Method::NtpCls => "ntp-cls",
            Method::NtpHtSft => "ntp-ht-sft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every configured method on every task.
    #[default]
    Table,
    /// History-token pretraining over a frequency × probability grid.
    Sweep,
}

/// Experiment configuration; every field is a flat key of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// NDJSON dataset; empty means generate the toy dataset.
    pub data: String,
    /// Schema file for `data`.
    pub schema: String,
    pub toy_num_sequences: usize,
    pub toy_num_matrices: usize,
    pub toy_label_vocab: usize,
    pub toy_min_parts: usize,
    pub toy_max_parts: usize,
    pub toy_min_segment: usize,
    pub toy_max_segment: usize,
    pub toy_seed: u64,
    /// Label keys to evaluate; empty means every label found in the data.
    pub tasks: Vec<String>,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub split_seed: u64,

    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub categorical_dim: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub supervised_epochs: usize,
    pub sft_epochs: usize,
    pub patience: usize,
    pub max_len: usize,
    pub ht_frequency: f64,
    pub ht_probability: f64,
    pub ht_placement: Placement,
    pub ht_selection: Selection,
    pub weight_categorical: f64,
    pub weight_numerical: f64,
    pub weight_delta_t: f64,
    pub coles_margin: f64,
    pub coles_subsequences: usize,
    pub coles_batch_size: usize,
    pub coles_epochs: usize,
    pub downstream_l2: f64,

    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub sweep_frequencies: Vec<f64>,
    pub sweep_probabilities: Vec<f64>,
    pub exec: ExecMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let toy = ToyConfig::default();
        let tf = TransformerConfig::default();
        let ht = HTConfig::default();
        ExperimentConfig {
            mode: Mode::Table,
            data: String::new(),
            schema: String::new(),
            toy_num_sequences: toy.num_sequences,
            toy_num_matrices: toy.num_matrices,
            toy_label_vocab: toy.label_vocab,
            toy_min_parts: toy.parts_range.0,
            toy_max_parts: toy.parts_range.1,
            toy_min_segment: toy.segment_length_range.0,
            toy_max_segment: toy.segment_length_range.1,
            toy_seed: toy.seed,
            tasks: Vec::new(),
            split_train: 0.7,
            split_val: 0.15,
            split_test: 0.15,
            split_seed: 0,
            layers: tf.layers,
            d_model: 32,
            heads: tf.heads,
            ff_dim: 64,
            dropout: tf.dropout,
            categorical_dim: 16,
            lr: 1e-3,
            batch_size: 2,
            max_epochs: 20,
            supervised_epochs: 20,
            sft_epochs: 20,
            patience: 5,
            max_len: 512,
            ht_frequency: ht.frequency,
            ht_probability: ht.probability,
            ht_placement: ht.placement,
            ht_selection: ht.selection,
            weight_categorical: 1.0,
            weight_numerical: 1.0,
            weight_delta_t: 1.0,
            coles_margin: crate::objectives::DEFAULT_MARGIN,
            coles_subsequences: crate::objectives::DEFAULT_SUBSEQUENCES,
            coles_batch_size: 16,
            coles_epochs: 10,
            downstream_l2: super::downstream::DEFAULT_L2,
            methods: vec![Method::Supervised, Method::NtpLast, Method::NtpAvg, Method::Coles, Method::NtpHt],
            seeds: vec![0, 1, 2],
            sweep_frequencies: vec![0.0, 0.05, 0.1, 0.2, 0.5],
            sweep_probabilities: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            exec: ExecMode::Parallel,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let cfg: ExperimentConfig = crate::config::load(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        crate::config::to_text(self)
    }

    /// First 16 hex digits of the SHA-256 of the canonical config text.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_text()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.toy().validate()?;
        self.transformer().validate()?;
        self.ht().validate()?;
        self.train(0, Objective::Ntp, None).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.mode == Mode::Table && self.methods.is_empty() {
            return Err(Error::config("at least one method is required"));
        }
        if self.mode == Mode::Sweep && (self.sweep_frequencies.is_empty() || self.sweep_probabilities.is_empty()) {
            return Err(Error::config("sweep needs at least one frequency and one probability"));
        }
        if self.categorical_dim == 0 || self.coles_batch_size < 2 || self.supervised_epochs == 0 || self.coles_epochs == 0 {
            return Err(Error::config("categorical_dim, supervised_epochs, coles_epochs must be positive and coles_batch_size at least 2"));
        }
        if !(self.downstream_l2 > 0.0) {
            return Err(Error::config("downstream_l2 must be positive"));
        }
        Ok(())
    }

    pub fn toy(&self) -> ToyConfig {
        ToyConfig {
            num_matrices: self.toy_num_matrices,
            label_vocab: self.toy_label_vocab,
            parts_range: (self.toy_min_parts, self.toy_max_parts),
            segment_length_range: (self.toy_min_segment, self.toy_max_segment),
            num_sequences: self.toy_num_sequences,
            seed: self.toy_seed,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
        }
    }

    pub fn ht(&self) -> HTConfig {
        HTConfig {
            frequency: self.ht_frequency,
            probability: self.ht_probability,
            placement: self.ht_placement,
            selection: self.ht_selection,
        }
    }

    /// Training settings for one run.
    pub fn train(&self, seed: u64, objective: Objective, ht: Option<HTConfig>) -> TrainConfig {
        TrainConfig {
            objective,
            max_epochs: if objective == Objective::Coles { self.coles_epochs } else { self.max_epochs },
            sft_epochs: self.sft_epochs,
            lr: self.lr,
            batch_size: if objective == Objective::Coles { self.coles_batch_size } else { self.batch_size },
            patience: self.patience,
            seed,
            max_len: self.max_len,
            ht,
            weight_categorical: self.weight_categorical,
            weight_numerical: self.weight_numerical,
            weight_delta_t: self.weight_delta_t,
            coles_margin: self.coles_margin,
            coles_subsequences: self.coles_subsequences,
            exec: self.exec,
        }
    }

    /// The configured dataset, or the toy dataset when no file is given.
    pub fn load_data(&self) -> Result<Dataset> {
        self.load_data_for(None)
    }

    /// Like [`load_data`](Self::load_data), reading `data` with `fallback`
    /// when no schema file is configured.
    pub fn load_data_for(&self, fallback: Option<&Schema>) -> Result<Dataset> {
        if self.data.is_empty() {
            return toygen::generate_dataset(&self.toy());
        }
        let schema = match (self.schema.is_empty(), fallback) {
            (false, _) => Schema::load(&self.schema)?,
            (true, Some(s)) => s.clone(),
            (true, None) => return Err(Error::config("`schema` is required together with `data`")),
        };
        load_dataset(&self.data, &schema)
    }

    pub fn split(&self, data: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
        split_dataset(data, (self.split_train, self.split_val, self.split_test), self.split_seed)
    }

    /// Freshly initialised model for `schema`.
    pub fn build_model(&self, schema: &Schema, time: TimeStats, seed: u64) -> Result<Model> {
        let embed = EmbedderConfig::for_schema(schema, self.categorical_dim, self.d_model, time);
        Model::new(schema, embed, self.transformer(), rng::derive_seed(seed, rng::stream_id("init")))
    }
}

/// One evaluated (method, task, seed) combination.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub task: String,
    pub seed: u64,
    pub frequency: f64,
    pub probability: f64,
    pub accuracy: f64,
    /// Only for binary tasks.
    pub roc_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ResultRow>,
    pub fingerprint: String,
    /// Not part of the CSV, which must be reproducible byte for byte.
    pub wall_clock_secs: f64,
}

pub const CSV_HEADER: &str = "method,task,seed,frequency,probability,accuracy,roc_auc,config";

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let auc = r.roc_auc.map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{},{}",
                r.method, r.task, r.seed, r.frequency, r.probability, r.accuracy, auc, self.fingerprint
            )
            .unwrap();
        }
        out
    }

    /// Median accuracy over seeds for each `(method, task, frequency, probability)`.
    pub fn medians(&self) -> BTreeMap<(Method, String, String, String), f64> {
        let mut groups: BTreeMap<(Method, String, String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.method, r.task.clone(), r.frequency.to_string(), r.probability.to_string()))
                .or_default()
                .push(r.accuracy);
        }
        groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
    }

    /// Median accuracy of `method` on `task` over all rows that match.
    pub fn median_accuracy(&self, method: Method, task: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == method && r.task == task).map(|r| r.accuracy).collect();
        (!v.is_empty()).then(|| median(&v))
    }

    pub fn summary(&self) -> String {
        let mut tasks: Vec<&str> = self.rows.iter().map(|r| r.task.as_str()).collect();
        tasks.sort_unstable();
        tasks.dedup();
        let mut out = String::new();
        writeln!(out, "config {}  wall-clock {:.1}s", self.fingerprint, self.wall_clock_secs).unwrap();
        write!(out, "{:<12} {:>6} {:>6}", "method", "f", "p").unwrap();
        for t in &tasks {
            write!(out, " {:>28}", format!("{t} (median; per seed)")).unwrap();
        }
        out.push('\n');
        let mut keys: Vec<(Method, String, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.method, r.frequency.to_string(), r.probability.to_string());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (m, f, p) in keys {
            write!(out, "{:<12} {:>6} {:>6}", m.name(), f, p).unwrap();
            for t in &tasks {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == m && r.task == *t && r.frequency.to_string() == f && r.probability.to_string() == p)
                    .map(|r| r.accuracy)
                    .collect();
                let cell = if vals.is_empty() {
                    "-".to_string()
                } else {
                    let each: Vec<String> = vals.iter().map(|v| format!("{v:.3}")).collect();
                    format!("{:.3}; {}", median(&vals), each.join(" "))
                };
                write!(out, " {cell:>28}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Prepared data shared by every run of an experiment.
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub tasks: Vec<String>,
    /// Number of classes per task (largest label + 1).
    pub classes: BTreeMap<String, usize>,
    pub time: TimeStats,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    prepare_for(cfg, None)
}

/// [`prepare`] with a schema to fall back on, such as a checkpoint's.
pub fn prepare_for(cfg: &ExperimentConfig, schema: Option<&Schema>) -> Result<Prepared> {
    let data = cfg.load_data_for(schema).map_err(|e| e.in_stage("load data"))?;
    let tasks: Vec<String> = if cfg.tasks.is_empty() {
        let mut t: Vec<String> = data.sequences.iter().flat_map(|s| s.labels.keys().cloned()).collect();
        t.sort();
        t.dedup();
        t
    } else {
        cfg.tasks.clone()
    };
    if tasks.is_empty() {
        return Err(Error::config("dataset carries no labels to evaluate"));
    }
    let mut classes = BTreeMap::new();
    for t in &tasks {
        let labels = data.labels(t)?;
        if labels.iter().any(|l| *l < 0) {
            return Err(Error::config(format!("task `{t}` has negative labels")));
        }
        classes.insert(t.clone(), labels.iter().copied().max().unwrap_or(0) as usize + 1);
    }
    let (train, val, test) = cfg.split(&data).map_err(|e| e.in_stage("split"))?;
    let time = compute_time_stats(&train)?;
    Ok(Prepared { train, val, test, tasks, classes, time })
}

fn probe(
    prep: &Prepared,
    train_emb: &[EmbeddingRecord],
    test_emb: &[EmbeddingRecord],
    l2: f64,
    seed: u64,
) -> Result<Vec<(String, f64, Option<f64>)>> {
    prep.tasks
        .iter()
        .map(|task| {
            let (x, y) = task_matrix(train_emb, task)?;
            let (tx, ty) = task_matrix(test_emb, task)?;
            let lr = LogisticRegression::fit(&x, &y, l2, seed)?;
            let pred: Vec<i64> = tx.iter().map(|v| lr.predict(v)).collect();
            let acc = accuracy(&pred, &ty)?;
            let auc = binary_auc(lr.classes(), &ty, tx.iter().map(|v| lr.predict_proba(v)).collect());
            Ok((task.clone(), acc, auc))
        })
        .collect()
}

fn binary_auc(classes: &[i64], truth: &[i64], probs: Vec<Vec<f64>>) -> Option<f64> {
    if classes.len() != 2 {
        return None;
    }
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let labels: Vec<bool> = truth.iter().map(|t| *t == classes[1]).collect();
    roc_auc(&scores, &labels).ok()
}

fn embed_and_probe(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    model: &Model,
    poolings: &[Pooling],
    seed: u64,
) -> Result<Vec<Vec<(String, f64, Option<f64>)>>> {
    let tr = extract_embeddings_multi(model, &prep.train, poolings, cfg.max_len, cfg.exec)?;
    let te = extract_embeddings_multi(model, &prep.test, poolings, cfg.max_len, cfg.exec)?;
    tr.iter().zip(&te).map(|(a, b)| probe(prep, a, b, cfg.downstream_l2, seed)).collect()
}

fn rows_for(method: Method, seed: u64, ht: &HTConfig, results: Vec<(String, f64, Option<f64>)>) -> Vec<ResultRow> {
    results
        .into_iter()
        .map(|(task, accuracy, roc_auc)| ResultRow {
            method,
            task,
            seed,
            frequency: ht.frequency,
            probability: ht.probability,
            accuracy,
            roc_auc,
        })
        .collect()
}

fn pretrained(cfg: &ExperimentConfig, prep: &Prepared, seed: u64, objective: Objective, ht: Option<HTConfig>, stage: &str) -> Result<Model> {
    log::info!("{stage}");
    let mut model = cfg.build_model(&prep.train.schema, prep.time, seed)?;
    pretrain(&mut model, &prep.train, &prep.val, &cfg.train(seed, objective, ht)).map_err(|e| e.in_stage(stage))?;
    Ok(model)
}

fn run_table_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let has = |m: Method| cfg.methods.contains(&m);
    let ht = cfg.ht();
    let no_ht = HTConfig { probability: 0.0, ..ht };

    if has(Method::Supervised) {
        for task in &prep.tasks {
            let stage = format!("supervised {task} seed {seed}");
            log::info!("{stage}");
            let mut model = cfg.build_model(&prep.train.schema, prep.time, seed)?;
            model.set_classifier(task, prep.classes[task], rng::derive_seed(seed, rng::stream_id("head")))?;
            let tc = cfg.train(seed, Objective::Ntp, None);
            train_classifier(&mut model, &prep.train, &prep.val, task, cfg.supervised_epochs, &tc)
                .map_err(|e| e.in_stage(&stage))?;
            let acc = classifier_accuracy(&model, &prep.test, task, &tc)?;
            rows.push(ResultRow {
                method: Method::Supervised,
                task: task.clone(),
                seed,
                frequency: no_ht.frequency,
                probability: no_ht.probability,
                accuracy: acc,
                roc_auc: None,
            });
        }
    }

    let plain_methods = [(Method::NtpLast, Pooling::LastToken), (Method::NtpAvg, Pooling::MeanTokens), (Method::NtpCls, Pooling::Cls)];
    let wanted: Vec<(Method, Pooling)> = plain_methods.into_iter().filter(|(m, _)| has(*m)).collect();
    if !wanted.is_empty() {
        let stage = format!("pretrain ntp p=0 seed {seed}");
        let model = pretrained(cfg, prep, seed, Objective::Ntp, Some(no_ht), &stage)?;
        let poolings: Vec<Pooling> = wanted.iter().map(|(_, p)| *p).collect();
        let results = embed_and_probe(cfg, prep, &model, &poolings, seed).map_err(|e| e.in_stage(&stage))?;
        for ((m, _), res) in wanted.iter().zip(results) {
            rows.extend(rows_for(*m, seed, &no_ht, res));
        }
    }

    if has(Method::Coles) {
        let stage = format!("pretrain coles seed {seed}");
        let model = pretrained(cfg, prep, seed, Objective::Coles, None, &stage)?;
        let res = embed_and_probe(cfg, prep, &model, &[Pooling::LastToken], seed).map_err(|e| e.in_stage(&stage))?;
        rows.extend(rows_for(Method::Coles, seed, &no_ht, res.into_iter().next().unwrap()));
    }

    if has(Method::NtpHt) || has(Method::NtpHtSft) {
        let stage = format!("pretrain ntp-ht seed {seed}");
        let model = pretrained(cfg, prep, seed, Objective::Ntp, Some(ht), &stage)?;
        if has(Method::NtpHt) {
            let res = embed_and_probe(cfg, prep, &model, &[Pooling::HistoryToken], seed).map_err(|e| e.in_stage(&stage))?;
            rows.extend(rows_for(Method::NtpHt, seed, &ht, res.into_iter().next().unwrap()));
        }
        if has(Method::NtpHtSft) {
            for task in &prep.tasks {
                let stage = format!("finetune {task} seed {seed}");
                log::info!("{stage}");
                let tc = cfg.train(seed, Objective::Ntp, Some(ht));
                let (tuned, _) = finetune(&model, &prep.train, &prep.val, task, prep.classes[task], &tc)
                    .map_err(|e| e.in_stage(&stage))?;
                let acc = classifier_accuracy(&tuned, &prep.test, task, &tc)?;
                rows.push(ResultRow {
                    method: Method::NtpHtSft,
                    task: task.clone(),
                    seed,
                    frequency: ht.frequency,
                    probability: ht.probability,
                    accuracy: acc,
                    roc_auc: None,
                });
            }
        }
    }
    Ok(rows)
}

fn run_sweep_cell(cfg: &ExperimentConfig, prep: &Prepared, seed: u64, frequency: f64, probability: f64) -> Result<Vec<ResultRow>> {
    let ht = HTConfig { frequency, probability, ..cfg.ht() };
    let stage = format!("sweep f={frequency} p={probability} seed {seed}");
    let model = pretrained(cfg, prep, seed, Objective::Ntp, Some(ht), &stage)?;
    let res = embed_and_probe(cfg, prep, &model, &[Pooling::HistoryToken], seed).map_err(|e| e.in_stage(&stage))?;
    Ok(rows_for(Method::NtpHt, seed, &ht, res.into_iter().next().unwrap()))
}

/// Runs every configured method (table mode) or grid cell (sweep mode)
/// for every seed. Rows are ordered by seed, then method or cell, then task.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let start = Instant::now();
    let prep = prepare(cfg)?;
    let rows: Vec<ResultRow> = match cfg.mode {
        Mode::Table => par::try_map(cfg.exec, &cfg.seeds, |s| run_table_seed(cfg, &prep, *s))?.into_iter().flatten().collect(),
        Mode::Sweep => {
            let mut cells = Vec::new();
            for &seed in &cfg.seeds {
                for &f in &cfg.sweep_frequencies {
                    for &p in &cfg.sweep_probabilities {
                        cells.push((seed, f, p));
                    }
                }
            }
            par::try_map(cfg.exec, &cells, |(s, f, p)| run_sweep_cell(cfg, &prep, *s, *f, *p))?.into_iter().flatten().collect()
        }
    };
    Ok(MetricsReport { rows, fingerprint: cfg.fingerprint()?, wall_clock_secs: start.elapsed().as_secs_f64() })
}
