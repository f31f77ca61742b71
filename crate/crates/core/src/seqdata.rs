//! Event-sequence data model: schema, NDJSON ingestion, splitting, padded
//! batching and time-scale statistics.
//!
//! Dataset files hold one JSON record per line:
//!
//! ```text
//! {"id": "u1", "labels": {"churn": 1}, "events": [{"t": 0.5, "mcc": 3, "amount": 12.0}, ...]}
//! ```
//!
//! Schema files are flat TOML documents, one key per field, in field order:
//!
//! ```text
//! mcc = "categorical:20"
//! amount = "numerical"
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rng;

/// Key holding the timestamp inside each event record.
pub const TIME_KEY: &str = "t";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Categorical { cardinality: usize },
    Numerical,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
}

impl FieldSchema {
    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Self {
        FieldSchema { name: name.into(), kind: FieldKind::Categorical { cardinality } }
    }

    pub fn numerical(name: impl Into<String>) -> Self {
        FieldSchema { name: name.into(), kind: FieldKind::Numerical }
    }
}

/// An ordered, validated list of fields. Categorical and numerical fields
/// keep their relative order; sequences store them in two separate columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    fields: Vec<FieldSchema>,
}

impl Schema {
    pub fn new(fields: Vec<FieldSchema>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &fields {
            if f.name.is_empty() || f.name == TIME_KEY {
                return Err(Error::Schema(format!("invalid field name `{}`", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field `{}`", f.name)));
            }
            if let FieldKind::Categorical { cardinality } = f.kind {
                if cardinality < 2 {
                    return Err(Error::Schema(format!(
                        "field `{}`: cardinality must be at least 2, got {cardinality}",
                        f.name
                    )));
                }
            }
        }
        Ok(Schema { fields })
    }

    pub fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    /// Categorical fields in order, with their cardinalities.
    pub fn categorical(&self) -> impl Iterator<Item = (&str, usize)> {
        self.fields.iter().filter_map(|f| match f.kind {
            FieldKind::Categorical { cardinality } => Some((f.name.as_str(), cardinality)),
            FieldKind::Numerical => None,
        })
    }

    pub fn numerical(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().filter_map(|f| match f.kind {
            FieldKind::Numerical => Some(f.name.as_str()),
            FieldKind::Categorical { .. } => None,
        })
    }

    pub fn num_categorical(&self) -> usize {
        self.categorical().count()
    }

    pub fn num_numerical(&self) -> usize {
        self.numerical().count()
    }

    pub fn parse_toml(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let mut fields = Vec::with_capacity(table.len());
        for (name, value) in table {
            let spec = value
                .as_str()
                .ok_or_else(|| Error::Schema(format!("field `{name}`: expected a string kind")))?;
            let kind = match spec.split_once(':') {
                None if spec == "numerical" => FieldKind::Numerical,
                Some(("categorical", card)) => {
                    let cardinality = card.trim().parse().map_err(|_| {
                        Error::Schema(format!("field `{name}`: bad cardinality `{card}`"))
                    })?;
                    FieldKind::Categorical { cardinality }
                }
                _ => return Err(Error::Schema(format!("field `{name}`: unknown kind `{spec}`"))),
            };
            fields.push(FieldSchema { name, kind });
        }
        Schema::new(fields)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Schema::parse_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for f in &self.fields {
            match f.kind {
                FieldKind::Categorical { cardinality } => {
                    out.push_str(&format!("{} = \"categorical:{cardinality}\"\n", f.name))
                }
                FieldKind::Numerical => out.push_str(&format!("{} = \"numerical\"\n", f.name)),
            }
        }
        out
    }
}

/// One entity's chronologically ordered events, stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    pub id: String,
    pub timestamps: Vec<f64>,
    /// One column per categorical field, in schema order.
    pub categorical: Vec<Vec<u32>>,
    /// One column per numerical field, in schema order.
    pub numerical: Vec<Vec<f64>>,
    pub labels: BTreeMap<String, i64>,
}

impl EventSequence {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let err = |field: &str, msg: String| Error::Validation {
            id: self.id.clone(),
            field: field.to_string(),
            msg,
        };
        let n = self.len();
        if let Some(i) = self.timestamps.iter().position(|t| !t.is_finite()) {
            return Err(err(TIME_KEY, format!("non-finite timestamp at event {i}")));
        }
        if let Some(i) = self.timestamps.windows(2).position(|w| w[1] < w[0]) {
            return Err(err(
                TIME_KEY,
                format!(
                    "timestamps not monotone: {} then {} at event {}",
                    self.timestamps[i],
                    self.timestamps[i + 1],
                    i + 1
                ),
            ));
        }
        if self.categorical.len() != schema.num_categorical() {
            return Err(err("*", "categorical column count differs from schema".into()));
        }
        if self.numerical.len() != schema.num_numerical() {
            return Err(err("*", "numerical column count differs from schema".into()));
        }
        for ((name, card), col) in schema.categorical().zip(&self.categorical) {
            if col.len() != n {
                return Err(err(name, format!("length {} != {n}", col.len())));
            }
            if let Some(i) = col.iter().position(|&c| c as usize >= card) {
                return Err(err(
                    name,
                    format!("code {} at event {i} out of range [0, {card})", col[i]),
                ));
            }
        }
        for (name, col) in schema.numerical().zip(&self.numerical) {
            if col.len() != n {
                return Err(err(name, format!("length {} != {n}", col.len())));
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(err(name, format!("non-finite value at event {i}")));
            }
        }
        Ok(())
    }

    /// Contiguous slice `[start, end)` keeping the id and labels.
    pub fn slice(&self, start: usize, end: usize) -> EventSequence {
        EventSequence {
            id: self.id.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            categorical: self.categorical.iter().map(|c| c[start..end].to_vec()).collect(),
            numerical: self.numerical.iter().map(|c| c[start..end].to_vec()).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Keeps the most recent `max_len` events.
    pub fn truncate_suffix(&self, max_len: usize) -> EventSequence {
        let n = self.len();
        if n <= max_len {
            self.clone()
        } else {
            self.slice(n - max_len, n)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub sequences: Vec<EventSequence>,
}

impl Dataset {
    pub fn new(schema: Schema, sequences: Vec<EventSequence>) -> Result<Self> {
        for s in &sequences {
            s.validate(&schema)?;
        }
        Ok(Dataset { schema, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Labels of `task` in sequence order; errors if any sequence lacks it.
    pub fn labels(&self, task: &str) -> Result<Vec<i64>> {
        self.sequences
            .iter()
            .map(|s| {
                s.labels.get(task).copied().ok_or_else(|| Error::Validation {
                    id: s.id.clone(),
                    field: format!("labels.{task}"),
                    msg: "task label absent".into(),
                })
            })
            .collect()
    }

    pub fn mean_len(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.sequences.iter().map(|s| s.len() as f64).sum::<f64>() / self.len() as f64
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.sequences {
            serde_json::to_writer(&mut out, &record_to_json(&self.schema, s))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ndjson(f)
    }
}

fn record_to_json(schema: &Schema, s: &EventSequence) -> Value {
    let mut rec = Map::new();
    rec.insert("id".into(), Value::String(s.id.clone()));
    let labels: Map<String, Value> =
        s.labels.iter().map(|(k, v)| (k.clone(), Value::from(*v))).collect();
    rec.insert("labels".into(), Value::Object(labels));
    let cat_names: Vec<&str> = schema.categorical().map(|(n, _)| n).collect();
    let num_names: Vec<&str> = schema.numerical().collect();
    let events = (0..s.len())
        .map(|i| {
            let mut ev = Map::new();
            ev.insert(TIME_KEY.into(), Value::from(s.timestamps[i]));
            for (name, col) in cat_names.iter().zip(&s.categorical) {
                ev.insert((*name).into(), Value::from(col[i]));
            }
            for (name, col) in num_names.iter().zip(&s.numerical) {
                ev.insert((*name).into(), Value::from(col[i]));
            }
            Value::Object(ev)
        })
        .collect();
    rec.insert("events".into(), Value::Array(events));
    Value::Object(rec)
}

fn parse_record(schema: &Schema, line_no: usize, line: &str) -> Result<EventSequence> {
    let perr = |msg: String| Error::Parse { line: line_no, msg };
    let value: Value = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| perr("record is not an object".into()))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(perr("missing string `id`".into())),
    };
    let mut labels = BTreeMap::new();
    if let Some(l) = obj.get("labels") {
        let l = l.as_object().ok_or_else(|| perr("`labels` is not an object".into()))?;
        for (k, v) in l {
            let v = v.as_i64().ok_or_else(|| perr(format!("label `{k}` is not an integer")))?;
            labels.insert(k.clone(), v);
        }
    }
    let events = obj
        .get("events")
        .and_then(Value::as_array)
        .ok_or_else(|| perr("missing array `events`".into()))?;

    let cat: Vec<(&str, usize)> = schema.categorical().collect();
    let num: Vec<&str> = schema.numerical().collect();
    let n = events.len();
    let mut seq = EventSequence {
        id,
        timestamps: Vec::with_capacity(n),
        categorical: vec![Vec::with_capacity(n); cat.len()],
        numerical: vec![Vec::with_capacity(n); num.len()],
        labels,
    };
    let verr = |id: &str, field: &str, msg: String| Error::Validation {
        id: id.to_string(),
        field: field.to_string(),
        msg: format!("line {line_no}: {msg}"),
    };
    for (i, ev) in events.iter().enumerate() {
        let ev = ev.as_object().ok_or_else(|| perr(format!("event {i} is not an object")))?;
        let t = ev
            .get(TIME_KEY)
            .and_then(Value::as_f64)
            .ok_or_else(|| verr(&seq.id, TIME_KEY, format!("event {i}: missing numeric `t`")))?;
        seq.timestamps.push(t);
        for (col, (name, _)) in seq.categorical.iter_mut().zip(&cat) {
            let code = ev.get(*name).ok_or_else(|| {
                verr(&seq.id, name, format!("event {i}: missing categorical value"))
            })?;
            let code = code.as_u64().filter(|c| *c <= u32::MAX as u64).ok_or_else(|| {
                verr(&seq.id, name, format!("event {i}: `{code}` is not a non-negative integer"))
            })?;
            col.push(code as u32);
        }
        for (col, name) in seq.numerical.iter_mut().zip(&num) {
            let v = ev
                .get(*name)
                .and_then(Value::as_f64)
                .ok_or_else(|| verr(&seq.id, name, format!("event {i}: missing numeric value")))?;
            col.push(v);
        }
        if let Some(extra) = ev
            .keys()
            .find(|k| k.as_str() != TIME_KEY && !schema.fields().iter().any(|f| &f.name == *k))
        {
            return Err(verr(&seq.id, extra, format!("event {i}: field not in schema")));
        }
    }
    seq.validate(schema).map_err(|e| match e {
        Error::Validation { id, field, msg } => {
            Error::Validation { id, field, msg: format!("line {line_no}: {msg}") }
        }
        other => other,
    })?;
    Ok(seq)
}

/// Reads an NDJSON dataset, validating every record against `schema`.
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(BufReader::new(f), schema)
}

pub fn read_dataset<R: BufRead>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut sequences = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        sequences.push(parse_record(schema, i + 1, &line)?);
    }
    Ok(Dataset { schema: schema.clone(), sequences })
}

/// Deterministic train/val/test partition. The assignment depends only on
/// the set of sequence ids and the seed, not on the input order.
pub fn split_dataset(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::config(format!("split fractions must be positive, got {fractions:?}")));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| dataset.sequences[i].id.cmp(&dataset.sequences[j].id).then(i.cmp(&j)));
    order.shuffle(&mut rng::derived(seed, rng::stream_id("split")));
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok((dataset.subset(train), dataset.subset(val), dataset.subset(test)))
}

/// Rows of one batch; content past `lengths[b]` is padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub sequences: Vec<EventSequence>,
    pub lengths: Vec<usize>,
    /// Padded row length `L`.
    pub width: usize,
}

impl PaddedBatch {
    pub fn from_sequences(sequences: Vec<EventSequence>) -> Self {
        let lengths: Vec<usize> = sequences.iter().map(EventSequence::len).collect();
        let width = lengths.iter().copied().max().unwrap_or(0);
        PaddedBatch { sequences, lengths, width }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn is_pad(&self, row: usize, pos: usize) -> bool {
        pos >= self.lengths[row]
    }

    pub fn pad_count(&self, row: usize) -> usize {
        self.width - self.lengths[row]
    }

    /// Timestamps padded with `0.0`.
    pub fn padded_timestamps(&self) -> Vec<Vec<f64>> {
        self.sequences
            .iter()
            .map(|s| {
                let mut t = s.timestamps.clone();
                t.resize(self.width, 0.0);
                t
            })
            .collect()
    }

    pub fn mean_len(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.lengths.iter().sum::<usize>() as f64 / self.len() as f64
    }
}

/// Shuffles (seeded), chunks and suffix-truncates a dataset into batches.
pub fn make_batches(
    dataset: &Dataset,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<PaddedBatch>> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::config("batch_size and max_len must be at least 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::derived(seed, rng::stream_id("batches")));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            PaddedBatch::from_sequences(
                chunk.iter().map(|&i| dataset.sequences[i].truncate_suffix(max_len)).collect(),
            )
        })
        .collect())
}

/// Time-scale constants for the positional encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeStats {
    /// Smallest time scale.
    pub min_scale: f64,
    /// Largest time scale; never below `min_scale`.
    pub max_scale: f64,
}

impl Default for TimeStats {
    fn default() -> Self {
        TimeStats { min_scale: 1.0, max_scale: 1.0 }
    }
}

impl fmt::Display for TimeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m={} M={}", self.min_scale, self.max_scale)
    }
}

pub const TIME_SCALE_FLOOR: f64 = 1e-6;

/// Linear-interpolation percentile of a sorted slice, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `m` = max(1e-6, 1st percentile of positive timestamps),
/// `M` = max(99th percentile of all timestamps, `m`).
pub fn compute_time_stats(dataset: &Dataset) -> Result<TimeStats> {
    let mut all: Vec<f64> =
        dataset.sequences.iter().flat_map(|s| s.timestamps.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Degenerate("no timestamps to derive a time scale from".into()));
    }
    all.sort_by(f64::total_cmp);
    let positive: Vec<f64> = all.iter().copied().filter(|t| *t > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::Degenerate("all timestamps are non-positive".into()));
    }
    let min_scale = percentile(&positive, 0.01).max(TIME_SCALE_FLOOR);
    let max_scale = percentile(&all, 0.99).max(min_scale);
    Ok(TimeStats { min_scale, max_scale })
}

/// Per-field z-score of numerical columns, fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Standardizer {
        let k = train.schema.num_numerical();
        let mut mean = vec![0.0; k];
        let mut std = vec![1.0; k];
        for f in 0..k {
            let vals: Vec<f64> =
                train.sequences.iter().flat_map(|s| s.numerical[f].iter().copied()).collect();
            if vals.is_empty() {
                continue;
            }
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[f] = mu;
            std[f] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, dataset: &mut Dataset) {
        for s in &mut dataset.sequences {
            for (f, col) in s.numerical.iter_mut().enumerate() {
                for v in col.iter_mut() {
                    *v = (*v - self.mean[f]) / self.std[f];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn schema() -> Schema {
        Schema::new(vec![FieldSchema::categorical("mcc", 4), FieldSchema::numerical("amount")])
            .unwrap()
    }

    fn read(text: &str) -> Result<Dataset> {
        read_dataset(Cursor::new(text), &schema())
    }

    fn seq(id: &str, ts: &[f64]) -> EventSequence {
        EventSequence {
            id: id.into(),
            timestamps: ts.to_vec(),
            categorical: vec![vec![0; ts.len()]],
            numerical: vec![ts.to_vec()],
            labels: BTreeMap::new(),
        }
    }

    fn dataset(seqs: Vec<EventSequence>) -> Dataset {
        Dataset::new(schema(), seqs).unwrap()
    }

    #[test]
    fn schema_rules() {
        assert!(Schema::new(vec![FieldSchema::categorical("a", 1)]).is_err());
        assert!(Schema::new(vec![FieldSchema::numerical("a"), FieldSchema::numerical("a")])
            .is_err());
        let s = Schema::parse_toml("mcc = \"categorical:4\"\namount = \"numerical\"\n").unwrap();
        assert_eq!(s, schema());
        assert_eq!(Schema::parse_toml(&s.to_toml()).unwrap(), s);
        assert!(Schema::parse_toml("x = \"text\"").is_err());
    }

    #[test]
    fn parses_valid_record() {
        let d = read(
            r#"{"id":"a","labels":{"y":1},"events":[{"t":0.0,"mcc":1,"amount":2.5},{"t":1.5,"mcc":3,"amount":-1}]}"#,
        )
        .unwrap();
        assert_eq!(d.len(), 1);
        let s = &d.sequences[0];
        assert_eq!(s.timestamps, vec![0.0, 1.5]);
        assert_eq!(s.categorical, vec![vec![1, 3]]);
        assert_eq!(s.numerical, vec![vec![2.5, -1.0]]);
        assert_eq!(s.labels["y"], 1);
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let e = read(r#"{"id":"a","events":[{"t":3.0,"mcc":0,"amount":0},{"t":1.0,"mcc":0,"amount":0}]}"#)
            .unwrap_err();
        assert!(matches!(e, Error::Validation { ref field, .. } if field == "t"), "{e}");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(read("").unwrap().is_empty());
        assert!(read("\n\n").unwrap().is_empty());
    }

    #[test]
    fn code_equal_to_cardinality_rejected() {
        let e = read(r#"{"id":"a","events":[{"t":0,"mcc":4,"amount":0}]}"#).unwrap_err();
        assert!(matches!(e, Error::Validation { ref field, .. } if field == "mcc"), "{e}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"events\":[]}\n{not json\n";
        match read(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_field_named_in_error() {
        let e = read(r#"{"id":"a","events":[{"t":0,"mcc":0,"amount":0,"zzz":1}]}"#).unwrap_err();
        assert!(matches!(e, Error::Validation { ref field, .. } if field == "zzz"), "{e}");
    }

    #[test]
    fn ndjson_round_trip() {
        let mut s = seq("x", &[0.1, 0.2, 7.25]);
        s.labels.insert("y".into(), 3);
        s.categorical = vec![vec![0, 3, 2]];
        let d = dataset(vec![s, seq("y", &[1.0])]);
        let mut buf = Vec::new();
        d.write_ndjson(&mut buf).unwrap();
        let back = read_dataset(Cursor::new(buf), &schema()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn split_exact_fractions_and_determinism() {
        let d = dataset((0..10).map(|i| seq(&format!("s{i}"), &[1.0])).collect());
        let (a, b, c) = split_dataset(&d, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let again = split_dataset(&d, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.clone(), b.clone(), c.clone()), again);
        let mut ids: Vec<String> =
            [a, b, c].iter().flat_map(|d| d.sequences.iter().map(|s| s.id.clone())).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn split_ignores_input_order() {
        let mut seqs: Vec<EventSequence> = (0..20).map(|i| seq(&format!("s{i}"), &[1.0])).collect();
        let d1 = dataset(seqs.clone());
        seqs.reverse();
        let d2 = dataset(seqs);
        let ids = |d: &Dataset| d.sequences.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        let (a1, _, _) = split_dataset(&d1, (0.5, 0.25, 0.25), 3).unwrap();
        let (a2, _, _) = split_dataset(&d2, (0.5, 0.25, 0.25), 3).unwrap();
        assert_eq!(ids(&a1), ids(&a2));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let d = dataset(vec![seq("a", &[1.0])]);
        assert!(matches!(split_dataset(&d, (0.5, 0.5, 0.5), 1), Err(Error::Config(_))));
        assert!(split_dataset(&d, (1.0, 0.0, 0.0), 1).is_err());
    }

    #[test]
    fn truncation_keeps_suffix() {
        let s = seq("a", &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let d = dataset(vec![s]);
        let b = &make_batches(&d, 1, 3, 0).unwrap()[0];
        // events 3..5 (1-based) are indices 2..5
        assert_eq!(b.sequences[0].timestamps, vec![3.0, 4.0, 5.0]);
        assert_eq!(b.sequences[0].numerical[0], vec![3.0, 4.0, 5.0]);
        assert_eq!(b.lengths, vec![3]);
    }

    #[test]
    fn padding_arithmetic() {
        let b = PaddedBatch::from_sequences(vec![
            seq("a", &[1.0, 2.0, 3.0]),
            seq("b", &[1.0, 2.0, 3.0, 4.0, 5.0]),
        ]);
        assert_eq!(b.width, 5);
        assert_eq!(b.pad_count(0), 2);
        assert!(b.is_pad(0, 3) && !b.is_pad(1, 3));
        assert_eq!(b.padded_timestamps()[0], vec![1.0, 2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_order_is_seeded() {
        let d = dataset((0..30).map(|i| seq(&format!("s{i}"), &[i as f64])).collect());
        let ids = |bs: &[PaddedBatch]| {
            bs.iter().flat_map(|b| b.sequences.iter().map(|s| s.id.clone())).collect::<Vec<_>>()
        };
        let a = make_batches(&d, 4, 10, 11).unwrap();
        let b = make_batches(&d, 4, 10, 11).unwrap();
        let c = make_batches(&d, 4, 10, 12).unwrap();
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(ids(&a), ids(&c));
        assert_eq!(a.len(), 8);
        assert!(make_batches(&d, 0, 10, 1).is_err());
    }

    #[test]
    fn time_stats_match_sorted_percentiles() {
        // Oracle: nearest-rank interpolation written out independently.
        let ts: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let d = dataset(vec![seq("a", &ts)]);
        let st = compute_time_stats(&d).unwrap();
        let positive: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let oracle = |v: &[f64], q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let i = pos as usize;
            v[i] + (v[(i + 1).min(v.len() - 1)] - v[i]) * (pos - i as f64)
        };
        assert!((st.min_scale - oracle(&positive, 0.01)).abs() < 1e-12);
        assert!((st.max_scale - oracle(&ts, 0.99)).abs() < 1e-12);
        assert!((st.min_scale - 1.99).abs() < 1e-12);
        assert!((st.max_scale - 99.0).abs() < 1e-12);
    }

    #[test]
    fn time_stats_single_point_and_degenerate() {
        let d = dataset(vec![seq("a", &[5.0])]);
        let st = compute_time_stats(&d).unwrap();
        assert_eq!(st.min_scale, 5.0);
        assert_eq!(st.max_scale, 5.0);
        let z = dataset(vec![seq("a", &[0.0])]);
        assert!(matches!(compute_time_stats(&z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn standardizer_zero_mean_unit_var() {
        let mut d = dataset(vec![seq("a", &[1.0, 2.0, 3.0]), seq("b", &[4.0, 5.0])]);
        let st = Standardizer::fit(&d);
        st.apply(&mut d);
        let vals: Vec<f64> =
            d.sequences.iter().flat_map(|s| s.numerical[0].iter().copied()).collect();
        let mu = vals.iter().sum::<f64>() / 5.0;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 5.0;
        assert!(mu.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn truncation_preserves_monotonicity(
                mut ts in proptest::collection::vec(0.0f64..1e3, 1..40),
                max_len in 1usize..50,
            ) {
                ts.sort_by(f64::total_cmp);
                let s = seq("p", &ts);
                let t = s.truncate_suffix(max_len);
                prop_assert!(t.validate(&schema()).is_ok());
                prop_assert_eq!(t.len(), ts.len().min(max_len));
                prop_assert_eq!(&t.timestamps[..], &ts[ts.len() - t.len()..]);
            }

            #[test]
            fn split_is_a_partition(n in 3usize..60, seed in any::<u64>()) {
                let d = dataset((0..n).map(|i| seq(&format!("s{i:03}"), &[1.0])).collect());
                let (a, b, c) = split_dataset(&d, (0.6, 0.2, 0.2), seed).unwrap();
                prop_assert_eq!(a.len() + b.len() + c.len(), n);
                let mut ids: Vec<_> = [a, b, c].iter()
                    .flat_map(|d| d.sequences.iter().map(|s| s.id.clone())).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), n);
            }
        }
    }
}
