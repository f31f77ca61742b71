//! Sequence embedding extraction and NDJSON storage.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Pooling};
use crate::par::{self, ExecMode};
use crate::seqdata::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
    pub labels: BTreeMap<String, i64>,
}

/// One record per sequence for each requested pooling, from a single
/// inference pass per sequence. Sequences longer than `max_len` keep their
/// most recent events.
pub fn extract_embeddings_multi(
    model: &Model,
    dataset: &Dataset,
    poolings: &[Pooling],
    max_len: usize,
    exec: ExecMode,
) -> Result<Vec<Vec<EmbeddingRecord>>> {
    let per_seq = par::try_map(exec, &dataset.sequences, |s| {
        let vectors = model.embed(&s.truncate_suffix(max_len), poolings)?;
        Ok::<_, Error>(
            vectors
                .into_iter()
                .map(|vector| EmbeddingRecord { id: s.id.clone(), vector, labels: s.labels.clone() })
                .collect::<Vec<_>>(),
        )
    })?;
    let mut out: Vec<Vec<EmbeddingRecord>> = poolings.iter().map(|_| Vec::with_capacity(dataset.len())).collect();
    for recs in per_seq {
        for (slot, r) in out.iter_mut().zip(recs) {
            slot.push(r);
        }
    }
    Ok(out)
}

pub fn extract_embeddings(model: &Model, dataset: &Dataset, pooling: Pooling, max_len: usize, exec: ExecMode) -> Result<Vec<EmbeddingRecord>> {
    Ok(extract_embeddings_multi(model, dataset, &[pooling], max_len, exec)?.remove(0))
}

pub fn write_embeddings<W: Write>(records: &[EmbeddingRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_embeddings(records: &[EmbeddingRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_embeddings(records, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Feature rows and labels for `task`; errors if any record lacks the label.
pub fn task_matrix(records: &[EmbeddingRecord], task: &str) -> Result<(Vec<Vec<f64>>, Vec<i64>)> {
    let mut x = Vec::with_capacity(records.len());
    let mut y = Vec::with_capacity(records.len());
    for r in records {
        let label = r.labels.get(task).ok_or_else(|| Error::Validation {
            id: r.id.clone(),
            field: task.to_string(),
            msg: "label missing".into(),
        })?;
        x.push(r.vector.clone());
        y.push(*label);
    }
    Ok((x, y))
}
