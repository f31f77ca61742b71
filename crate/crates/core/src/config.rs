//! Flat typed key-value configuration files with command-line overrides.
//!
//! A configuration is a TOML document without tables. Every key must be
//! known to the target type; values keep the type of the default. An
//! override `--some-key value` replaces `some_key`, parsing `value` by the
//! type of the current entry (comma-separated for arrays).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

fn to_table<T: Serialize>(cfg: &T) -> Result<Table> {
    let text = toml::to_string(cfg).map_err(|e| Error::config(e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::config(e.to_string()))
}

fn from_table<T: DeserializeOwned>(table: &Table) -> Result<T> {
    let text = toml::to_string(table).map_err(|e| Error::config(e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::config(e.to_string()))
}

fn parse_scalar(like: Option<&Value>, raw: &str) -> Result<Value> {
    let raw = raw.trim();
    let bad = |what: &str| Error::config(format!("cannot parse `{raw}` as {what}"));
    Ok(match like {
        Some(Value::Integer(_)) => Value::Integer(raw.parse().map_err(|_| bad("an integer"))?),
        Some(Value::Float(_)) => Value::Float(raw.parse().map_err(|_| bad("a number"))?),
        Some(Value::Boolean(_)) => Value::Boolean(raw.parse().map_err(|_| bad("a boolean"))?),
        Some(Value::String(_)) => Value::String(raw.to_string()),
        Some(other) => return Err(Error::config(format!("unsupported value type {}", other.type_str()))),
        None => {
            if let Ok(i) = raw.parse::<i64>() {
                Value::Integer(i)
            } else if let Ok(f) = raw.parse::<f64>() {
                Value::Float(f)
            } else {
                Value::String(raw.to_string())
            }
        }
    })
}

fn parse_like(existing: &Value, raw: &str) -> Result<Value> {
    match existing {
        Value::Array(items) => {
            if raw.trim().is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            let like = items.first();
            raw.split(',').map(|part| parse_scalar(like, part)).collect::<Result<Vec<_>>>().map(Value::Array)
        }
        other => parse_scalar(Some(other), raw),
    }
}

fn normalise_key(key: &str) -> String {
    key.trim_start_matches('-').replace('-', "_")
}

/// Applies `(key, value)` overrides to `base`.
pub fn apply_overrides<T>(base: &T, overrides: &[(String, String)]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut table = to_table(base)?;
    for (key, raw) in overrides {
        let key = normalise_key(key);
        let existing = table.get(&key).ok_or_else(|| Error::config(format!("unknown configuration key `{key}`")))?;
        let value = parse_like(existing, raw)?;
        table.insert(key, value);
    }
    from_table(&table)
}

/// Merges a flat TOML document onto `base`.
pub fn merge_text<T>(base: &T, text: &str) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let file: Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    let mut table = to_table(base)?;
    for (key, value) in file {
        let Some(existing) = table.get(&key) else {
            return Err(Error::config(format!("unknown configuration key `{key}`")));
        };
        if value.is_table() {
            return Err(Error::config(format!("`{key}`: nested tables are not allowed")));
        }
        // integers are accepted where floats are expected
        let value = match (existing, value) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (Value::Array(ex), Value::Array(items)) if matches!(ex.first(), Some(Value::Float(_))) => {
                Value::Array(items.into_iter().map(|v| if let Value::Integer(i) = v { Value::Float(i as f64) } else { v }).collect())
            }
            (_, v) => v,
        };
        table.insert(key, value);
    }
    from_table(&table)
}

/// `T::default()`, then the file at `path` (if any), then `overrides`.
pub fn load<T>(path: Option<&Path>, overrides: &[(String, String)]) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut cfg = T::default();
    if let Some(p) = path {
        cfg = merge_text(&cfg, &std::fs::read_to_string(p)?)?;
    }
    apply_overrides(&cfg, overrides)
}

/// Canonical flat TOML text of `cfg`.
pub fn to_text<T: Serialize>(cfg: &T) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::config(e.to_string()))
}

/// Splits `--key value` pairs; a bare `--flag` is read as `true`.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let Some(key) = a.strip_prefix("--") else {
            return Err(Error::config(format!("expected `--key value`, got `{a}`")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else if i + 1 < args.len() && !args[i + 1].starts_with("--") {
            out.push((key.to_string(), args[i + 1].clone()));
            i += 2;
        } else {
            out.push((key.to_string(), "true".to_string()));
            i += 1;
        }
    }
    Ok(out)
}
