//! Sectioned `key = value` run configuration (TOML syntax) with
//! `section.key=value` overrides. Every key must exist in the resolved
//! configuration; type and range problems name the offending entry.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::pretrain::TrainConfig;

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "SMART_SEED";

fn to_json(v: toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s),
        toml::Value::Integer(i) => Value::from(i),
        toml::Value::Float(f) => Value::from(f),
        toml::Value::Boolean(b) => Value::Bool(b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.into_iter().map(to_json).collect()),
        toml::Value::Table(t) => Value::Object(t.into_iter().map(|(k, v)| (k, to_json(v))).collect()),
    }
}

/// One `dotted.key = value` assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: Value,
}

/// Parses `section.key=value`; the value is read as a TOML literal and
/// falls back to a bare string (so `strategy=random` works unquoted).
pub fn parse_override(s: &str) -> Result<Assignment> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form section.key=value")))?;
    let key = k.trim().to_string();
    let raw = v.trim();
    let value = match format!("x = {raw}").parse::<toml::Table>() {
        Ok(mut t) => to_json(t.remove("x").expect("parsed key")),
        Err(_) => Value::String(raw.to_string()),
    };
    if key.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    Ok(Assignment { key, value })
}

fn flatten(prefix: &str, v: Value, out: &mut Vec<Assignment>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(Assignment {
            key: prefix.to_string(),
            value: other,
        }),
    }
}

/// Assignments in a config text, in file order of sections.
pub fn parse_text(text: &str) -> Result<Vec<Assignment>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    flatten("", to_json(toml::Value::Table(table)), &mut out);
    Ok(out)
}

fn set_path(root: &mut Value, a: &Assignment) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key `{}`", a.key));
    let parts: Vec<&str> = a.key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = cur.as_object_mut().ok_or_else(unknown)?;
        let slot = obj.get_mut(*p).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::Config(format!("`{}` is a section, not a key", a.key)));
            }
            *slot = a.value.clone();
            return Ok(());
        }
        cur = slot;
    }
    Err(unknown())
}

/// Applies assignments in order on top of `base`, checking each one.
pub fn apply(base: &TrainConfig, assignments: &[Assignment]) -> Result<TrainConfig> {
    let mut doc = serde_json::to_value(base).expect("config serializes");
    for a in assignments {
        set_path(&mut doc, a)?;
        serde_json::from_value::<TrainConfig>(doc.clone())
            .map_err(|e| Error::Config(format!("bad value {} for `{}`: {e}", a.value, a.key)))?;
    }
    Ok(serde_json::from_value(doc).expect("checked above"))
}

/// Resolves a full configuration: profile defaults, then the file, then
/// the environment seed, then command-line overrides; validates the result.
pub fn resolve(profile: &str, file_text: Option<&str>, env_seed: Option<&str>, overrides: &[String]) -> Result<TrainConfig> {
    let cfg = resolve_unchecked(profile, file_text, env_seed, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`resolve`] without the final range validation.
pub fn resolve_unchecked(
    profile: &str,
    file_text: Option<&str>,
    env_seed: Option<&str>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let base = TrainConfig::profile(profile)?;
    let mut assignments = match file_text {
        Some(t) => parse_text(t)?,
        None => Vec::new(),
    };
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        assignments.push(Assignment {
            key: "train.seed".into(),
            value: Value::from(seed),
        });
    }
    for o in overrides {
        assignments.push(parse_override(o)?);
    }
    apply(&base, &assignments)
}

/// Reads a config file and resolves it against the desk defaults.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    resolve("desk", Some(&text), None, overrides)
}

/// The fully materialized configuration as sectioned text.
/// TOML integers are signed 64-bit, so seeds above `i64::MAX` are rejected.
pub fn dump(cfg: &TrainConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("config cannot be written as text: {e}")))
}
