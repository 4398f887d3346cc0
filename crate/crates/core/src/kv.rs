//! Flat `key=value` text, the format of config files and checkpoint headers.
//!
//! Blank lines and lines starting with `#` are ignored; keys and values are
//! trimmed. Duplicate keys are an error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("unknown key {0:?}")]
    Unknown(String),
}

pub type KvMap = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<KvMap, KvError> {
    let mut out = KvMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(KvError::Duplicate { line: i + 1, key });
        }
    }
    Ok(out)
}

/// Renders in key order, one pair per line.
pub fn render(map: &KvMap) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Removes and parses `key`, falling back to `default` when absent.
pub fn take_or<T: FromStr>(map: &mut KvMap, key: &str, default: T) -> Result<T, KvError> {
    match map.remove(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| KvError::Value {
            key: key.to_string(),
            value: v,
        }),
    }
}

pub fn take<T: FromStr>(map: &mut KvMap, key: &str) -> Result<T, KvError> {
    let v = map.remove(key).ok_or_else(|| KvError::Missing(key.to_string()))?;
    v.parse().map_err(|_| KvError::Value {
        key: key.to_string(),
        value: v,
    })
}

pub fn put<T: Display>(map: &mut KvMap, key: &str, value: T) {
    map.insert(key.to_string(), value.to_string());
}

/// Fails on the first key left unconsumed.
pub fn ensure_empty(map: &KvMap) -> Result<(), KvError> {
    match map.keys().next() {
        Some(k) => Err(KvError::Unknown(k.clone())),
        None => Ok(()),
    }
}
