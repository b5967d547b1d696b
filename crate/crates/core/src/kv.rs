//! Flat `key = value` text files used for configs and their echoes.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// skipped. Duplicate keys are rejected.
pub fn parse(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if out.iter().any(|e| e.key == k) {
            return Err(err(format!("duplicate key `{k}`")));
        }
        out.push(Entry {
            line: i + 1,
            key: k.to_string(),
            value: v.to_string(),
        });
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(e: &Entry, path: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err: T::Err| Error::Parse {
        path: path.to_path_buf(),
        line: e.line,
        msg: format!("bad value for `{}`: {err}", e.key),
    })
}
