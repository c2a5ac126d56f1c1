//! Line-oriented `key=value` config text.
//!
//! Used for the config block embedded in checkpoints and for files passed to
//! the command line via `--config`. Keys are unique; values run from the
//! first `=` to end of line. Blank lines and lines starting with `#` are
//! skipped. Rendering sorts by key so output is stable.

use std::collections::BTreeMap;

use crate::{Error, Result};

pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(Error::Config {
                field: format!("line {}", lineno + 1),
                msg: format!("expected key=value, got {:?}", line),
            });
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].to_string();
        if key.is_empty() {
            return Err(Error::Config {
                field: format!("line {}", lineno + 1),
                msg: "empty key".to_string(),
            });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config {
                field: key,
                msg: "duplicate key".to_string(),
            });
        }
    }
    Ok(map)
}

pub fn render(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn get_usize(map: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    let raw = map.get(key).ok_or_else(|| Error::Config {
        field: key.to_string(),
        msg: "missing".to_string(),
    })?;
    raw.trim().parse().map_err(|_| Error::Config {
        field: key.to_string(),
        msg: format!("not an unsigned integer: {:?}", raw),
    })
}

pub fn get_f64(map: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    let raw = map.get(key).ok_or_else(|| Error::Config {
        field: key.to_string(),
        msg: "missing".to_string(),
    })?;
    raw.trim().parse().map_err(|_| Error::Config {
        field: key.to_string(),
        msg: format!("not a number: {:?}", raw),
    })
}

pub fn get_str<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key).map(|s| s.as_str()).ok_or_else(|| Error::Config {
        field: key.to_string(),
        msg: "missing".to_string(),
    })
}
