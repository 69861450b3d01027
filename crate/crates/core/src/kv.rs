//! Flat `key = value` text format used for configs and corpus specs.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! A `version` key is mandatory. Floats are written with Rust's shortest
//! round-trip formatting, so render followed by parse is exact.

use std::path::Path;

use crate::error::{CedError, Result};

pub const KV_VERSION: u32 = 1;

pub trait KvConfig: Sized + Default {
    fn write_pairs(&self, out: &mut Vec<(String, String)>);
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn validate(&self) -> Result<()>;

    fn to_kv_string(&self) -> String {
        let mut pairs = vec![("version".to_string(), KV_VERSION.to_string())];
        self.write_pairs(&mut pairs);
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn from_kv_str(text: &str, origin: &Path) -> Result<Self> {
        let mut out = Self::default();
        let mut version = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CedError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "version" {
                let v: u32 = parse_value(key, value)?;
                if v != KV_VERSION {
                    return Err(CedError::Version {
                        found: v,
                        expected: KV_VERSION,
                    });
                }
                version = Some(v);
            } else {
                out.set(key, value)?;
            }
        }
        if version.is_none() {
            return Err(CedError::config("version", "missing version key"));
        }
        out.validate()?;
        Ok(out)
    }

    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CedError::io(path, e))?;
        Self::from_kv_str(&text, path)
    }
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CedError::config(key, format!("cannot parse `{value}`")))
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_list(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}
