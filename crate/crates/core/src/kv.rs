//! Plain-text `key = value` documents with optional `[section]` headers.
//!
//! Keys inside a section are addressed as `section.key`. Lines starting with
//! `#` or `;` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: BTreeMap<String, String>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::format("key-value", format!("line {}: bad section", lineno + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format("key-value", format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::format("key-value", format!("line {}: empty key", lineno + 1)));
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            entries.insert(full, value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` when present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("cannot parse `{key}` from `{v}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse_opt(key)?
            .ok_or_else(|| Error::invalid(format!("missing key `{key}`")))
    }

    /// Serializes with entries grouped under their section headers.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current: Option<&str> = None;
        // Unsectioned keys first so they are not captured by a header.
        for (k, v) in self.entries.iter().filter(|(k, _)| !k.contains('.')) {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (k, v) in self.entries.iter().filter(|(k, _)| k.contains('.')) {
            let (section, key) = k.split_once('.').expect("filtered on '.'");
            if current != Some(section) {
                if !out.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = Some(section);
            }
            let _ = writeln!(out, "{key} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let doc = KvDoc::parse("# hi\nseed = 7\n[train]\nlr = 0.5\n; note\n[a]\nb=c d\n").unwrap();
        assert_eq!(doc.get("seed"), Some("7"));
        assert_eq!(doc.require::<f64>("train.lr").unwrap(), 0.5);
        assert_eq!(doc.get("a.b"), Some("c d"));
        let again = KvDoc::parse(&doc.to_text()).unwrap();
        assert_eq!(again, doc);
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(KvDoc::parse("no equals sign").is_err());
        assert!(KvDoc::parse("[open").is_err());
        assert!(KvDoc::parse("x = 1").unwrap().require::<u32>("y").is_err());
    }
}
