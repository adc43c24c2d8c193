//! Line-oriented `key = value` text documents: the configuration format and
//! the corpus metadata format.
//!
//! Grammar: one `key = value` pair per line, split at the first `=` with
//! both sides trimmed; blank lines and lines starting with `#` are ignored.
//! Keys are unique. Serialization is canonical (`key = value`), so
//! parse → serialize → parse is the identity on the pair list.

use remask_core::{Error, Result};

/// An ordered key/value document with consumption tracking, so a schema
/// reader can report the keys it did not recognize.
#[derive(Debug, Clone)]
pub struct KvDoc {
    pairs: Vec<(String, String)>,
    used: Vec<bool>,
}

impl KvDoc {
    pub fn new() -> Self {
        KvDoc {
            pairs: Vec::new(),
            used: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected `key = value`, got {raw:?}",
                    n + 1
                )));
            };
            doc.push(key.trim(), value.trim())?;
        }
        Ok(doc)
    }

    /// Appends a pair; keys must be unique, single-line, and `=`-free.
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<()> {
        let (key, value) = (key.into(), value.into());
        if key.is_empty() || key.contains(['=', '#']) || key.chars().any(char::is_whitespace) {
            return Err(Error::config(format!(
                "config key {key:?} must be non-empty without whitespace, `=`, or `#`"
            )));
        }
        if value.contains('\n') || value.trim() != value {
            return Err(Error::config(format!(
                "config value for {key:?} must be a single trimmed line"
            )));
        }
        if self.get(&key).is_some() {
            return Err(Error::config(format!("duplicate config key {key:?}")));
        }
        self.pairs.push((key, value));
        self.used.push(false);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Reads a key and marks it consumed (see [`KvDoc::unused_keys`]).
    pub fn take(&mut self, key: &str) -> Option<&str> {
        let i = self.pairs.iter().position(|(k, _)| k == key)?;
        self.used[i] = true;
        Some(self.pairs[i].1.as_str())
    }

    /// Keys never consumed by [`KvDoc::take`], in document order.
    pub fn unused_keys(&self) -> Vec<&str> {
        self.pairs
            .iter()
            .zip(&self.used)
            .filter(|(_, &u)| !u)
            .map(|((k, _), _)| k.as_str())
            .collect()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.pairs {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

impl Default for KvDoc {
    fn default() -> Self {
        Self::new()
    }
}
