//! Flat `key=value` configuration files and the config hash embedded in
//! every output.
//!
//! One key per line, `#` starts a comment, surrounding whitespace is
//! ignored. Later keys override earlier ones.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{usage_err, Error, Result};

/// Ordered key/value pairs as read from a config file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage_err!("line {}: expected key=value, got '{raw}'", lineno + 1))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(usage_err!("line {}: empty key", lineno + 1));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvMap { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KvMap::parse(&text)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

/// Parses a config value, naming the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| usage_err!("invalid value '{value}' for key '{key}'"))
}

/// Configuration structs that round-trip through a [`KvMap`].
pub trait KvConfig {
    fn write_kv(&self, out: &mut KvMap);

    /// Applies one key. Returns `Ok(false)` when the key is not recognized.
    fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool>;

    fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        self.write_kv(&mut m);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let m = KvMap::parse("# header\n a = 1 \nb=two # trailing\n\n").unwrap();
        assert_eq!(m.get("a"), Some("1"));
        assert_eq!(m.get("b"), Some("two"));
        assert_eq!(m.iter().count(), 2);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(matches!(KvMap::parse("just words"), Err(Error::Usage(_))));
        assert!(matches!(KvMap::parse("=3"), Err(Error::Usage(_))));
    }

    #[test]
    fn hash_is_order_independent() {
        let a = KvMap::parse("x=1\ny=2").unwrap();
        let b = KvMap::parse("y=2\nx=1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let c = KvMap::parse("y=3\nx=1").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn text_round_trip() {
        let a = KvMap::parse("lr=0.00025\nname=minent").unwrap();
        assert_eq!(KvMap::parse(&a.to_text()).unwrap(), a);
    }
}
