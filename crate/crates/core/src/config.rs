//! Plain `key = value` text files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! ordering is preserved so that files written by [`KeyValues::render`]
//! are stable byte-for-byte.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if kv.get(key).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            kv.entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Parses `key` if present, leaving `target` untouched otherwise.
    pub fn apply<T: FromStr>(&self, key: &str, target: &mut T) -> Result<()> {
        if let Some(raw) = self.get(key) {
            *target = raw
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{key} = {raw}`")))?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

pub(crate) fn parse_id_list(raw: &str) -> Result<Vec<u8>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u8>()
                .map_err(|_| Error::Config(format!("bad class id `{s}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_renders() {
        let kv = KeyValues::parse("# comment\nlr = 0.01\n\nsteps=500\n").unwrap();
        assert_eq!(kv.get("lr"), Some("0.01"));
        assert_eq!(kv.get("steps"), Some("500"));
        assert_eq!(kv.render(), "lr = 0.01\nsteps = 500\n");
        assert_eq!(KeyValues::parse(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("just text").is_err());
        assert!(KeyValues::parse(" = 3").is_err());
    }

    #[test]
    fn apply_leaves_missing_keys() {
        let kv = KeyValues::parse("x = 4").unwrap();
        let mut x = 1usize;
        let mut y = 2usize;
        kv.apply("x", &mut x).unwrap();
        kv.apply("y", &mut y).unwrap();
        assert_eq!((x, y), (4, 2));
        let bad = KeyValues::parse("x = four").unwrap();
        assert!(bad.apply("x", &mut x).is_err());
    }

    #[test]
    fn id_lists() {
        assert_eq!(parse_id_list("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_id_list("1,x").is_err());
    }
}
