//! Flat `key = value` text files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    origin: String,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let location = format!("{origin} line {}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&location, "expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(&location, "empty key"));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::parse(&location, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            entries,
            origin: origin.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parsed value of `key`, if present.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::parse(&self.origin, format!("key `{key}`: {e}")))
            })
            .transpose()
    }

    /// Comma-separated list value of `key`, if present.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim()
                            .parse::<T>()
                            .map_err(|e| Error::parse(&self.origin, format!("key `{key}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Fails on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::parse(&self.origin, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Renders pairs in the given order.
pub fn render(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KeyValues::parse("# run\nsteps = 10\n\ngrid = 1, 2.5,3\n", "test").unwrap();
        assert_eq!(kv.get::<usize>("steps").unwrap(), Some(10));
        assert_eq!(kv.get_list::<f64>("grid").unwrap(), Some(vec![1.0, 2.5, 3.0]));
        assert_eq!(kv.get::<usize>("missing").unwrap(), None);
        assert!(kv.get::<usize>("grid").is_err());
        assert!(kv.reject_unknown(&["steps"]).is_err());
        assert!(kv.reject_unknown(&["steps", "grid"]).is_ok());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("steps 10", "t").is_err());
        assert!(KeyValues::parse("a = 1\na = 2", "t").is_err());
        assert!(KeyValues::parse(" = 2", "t").is_err());
    }
}
