//! Flat `key=value` text used by configuration files and checkpoint headers.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered `key=value` pairs. Blank lines and lines starting with `#` are
/// skipped when parsing; a repeated key is an error.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if kv.get_raw(k).is_some() {
                return Err(err(format!("duplicate key {k:?}")));
            }
            kv.entries.push((k.to_string(), v.to_string()));
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parsed value of `key`, `None` when absent.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.get_raw(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("cannot parse value {raw:?} for key {key:?}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn read_into<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_get() {
        let kv = KeyValues::parse("# comment\nepochs = 5\n\nalpha=0.25\n", Path::new("c.cfg")).unwrap();
        assert_eq!(kv.get::<usize>("epochs").unwrap(), Some(5));
        assert_eq!(kv.get::<f64>("alpha").unwrap(), Some(0.25));
        assert_eq!(kv.get::<f64>("tau").unwrap(), None);
        assert!(kv.get::<usize>("alpha").is_err());
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(KeyValues::parse("a=1\nnonsense\n", Path::new("c")), Err(Error::Parse { line: 2, .. })));
        assert!(KeyValues::parse("a=1\na=2\n", Path::new("c")).is_err());
        assert!(KeyValues::parse("=2\n", Path::new("c")).is_err());
    }

    #[test]
    fn set_replaces() {
        let mut kv = KeyValues::new();
        kv.set("x", 1);
        kv.set("y", 2);
        kv.set("x", 3);
        assert_eq!(kv.to_text(), "x=3\ny=2\n");
    }
}
