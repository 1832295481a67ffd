//! Flat `key=value` text, one pair per line. Keys may carry dotted sections
//! (`stage2.base_lr=0.003`). Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn set_list<V: Display>(&mut self, key: impl Into<String>, values: &[V]) {
        let joined = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        self.entries.insert(key.into(), joined);
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<V>()
                    .map_err(|_| Error::config(format!("cannot parse `{key}={v}`")))
            })
            .transpose()
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)?.ok_or_else(|| Error::config(format!("missing key `{key}`")))
    }

    pub fn get_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        let Some(raw) = self.entries.get(key) else {
            return Ok(None);
        };
        if raw.is_empty() {
            return Ok(Some(Vec::new()));
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<V>()
                    .map_err(|_| Error::config(format!("cannot parse list item `{s}` in `{key}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvMap {
        let p = format!("{prefix}.");
        KvMap {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Insert every entry of `other` under `prefix.`.
    pub fn merge_section(&mut self, prefix: &str, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Overwrite with every entry of `other`.
    pub fn overlay(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_sections() {
        let kv = KvMap::parse("# comment\nstage2.base_lr=0.003\n\nseed = 4\nshots=3,5,10\n").unwrap();
        assert_eq!(kv.require::<u64>("seed").unwrap(), 4);
        assert_eq!(kv.section("stage2").require::<f64>("base_lr").unwrap(), 0.003);
        assert_eq!(kv.get_list::<usize>("shots").unwrap().unwrap(), vec![3, 5, 10]);
        assert!(KvMap::parse("novalue").is_err());
        assert!(kv.require::<u64>("missing").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut kv = KvMap::new();
        kv.set("b.x", 1.5f32);
        kv.set_list("a", &[1, 2]);
        let back = KvMap::parse(&kv.to_text()).unwrap();
        assert_eq!(back, kv);
        assert_eq!(kv.to_text(), "a=1,2\nb.x=1.5\n");
    }
}
