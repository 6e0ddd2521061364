//! Flat `key=value` text used for configs and checkpoint metadata.
//! Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{RammError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap(pub BTreeMap<String, String>);

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(RammError::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                )));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvMap(map))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Overwrite `target` with the parsed value when the key is present.
    pub fn read<V: FromStr>(&self, key: &str, target: &mut V) -> Result<()> {
        if let Some(raw) = self.0.get(key) {
            *target = raw
                .parse()
                .map_err(|_| RammError::Config(format!("cannot parse {key}={raw}")))?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_and_read() {
        let kv = KvMap::parse("# comment\n d = 32\n\nrate=0.5\n").unwrap();
        let mut d = 0usize;
        let mut rate = 0.0f64;
        kv.read("d", &mut d).unwrap();
        kv.read("rate", &mut rate).unwrap();
        kv.read("absent", &mut d).unwrap();
        assert_eq!((d, rate), (32, 0.5));
        assert_eq!(KvMap::parse(&kv.render()).unwrap(), kv);
        assert!(KvMap::parse("novalue").is_err());
        assert!(kv.read("rate", &mut d).is_err());
    }
}
