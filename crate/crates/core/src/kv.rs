//! Flat `key = value` text files: one pair per line, `#` starts a comment.
//!
//! Readers consume keys with the typed `take_*` helpers and call
//! [`KvMap::finish`], which rejects any key nobody asked for.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{DisaError, Result};

#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<KvMap> {
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
            let Some((k, v)) = line.split_once('=') else {
                return Err(DisaError::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(DisaError::Config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), (lineno + 1, v.trim().to_string())).is_some() {
                return Err(DisaError::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| DisaError::Config(format!("line {line}: bad value `{v}` for `{key}`: {e}"))),
        }
    }

    /// Overwrite `slot` when the key is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(DisaError::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
}

/// Render pairs in file order.
pub fn render(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let mut m = KvMap::parse("# header\n\na = 3 # trailing\n b=x \n").unwrap();
        assert_eq!(m.take::<usize>("a").unwrap(), Some(3));
        assert_eq!(m.take_str("b").as_deref(), Some("x"));
        m.finish().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut m = KvMap::parse("a = 1\nzzz = 2\n").unwrap();
        m.take::<usize>("a").unwrap();
        let err = m.finish().unwrap_err().to_string();
        assert!(err.contains("zzz"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines_fail() {
        assert!(KvMap::parse("a = 1\na = 2").is_err());
        assert!(KvMap::parse("just words").is_err());
        let mut m = KvMap::parse("a = nope").unwrap();
        assert!(m.take::<usize>("a").is_err());
    }
}
