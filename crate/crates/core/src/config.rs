//! Flat `key = value` configuration files with `[section]` headers.
//!
//! Keys inside a section are stored fully qualified (`section.key`). Entry
//! order is preserved so a rendered config reads like the file it came from.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    entries: Vec<(String, String)>,
}

impl Config {
    pub fn new() -> Self {
        Config::default()
    }

    /// Parses config text. `#` starts a comment; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", i + 1)))?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(Error::Config(format!("line {}: bad section name `{name}`", i + 1)));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: bad key `{key}`", i + 1)));
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if cfg.get(&full).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{full}`", i + 1)));
            }
            cfg.entries.push((full, value.trim().to_string()));
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Replaces an existing value or appends a new entry.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Parsed value of `key`, or `None` when absent.
    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("`{key} = {v}`: {e}"))),
        }
    }

    pub fn value_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.value(key)?.unwrap_or(default))
    }

    /// Entries under `section`, keyed without the section prefix.
    pub fn section(&self, section: &str) -> Config {
        let prefix = format!("{section}.");
        Config {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|k| (k.to_string(), v.clone())))
                .collect(),
        }
    }
}

/// Renders section-less keys first, then one block per section in order of
/// first appearance.
impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut sections: Vec<&str> = Vec::new();
        for (k, v) in &self.entries {
            match k.split_once('.') {
                None => writeln!(f, "{k} = {v}")?,
                Some((s, _)) if !sections.contains(&s) => sections.push(s),
                Some(_) => {}
            }
        }
        for s in sections {
            writeln!(f, "\n[{s}]")?;
            for (k, v) in &self.entries {
                if let Some((ks, key)) = k.split_once('.') {
                    if ks == s {
                        writeln!(f, "{key} = {v}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}
