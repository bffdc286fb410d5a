//! Flat key=value run configuration.
//!
//! A config file is a sequence of `key=value` lines; `#` starts a comment
//! and blank lines are ignored. Every command resolves its config against a
//! fixed schema: unknown keys are usage errors (naming the key), missing
//! keys take documented defaults, and the fully resolved key=value list is
//! recorded in the run manifest so a run can be reproduced exactly.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

/// Raw key=value pairs from a config file plus any CLI overrides.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    pairs: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<KvConfig, String> {
        let mut pairs = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = match raw_line.split_once('#') {
                Some((before, _)) => before.trim(),
                None => raw_line.trim(),
            };
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got '{line}'", i + 1))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(format!("line {}: empty key", i + 1));
            }
            if pairs.insert(key.clone(), value).is_some() {
                return Err(format!("line {}: duplicate key '{key}'", i + 1));
            }
        }
        Ok(KvConfig { pairs })
    }

    pub fn from_file(path: &Path) -> Result<KvConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
        KvConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Sets (or overrides) one key, e.g. from a CLI flag.
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.pairs.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }
}

/// Schema-driven reader over a [`KvConfig`]. Each `take_*` call consumes
/// one known key; [`Fields::finish`] rejects whatever was never consumed
/// and returns the resolved key=value list for the manifest.
pub struct Fields<'a> {
    raw: &'a KvConfig,
    taken: Vec<String>,
    resolved: Vec<(String, String)>,
}

impl<'a> Fields<'a> {
    pub fn new(raw: &'a KvConfig) -> Self {
        Fields {
            raw,
            taken: Vec::new(),
            resolved: Vec::new(),
        }
    }

    fn record(&mut self, key: &str, value: String) {
        self.taken.push(key.to_string());
        self.resolved.push((key.to_string(), value));
    }

    /// A typed value with a default.
    pub fn take<T>(&mut self, key: &str, default: T) -> Result<T, String>
    where
        T: FromStr + Display,
    {
        let out = match self.raw.get(key) {
            Some(s) => s
                .parse::<T>()
                .map_err(|_| format!("config key '{key}': cannot parse '{s}'"))?,
            None => default,
        };
        self.record(key, out.to_string());
        Ok(out)
    }

    /// A free-form string with a default.
    pub fn take_str(&mut self, key: &str, default: &str) -> String {
        let out = self.raw.get(key).unwrap_or(default).to_string();
        self.record(key, out.clone());
        out
    }

    /// A string that must be one of the listed choices.
    pub fn take_choice(&mut self, key: &str, default: &str, choices: &[&str]) -> Result<String, String> {
        let out = self.take_str(key, default);
        if !choices.contains(&out.as_str()) {
            return Err(format!(
                "config key '{key}': '{out}' is not one of {}",
                choices.join("|")
            ));
        }
        Ok(out)
    }

    /// An optional string; the empty string (the default) means absent.
    pub fn take_opt(&mut self, key: &str) -> Option<String> {
        let out = self.take_str(key, "");
        (!out.is_empty()).then_some(out)
    }

    /// An optional typed value; empty means absent.
    pub fn take_opt_parsed<T>(&mut self, key: &str) -> Result<Option<T>, String>
    where
        T: FromStr,
    {
        match self.take_opt(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|_| format!("config key '{key}': cannot parse '{s}'")),
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool, String> {
        let out = self.take_str(key, if default { "true" } else { "false" });
        match out.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(format!("config key '{key}': expected true or false, got '{other}'")),
        }
    }

    /// A comma-separated list of floats.
    pub fn take_f64_list(&mut self, key: &str, default: &str) -> Result<Vec<f64>, String> {
        let out = self.take_str(key, default);
        out.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("config key '{key}': cannot parse '{}'", s.trim()))
            })
            .collect()
    }

    /// Rejects unconsumed keys and returns the resolved pairs, sorted.
    pub fn finish(mut self) -> Result<Vec<(String, String)>, String> {
        for key in self.raw.pairs.keys() {
            if !self.taken.iter().any(|t| t == key) {
                return Err(format!("unknown config key '{key}'"));
            }
        }
        self.resolved.sort();
        Ok(self.resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_whitespace() {
        let cfg = KvConfig::parse("# header\n\n  width = 64  # trailing\nseed=7\n").unwrap();
        assert_eq!(cfg.get("width"), Some("64"));
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.get("missing"), None);
    }

    #[test]
    fn rejects_malformed_and_duplicate_lines() {
        assert!(KvConfig::parse("just a line\n").unwrap_err().contains("line 1"));
        assert!(KvConfig::parse("=5\n").unwrap_err().contains("empty key"));
        let err = KvConfig::parse("a=1\na=2\n").unwrap_err();
        assert!(err.contains("duplicate key 'a'"), "{err}");
    }

    #[test]
    fn fields_resolve_defaults_and_reject_unknown_keys() {
        let cfg = KvConfig::parse("width=32\ntypo=1\n").unwrap();
        let mut f = Fields::new(&cfg);
        assert_eq!(f.take("width", 64usize).unwrap(), 32);
        assert_eq!(f.take("height", 64usize).unwrap(), 64);
        let err = f.finish().unwrap_err();
        assert!(err.contains("unknown config key 'typo'"), "{err}");
    }

    #[test]
    fn resolved_pairs_cover_every_schema_key() {
        let cfg = KvConfig::parse("width=32\n").unwrap();
        let mut f = Fields::new(&cfg);
        f.take("width", 64usize).unwrap();
        f.take("height", 64usize).unwrap();
        let resolved = f.finish().unwrap();
        assert_eq!(
            resolved,
            vec![
                ("height".to_string(), "64".to_string()),
                ("width".to_string(), "32".to_string()),
            ]
        );
    }

    #[test]
    fn bad_value_errors_name_the_key() {
        let cfg = KvConfig::parse("width=soon\n").unwrap();
        let mut f = Fields::new(&cfg);
        let err = f.take("width", 64usize).unwrap_err();
        assert!(err.contains("'width'"), "{err}");
    }
}
