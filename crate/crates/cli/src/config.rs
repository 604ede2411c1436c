//! Flat `key = value` run configuration.
//!
//! Command-line flags win over file entries, which win over defaults. Every
//! command writes the fully resolved set back out so a run can be repeated
//! with `--config <out>/<command>.config`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

#[derive(Debug, Default)]
pub struct KvConfig {
    source: Option<PathBuf>,
    entries: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

pub fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl KvConfig {
    pub fn parse(text: &str, source: Option<&Path>) -> Result<Self> {
        let origin = source.map_or("config".to_string(), |p| p.display().to_string());
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("{origin}:{}: expected `key = value`, got {raw:?}", n + 1);
            };
            let key = k.trim().replace('-', "_");
            if key.is_empty() {
                bail!("{origin}:{}: empty key", n + 1);
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                bail!("{origin}:{}: duplicate key {key}", n + 1);
            }
        }
        Ok(Self {
            source: source.map(Path::to_path_buf),
            entries,
            resolved: BTreeMap::new(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                Self::parse(&text, Some(p))
            }
        }
    }

    fn origin(&self) -> String {
        self.source
            .as_ref()
            .map_or("config".to_string(), |p| p.display().to_string())
    }

    /// Resolves `key` from the flag, then the file; records the result.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let from_file = self.entries.remove(key);
        let value = match (flag, from_file) {
            (Some(v), _) => Some(v),
            (None, Some(raw)) => Some(
                raw.parse::<T>()
                    .map_err(|e| anyhow::anyhow!("{}: invalid value {raw:?} for {key}: {e}", self.origin()))?,
            ),
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn get_or<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.get(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        Ok(self
            .get::<String>(key, flag.map(|p| p.display().to_string()))?
            .map(PathBuf::from))
    }

    pub fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.path(key, flag)?
            .ok_or_else(|| anyhow::anyhow!("missing required setting `{key}` (flag --{})", key.replace('_', "-")))
    }

    /// A boolean switch: a set flag means true, otherwise the file decides.
    pub fn switch(&mut self, key: &str, flag: bool, default: bool) -> Result<bool> {
        let raw = self.entries.remove(key);
        let v = if flag {
            true
        } else if let Some(raw) = raw {
            parse_bool(&raw).ok_or_else(|| anyhow::anyhow!("{}: invalid boolean {raw:?} for {key}", self.origin()))?
        } else {
            default
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Seeds must come from a flag or the file; nothing falls back to the clock.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        self.get("seed", flag)?
            .ok_or_else(|| anyhow::anyhow!("a seed is required: pass --seed or set `seed` in the config"))
    }

    /// Fails on entries no resolver consumed.
    pub fn finish(&self) -> Result<()> {
        if !self.entries.is_empty() {
            let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
            bail!("{}: unknown settings {}", self.origin(), keys.join(", "));
        }
        Ok(())
    }

    pub fn render(&self, command: &str) -> String {
        let mut s = format!("# resolved settings for `qalam {command}`\n");
        for (k, v) in &self.resolved {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Writes `<dir>/<command>.config`.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(format!("{command}.config"));
        fs::write(&path, self.render(command)).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_entries() {
        let mut c = KvConfig::parse("# comment\nseed = 3\nbatch-size = 16 # trailing\n", None).unwrap();
        assert_eq!(c.seed(Some(9)).unwrap(), 9);
        assert_eq!(c.get::<usize>("batch_size", None).unwrap(), Some(16));
        c.finish().unwrap();
        assert_eq!(
            c.render("x"),
            "# resolved settings for `qalam x`\nbatch_size = 16\nseed = 9\n"
        );
    }

    #[test]
    fn rejects_malformed_and_unknown() {
        assert!(KvConfig::parse("seed 3", None).is_err());
        assert!(KvConfig::parse("a = 1\na = 2", None).is_err());
        let c = KvConfig::parse("mystery = 1", None).unwrap();
        assert!(c.finish().is_err());
        let mut c = KvConfig::parse("flag = maybe", None).unwrap();
        assert!(c.switch("flag", false, false).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(KvConfig::default().seed(None).is_err());
    }
}
