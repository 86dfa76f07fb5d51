use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

/// Flat key/value settings: command-line flags win over the config file,
/// which wins over built-in defaults. Every resolved value is recorded so
/// the run manifest can replay it.
#[derive(Debug, Default)]
pub struct Settings {
    file: Table,
    resolved: Table,
}

impl Settings {
    /// Loads a flat TOML file. A run manifest is accepted too; its
    /// `[config]` table is used.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut table: Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(Value::Table(inner)) = table.remove("config") {
            table = inner;
        }
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            bail!("config key `{k}` is a table; config files are flat");
        }
        Ok(Settings {
            file: table,
            resolved: Table::new(),
        })
    }

    fn from_file<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        self.file
            .get(key)
            .map(|v| v.clone().try_into::<T>().with_context(|| format!("config key `{key}` has the wrong type")))
            .transpose()
    }

    fn record<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = Value::try_from(value).with_context(|| format!("recording `{key}`"))?;
        self.resolved.insert(key.to_string(), v);
        Ok(())
    }

    pub fn get<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.record(key, &v)?;
        Ok(v)
    }

    pub fn opt<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v)?;
        }
        Ok(v)
    }

    pub fn require<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.opt(key, flag)?
            .with_context(|| format!("missing required setting `{key}` (flag or config file)"))
    }

    /// Boolean switch: a set flag forces `true`.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        self.get(key, flag.then_some(true), false)
    }

    pub fn resolved(&self) -> &Table {
        &self.resolved
    }
}

pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("bad list item `{s}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = Settings {
            file: "epochs = 7\nlr = 0.5\n".parse().unwrap(),
            resolved: Table::new(),
        };
        assert_eq!(s.get("epochs", Some(3u64), 1).unwrap(), 3);
        assert_eq!(s.get::<f64>("lr", None, 0.1).unwrap(), 0.5);
        assert_eq!(s.get::<u64>("seed", None, 9).unwrap(), 9);
        assert_eq!(s.resolved().len(), 3);
        assert!(s.get::<String>("lr", None, String::new()).is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("5, 5,5").unwrap(), vec![5, 5, 5]);
        assert!(parse_list::<f64>("1,x").is_err());
    }
}
