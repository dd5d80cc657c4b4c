//! Plain-text `key=value` config files. Flags win over the file, the file
//! wins over built-in defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use patchsae_core::{Error, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('_', "-")
}

impl ConfigFile {
    /// Blank lines and lines starting with `#` are ignored. Keys accept
    /// either `-` or `_` as separator.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Argument(format!("config line {}: expected key=value, got {line:?}", i + 1)));
            };
            let key = normalize_key(k);
            if key.is_empty() {
                return Err(Error::Argument(format!("config line {}: empty key", i + 1)));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Argument(format!("config key {key:?} given twice")));
            }
        }
        Ok(ConfigFile { values, used: RefCell::default() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        ConfigFile::parse(&std::fs::read_to_string(path)?)
    }

    fn lookup<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.values.get(key) else { return Ok(None) };
        self.used.borrow_mut().insert(key.to_string());
        raw.parse()
            .map(Some)
            .map_err(|e| Error::Argument(format!("config key {key:?}: cannot parse {raw:?}: {e}")))
    }

    /// Flag value if given, else the config entry, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let from_file = self.lookup(key)?;
        Ok(flag.or(from_file))
    }

    /// Fails on keys the command never asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self.values.keys().filter(|k| !used.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Argument(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_file_default() {
        let cfg = ConfigFile::parse("# comment\nlambda = 0.5\n\nepochs=7\nbatch_size=32\n").unwrap();
        assert_eq!(cfg.pick(Some(0.1), "lambda", 1.0).unwrap(), 0.1);
        assert_eq!(cfg.pick::<usize>(None, "epochs", 200).unwrap(), 7);
        assert_eq!(cfg.pick::<usize>(None, "batch-size", 1).unwrap(), 32);
        assert_eq!(cfg.pick::<u64>(None, "seed", 9).unwrap(), 9);
        cfg.finish().unwrap();
    }

    #[test]
    fn unknown_and_malformed() {
        let cfg = ConfigFile::parse("lambda=0.5\nbogus=1\n").unwrap();
        cfg.pick::<f64>(None, "lambda", 0.0).unwrap();
        assert!(cfg.finish().unwrap_err().to_string().contains("bogus"));
        assert!(ConfigFile::parse("novalue\n").is_err());
        assert!(ConfigFile::parse("a=1\na=2\n").is_err());
        let cfg = ConfigFile::parse("epochs=many\n").unwrap();
        assert!(cfg.pick::<usize>(None, "epochs", 1).is_err());
    }
}
