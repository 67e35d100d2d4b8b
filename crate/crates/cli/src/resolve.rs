//! Config-file handling: a flat key = value file whose keys are flag
//! names with underscores. Explicit flags win over file values, file
//! values win over defaults, and unused file keys are errors so typos
//! cannot silently vanish.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::str::FromStr;
use t2s_core::error::{Error, Result};

pub struct FileConfig {
    values: BTreeMap<String, String>,
    used: RefCell<HashSet<String>>,
    path: String,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut name = String::new();
        if let Some(path) = path {
            name = path.display().to_string();
            let text = std::fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| Error::Manifest {
                    path: name.clone(),
                    line: lineno + 1,
                    msg: "expected key = value".into(),
                })?;
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig {
            values,
            used: RefCell::new(HashSet::new()),
            path: name,
        })
    }

    /// Flag > file > default.
    pub fn get<T: FromStr + Copy>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        self.used.borrow_mut().insert(key.to_string());
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::Config(format!("{}: cannot parse {key} = {raw}", self.path))
            }),
        }
    }

    /// Optional value with no default: flag > file > None.
    pub fn get_opt<T: FromStr + Copy>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        self.used.borrow_mut().insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::Config(format!("{}: cannot parse {key} = {raw}", self.path))
            }),
        }
    }

    /// String-valued key: flag > file > None. No parsing to fail.
    pub fn get_str(&self, key: &str, flag: Option<&String>) -> Option<String> {
        self.used.borrow_mut().insert(key.to_string());
        flag.cloned().or_else(|| self.values.get(key).cloned())
    }

    /// Every file key must have been consumed by some `get`.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        for key in self.values.keys() {
            if !used.contains(key) {
                return Err(Error::Config(format!(
                    "{}: unknown config key {key}",
                    self.path
                )));
            }
        }
        Ok(())
    }
}
