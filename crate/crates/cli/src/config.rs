//! Optional key-value configuration file.
//!
//! Every sub-command accepts `--config <path>`. The file holds one
//! `key = value` pair per line (`#` starts a comment); keys are the
//! sub-command's long flag names without the leading dashes, and values are
//! parsed exactly like the flag's value. A flag given on the command line
//! always wins over the file. Keys the invoked sub-command does not define
//! are rejected, as are duplicates.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{usage, CliError};

#[derive(Debug)]
pub struct ConfigFile {
    source: String,
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    /// The no-file configuration: every lookup misses.
    pub fn empty() -> Self {
        Self {
            source: String::new(),
            entries: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "config file {} line {}: expected `key = value`, got `{raw}`",
                    path.display(),
                    idx + 1
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(usage(format!(
                    "config file {} line {}: empty key",
                    path.display(),
                    idx + 1
                )));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(usage(format!(
                    "config file {} line {}: duplicate key `{key}`",
                    path.display(),
                    idx + 1
                )));
            }
        }
        Ok(Self {
            source: path.display().to_string(),
            entries,
        })
    }

    /// Loads `--config` when given, otherwise returns the empty file.
    pub fn from_flag(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::empty()),
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Consumes and parses `key` if the file defines it.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.take_raw(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                usage(format!(
                    "config file {}: key `{key}` value `{raw}`: {e}",
                    self.source
                ))
            }),
        }
    }

    /// Call after every known key was taken; leftovers are unknown keys.
    pub fn finish(self) -> Result<(), CliError> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(first) => Err(usage(format!(
                "config file {}: unknown key `{first}`",
                self.source
            ))),
        }
    }
}

/// Flag value if given, else the config file's, else the default.
pub fn resolve<T: FromStr>(
    flag: Option<T>,
    file: &mut ConfigFile,
    key: &str,
    default: T,
) -> Result<T, CliError>
where
    T::Err: Display,
{
    Ok(flag.or(file.take(key)?).unwrap_or(default))
}

/// Flag value if given, else the config file's; `None` when neither.
pub fn resolve_opt<T: FromStr>(
    flag: Option<T>,
    file: &mut ConfigFile,
    key: &str,
) -> Result<Option<T>, CliError>
where
    T::Err: Display,
{
    Ok(flag.or(file.take(key)?))
}

/// Like [`resolve_opt`], but the value must come from somewhere.
pub fn resolve_required<T: FromStr>(
    flag: Option<T>,
    file: &mut ConfigFile,
    key: &str,
) -> Result<T, CliError>
where
    T::Err: Display,
{
    resolve_opt(flag, file, key)?
        .ok_or_else(|| usage(format!("missing required --{key} (or config key `{key}`)")))
}
