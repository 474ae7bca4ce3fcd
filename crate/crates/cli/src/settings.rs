//! Layered option resolution: an explicit flag wins over a `--config` file
//! entry, which wins over the built-in default. Config files are plain
//! `key=value` lines where keys match the long flag names; `#` starts a
//! comment. Unknown keys are rejected so typos fail loudly.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::errors::{CliError, CliResult};

pub struct Settings {
    map: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
    source: String,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> CliResult<Settings> {
        let mut map = BTreeMap::new();
        let mut source = String::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            source = path.display().to_string();
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::usage(format!(
                        "{source}:{}: expected `key=value`, got {raw:?}",
                        lineno + 1
                    )));
                };
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Settings {
            map,
            used: RefCell::new(BTreeSet::new()),
            source,
        })
    }

    fn lookup(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.map.get(key).map(String::as_str)
    }

    /// Resolve one option: explicit flag, then config entry, then default.
    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        let entry = self.lookup(key);
        if let Some(v) = flag {
            return Ok(v);
        }
        match entry {
            Some(raw) => raw.parse().map_err(|_| {
                CliError::usage(format!(
                    "{}: bad value {raw:?} for `{key}`",
                    self.source
                ))
            }),
            None => Ok(default),
        }
    }

    /// Resolve a switch that flags can only turn on (e.g. `--no-color`): a
    /// set flag wins, otherwise the config entry decides, default off.
    pub fn get_switch(&self, key: &str, flag: bool) -> CliResult<bool> {
        let entry = self.lookup(key);
        if flag {
            return Ok(true);
        }
        match entry {
            Some(raw) => match raw {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                other => Err(CliError::usage(format!(
                    "{}: bad value {other:?} for `{key}` (expected true/false)",
                    self.source
                ))),
            },
            None => Ok(false),
        }
    }

    /// Reject config keys that no option consumed.
    pub fn finish(&self) -> CliResult<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.map.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::usage(format!(
                "{}: unknown setting(s): {}",
                self.source,
                unknown
                    .iter()
                    .map(|k| format!("`{k}`"))
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "TOWERSEG_THREADS";

/// Resolve the worker-thread count: flag, config entry, `TOWERSEG_THREADS`,
/// then the command's default (all cores for scene-parallel commands, one
/// for training so runs stay bit-reproducible by construction).
pub fn resolve_threads(
    flag: Option<usize>,
    settings: &Settings,
    default_all_cores: bool,
) -> CliResult<usize> {
    let configured = settings.get::<usize>("threads", flag, 0).map(|n| match n {
        0 => None,
        n => Some(n),
    });
    let n = match configured? {
        Some(n) => n,
        None => {
            if flag == Some(0) {
                return Err(CliError::usage("--threads must be at least 1"));
            }
            match std::env::var(THREADS_ENV) {
                Ok(raw) => raw.parse::<usize>().map_err(|_| {
                    CliError::usage(format!("bad {THREADS_ENV} value {raw:?}"))
                })?,
                Err(_) if default_all_cores => {
                    std::thread::available_parallelism().map_or(1, std::num::NonZero::get)
                }
                Err(_) => 1,
            }
        }
    };
    if n == 0 {
        Err(CliError::usage("thread count must be at least 1"))
    } else {
        Ok(n)
    }
}
