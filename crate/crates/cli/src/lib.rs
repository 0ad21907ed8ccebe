//! Command-line driver and live teleoperation server.

pub mod server;

use std::path::{Path, PathBuf};

use ioda_core::config::parse_switch;
use ioda_core::{Error, ScenarioConfig};

/// Overrides shared by all subcommands.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ioda: Option<bool>,
}

impl Overrides {
    pub fn resolve(&self) -> ioda_core::Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(on) = self.ioda {
            cfg.ioda_enabled = on;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_on_off(v: &str) -> Result<bool, String> {
    parse_switch(v).map_err(|e| e.to_string())
}

/// Failure category reported on stderr, paired with the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Internal = 1,
    Usage = 2,
    Data = 3,
    Io = 4,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Usage => "usage",
            Category::Data => "data",
            Category::Io => "io",
        }
    }

    pub fn of(err: &anyhow::Error) -> Self {
        let Some(e) = err.downcast_ref::<Error>() else {
            return if err.downcast_ref::<std::io::Error>().is_some() {
                Category::Io
            } else {
                Category::Internal
            };
        };
        match e {
            Error::Config(_) | Error::Parse { .. } | Error::InvalidCommand(_) => Category::Usage,
            Error::Io { .. } => Category::Io,
            Error::NonOptimalRollout { .. }
            | Error::InvalidRolloutSet(_)
            | Error::EmptyIndex
            | Error::TooFewStates(_)
            | Error::Mismatch(_)
            | Error::Json(_) => Category::Data,
            _ => Category::Internal,
        }
    }
}

/// `<dir>/<name>.conf` files, sorted by name.
pub fn list_scenarios(dir: &Path) -> std::io::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "conf") {
            if let Some(stem) = path.file_stem() {
                out.push((stem.to_string_lossy().into_owned(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}
