use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use vtpose::config::ExperimentConfig;
use vtpose::training::TrainError;

/// Default output root when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "VTPOSE_OUT";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.toml";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numeric(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 1,
                Failure::Numeric(_) => 3,
            };
        }
        if let Some(TrainError::NonFinite { .. }) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
    }
    2
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn out_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(command))
}

/// Writes the merged experiment config and the command's own settings.
pub fn write_resolved<R: Serialize>(dir: &Path, config: Option<&ExperimentConfig>, run: &R) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if let Some(c) = config {
        c.save(&dir.join(CONFIG_FILE))?;
    }
    let path = dir.join(RUN_FILE);
    std::fs::write(&path, toml::to_string_pretty(run)?).with_context(|| format!("writing {}", path.display()))
}

pub fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
