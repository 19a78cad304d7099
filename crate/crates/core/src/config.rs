//! Run configuration files.
//!
//! ```toml
//! seed = 11
//! warmup_days = 7
//! matchers = ["oracle", "truncated", "tfms"]
//!
//! [paths]
//! workload = "workload"
//! output = "out"
//!
//! [truncation]
//! m = 6
//! k = 300
//! n = 50
//!
//! [tfms]
//! n = 200
//! window_mins = 5
//! lookback_hours = 168
//! fallback = true
//! parallelism = 4
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::TruncationConfig;
use crate::error::{Error, IoContext, Result};
use crate::harness::{MatcherKind, SimConfig, TfmsConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the event and traffic logs.
    pub workload: PathBuf,
    /// Directory reports are written to.
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_warmup")]
    pub warmup_days: u64,
    #[serde(default = "default_matchers")]
    pub matchers: Vec<MatcherKind>,
    #[serde(default = "default_truncation")]
    pub truncation: TruncationConfig,
    #[serde(default)]
    pub tfms: TfmsConfig,
}

fn default_seed() -> u64 {
    SimConfig::default().seed
}

fn default_warmup() -> u64 {
    SimConfig::default().warmup_days
}

fn default_matchers() -> Vec<MatcherKind> {
    SimConfig::default().matchers
}

fn default_truncation() -> TruncationConfig {
    SimConfig::default().truncation
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.sim().validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).io_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.workload, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            warmup_days: self.warmup_days,
            matchers: self.matchers.clone(),
            truncation: self.truncation,
            tfms: self.tfms,
        }
    }
}
