//! Run manifest: the complete record from which an output directory can be
//! regenerated bit for bit (resolved config, certified constants, software
//! version, and every replicate seed).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::CertificateSet;
use crate::config::Config;
use crate::engine::derive_seed;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    WriteFailed {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    /// Wall-clock creation time, seconds since the Unix epoch. Not part of
    /// the reproducibility contract.
    pub created_unix: u64,
    /// Resolved config: sample times explicit, CLI overrides applied.
    pub config: Config,
    pub master_seed: u64,
    /// seed_i = derive_seed(master, "replicate", i); stored so external
    /// tools can replay single replicates without reimplementing the hash.
    pub replicate_seeds: Vec<u64>,
    pub times: Vec<f64>,
    pub certificates: CertificateSet,
}

impl RunManifest {
    /// Builds the manifest for an already resolved config.
    pub fn new(config: Config, certificates: CertificateSet) -> Self {
        let master_seed = config.run.seed;
        let replicate_seeds = (0..config.run.replicates)
            .map(|i| derive_seed(master_seed, "replicate", i as u64))
            .collect();
        let times = config.resolved_times();
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config,
            master_seed,
            replicate_seeds,
            times,
            certificates,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| ManifestError::WriteFailed {
            path: path.to_path_buf(),
            source,
        })
    }
}
