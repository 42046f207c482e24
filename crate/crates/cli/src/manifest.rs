//! Run manifests: everything needed to repeat an invocation.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use blindsr_core::config::RunConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;
use crate::failure::{Failure, Outcome};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GIT_REV: &str = env!("BLINDSR_GIT_REV");

/// A fully resolved invocation. Paths are absolute and the explicit config is
/// stored by value, so replaying does not depend on the original config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub command: Command,
    /// Config from `--config`/`--preset`, if one was given.
    pub config: Option<RunConfig>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub invocation: Invocation,
    /// Effective config after applying checkpoints and overrides.
    pub resolved_config: Option<RunConfig>,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub version: String,
    pub git_rev: String,
    #[serde(skip)]
    begun: bool,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// First 16 hex digits of the SHA-256 of the config's TOML rendering.
pub fn config_hash(run: &RunConfig) -> String {
    let digest = Sha256::digest(run.to_toml_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(invocation: &Invocation) -> Self {
        Self {
            subcommand: invocation.command.name().to_string(),
            invocation: invocation.clone(),
            resolved_config: None,
            config_hash: None,
            seed: invocation.seed.unwrap_or_default(),
            out_dir: invocation.out.clone(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_rev: GIT_REV.into(),
            begun: false,
        }
    }

    pub fn path(&self) -> PathBuf {
        self.out_dir.join(MANIFEST_FILE)
    }

    /// Records the effective config and seed, creates the output directory
    /// and writes the manifest. Called before any real work.
    pub fn begin(&mut self, config: Option<&RunConfig>, seed: u64) -> Outcome<()> {
        self.resolved_config = config.cloned();
        self.config_hash = config.map(config_hash);
        self.seed = seed;
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", self.out_dir.display())))?;
        self.write()?;
        self.begun = true;
        Ok(())
    }

    pub fn begun(&self) -> bool {
        self.begun
    }

    pub fn finish(&mut self, status: &str) -> Outcome<()> {
        self.finished_unix = Some(now());
        self.status = status.into();
        self.write()
    }

    fn write(&self) -> Outcome<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Failure::runtime(e.to_string()))?;
        std::fs::write(self.path(), json + "\n")
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", self.path().display())))
    }

    pub fn load(path: &Path) -> Outcome<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{} is not a run manifest: {e}", path.display())))
    }
}
