//! Output directories that appear atomically, with a reproduction manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use lids::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "LIDS_OUT";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub version: &'static str,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        let canonical = serde_json::to_vec(&config).unwrap_or_default();
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            seed,
            config_sha256: hex::encode(Sha256::digest(&canonical)),
            config,
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

/// A staging directory renamed into place by [`RunDir::commit`].
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
}

impl RunDir {
    /// `explicit` wins; otherwise `$LIDS_OUT` (or `runs`) plus a per-run name.
    pub fn create(explicit: Option<&Path>, command: &str, seed: u64) -> Result<Self> {
        let target = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
                let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
                root.join(format!("{command}-seed{seed}-{stamp}"))
            }
        };
        if target.exists() && fs::read_dir(&target)?.next().is_some() {
            return Err(Error::Config(format!("output directory {} exists and is not empty", target.display())));
        }
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(Self { staging, target })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.file(name), contents)?;
        Ok(())
    }

    /// Writes the manifest and moves the directory into place.
    pub fn commit(self, manifest: &Manifest) -> Result<PathBuf> {
        self.write("manifest.json", serde_json::to_string_pretty(manifest)?)?;
        if self.target.exists() {
            fs::remove_dir(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)?;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
