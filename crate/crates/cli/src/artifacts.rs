//! Output directories and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::DatasetInfo;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Stage {
    pub name: String,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedSeeds {
    pub base: u64,
    pub split: u64,
    pub negatives: u64,
    pub removal: u64,
    pub init: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub sequential: bool,
    pub config: &'a ExperimentConfig,
    pub seeds: ResolvedSeeds,
    pub dataset: Option<&'a DatasetInfo>,
    pub inputs: Vec<ArtifactEntry>,
    pub artifacts: Vec<ArtifactEntry>,
    pub stages: Vec<Stage>,
}

/// Stage timer for the manifest.
#[derive(Debug, Default)]
pub struct Stages(Vec<Stage>);

impl Stages {
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push(Stage {
            name: name.to_string(),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// A fresh output directory. Created on the first write, so a command that
/// fails before producing anything leaves nothing behind.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    written: Vec<ArtifactEntry>,
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

impl OutDir {
    /// Refuses a path that already holds files or is a regular file.
    pub fn fresh(root: &Path) -> CliResult<Self> {
        if root.is_file() || is_nonempty_dir(root) {
            return Err(CliError::new(
                "exists",
                format!("{} already exists; outputs are never overwritten", root.display()),
            ));
        }
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Accepts an existing directory, for resumable commands.
    pub fn reuse(root: &Path) -> CliResult<Self> {
        if root.is_file() {
            return Err(CliError::new("exists", format!("{} is a file", root.display())));
        }
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn ensure(&self) -> CliResult<()> {
        fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        self.ensure()?;
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.record(name, bytes);
        Ok(())
    }

    /// Registers a file written by other means.
    pub fn register(&mut self, name: &str) -> CliResult<()> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.written.retain(|a| a.path != name);
        self.written.push(ArtifactEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    pub fn finish(mut self, manifest: ManifestParts<'_>, stages: Stages) -> CliResult<()> {
        let artifacts = std::mem::take(&mut self.written);
        let cfg = manifest.config;
        let m = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: manifest.command,
            sequential: manifest.sequential,
            config: cfg,
            seeds: ResolvedSeeds {
                base: cfg.seeds.base,
                split: cfg.seeds.split(),
                negatives: cfg.seeds.negatives(),
                removal: cfg.seeds.removal(),
                init: cfg.seeds.init(),
            },
            dataset: manifest.dataset,
            inputs: manifest.inputs,
            artifacts,
            stages: stages.0,
        };
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        self.ensure()?;
        let path = self.path(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

pub struct ManifestParts<'a> {
    pub command: &'a str,
    pub sequential: bool,
    pub config: &'a ExperimentConfig,
    pub dataset: Option<&'a DatasetInfo>,
    pub inputs: Vec<ArtifactEntry>,
}

pub fn input_entry(path: &Path) -> CliResult<ArtifactEntry> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(ArtifactEntry {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}
