use std::fs;
use std::path::{Path, PathBuf};

use pod_core::{BaselineMethod, PODConfig, PodError, Result, StudyConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A dataset read from CSV, with everything needed to read it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    pub response: Vec<String>,
    pub categorical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSettings {
    pub method: BaselineMethod,
    pub k_max: usize,
    pub d_max: usize,
    pub alpha: f64,
    pub replicates: usize,
    pub fraction: f64,
    pub seed: u64,
}

/// A fully resolved job: every default is written out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Determine { data: DataSource, config: PODConfig },
    Test { data: DataSource, config: PODConfig, d: usize },
    Simulate { studies: Vec<StudyConfig> },
    Baseline { data: DataSource, settings: BaselineSettings },
}

impl Job {
    pub fn seed(&self) -> u64 {
        match self {
            Job::Determine { config, .. } | Job::Test { config, .. } => config.seed,
            Job::Simulate { studies } => studies[0].seed,
            Job::Baseline { settings, .. } => settings.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(InputDigest {
            path: path.to_owned(),
            sha256: sha256_hex(&read(path)?),
        })
    }
}

/// Everything needed to reproduce a run. Wall-clock timing goes to stdout
/// only, so that repeated runs write identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub seed: u64,
    pub job: Job,
    pub inputs: Vec<InputDigest>,
    /// File names relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read(path)?;
        serde_json::from_slice(&text).map_err(|e| {
            PodError::Config(format!(
                "{}: line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }

    /// Fails when a recorded input no longer matches its digest.
    pub fn check_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = InputDigest::of(&input.path)?;
            if now.sha256 != input.sha256 {
                return Err(PodError::Data(format!(
                    "{} changed since the manifest was written (sha256 {} != {})",
                    input.path.display(),
                    now.sha256,
                    input.sha256
                )));
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| PodError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| PodError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PodError::Numerical(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}
