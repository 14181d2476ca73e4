//! Run manifests: what was run, on which inputs, and what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::invocation::Invocation;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// The reproducible part of a manifest. Its digest is the manifest id that
/// every output embeds or is listed under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunKey {
    pub subcommand: String,
    pub config: Invocation,
    pub inputs: Vec<FileDigest>,
    pub seed: Option<u64>,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_id: String,
    #[serde(flatten)]
    pub key: RunKey,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<FileDigest>,
}

impl RunKey {
    pub fn new(config: Invocation) -> Result<Self, CliError> {
        let inputs = config.input_files()?.into_iter().map(|p| digest_file(&p)).collect::<Result<_, _>>()?;
        Ok(Self {
            subcommand: config.subcommand().to_string(),
            seed: config.seed(),
            config,
            inputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("run keys serialize");
        hex(&Sha256::digest(&bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(FileDigest { path: path.to_path_buf(), sha256: digest_bytes(&bytes) })
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Fail unless every recorded input still has the recorded digest.
pub fn verify_inputs(key: &RunKey) -> Result<(), CliError> {
    for recorded in &key.inputs {
        let now = digest_file(&recorded.path)?;
        if now.sha256 != recorded.sha256 {
            return Err(CliError::Input(format!("{} changed since the manifest was written", recorded.path.display())));
        }
    }
    Ok(())
}
