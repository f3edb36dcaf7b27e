use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const TOOL: &str = "aro";

/// Written next to every artifact as `<artifact>.prov.json`, together with
/// `<artifact>.config.toml`.
#[derive(Debug, Serialize)]
pub struct Provenance<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    /// Input path → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// The effective configuration after merging defaults, file and flags.
    pub config: &'a RunConfig,
}

fn with_suffix(artifact: &Path, suffix: &str) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    with_suffix(artifact, ".prov.json")
}

/// Effective configuration, loadable again with `--config`.
pub fn config_path(artifact: &Path) -> PathBuf {
    with_suffix(artifact, ".config.toml")
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| aro_core::Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn digests(inputs: &[&Path]) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for p in inputs {
        out.insert(p.display().to_string(), sha256_file(p)?);
        let manifest = aro_core::embeddings::manifest_path(p);
        if manifest.is_file() {
            out.insert(manifest.display().to_string(), sha256_file(&manifest)?);
        }
    }
    Ok(out)
}

pub fn write(artifact: &Path, command: &str, config: &RunConfig, inputs: &[&Path]) -> Result<(), CliError> {
    let record = Provenance {
        tool: TOOL,
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: config.seed,
        inputs: digests(inputs)?,
        config,
    };
    let path = sidecar_path(artifact);
    let mut text = serde_json::to_string_pretty(&record).map_err(aro_core::Error::from)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| aro_core::Error::io(&path, e))?;
    let path = config_path(artifact);
    std::fs::write(&path, config.to_toml()).map_err(|e| aro_core::Error::io(&path, e))?;
    Ok(())
}
