//! Run provenance. Each command writes exactly one manifest into its output
//! directory, naming the effective config, the seed, the inputs, and every
//! artifact the run produced, so nothing on disk is an orphan.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<String>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub tool_version: String,
}

pub fn tool_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

/// Refuses a non-empty output directory unless forced. Forcing replaces the
/// directory wholesale so stale artifacts cannot mix with fresh ones.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists()
        && dir
            .read_dir()
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some()
    {
        if !force {
            bail!(
                "output directory {} is not empty; pass --force to replace it",
                dir.display()
            );
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

/// Writes the manifest; a directory never gets a second one.
pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        bail!(
            "a manifest already exists in {}; each run directory records exactly one run",
            dir.display()
        );
    }
    fs::write(&path, serde_json::to_vec_pretty(manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
