//! `run-manifest.toml`: resolved configuration, seed, artifact hashes.
//!
//! The creation time is the only non-reproducible field.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use lanemeta::config::{RunConfig, ScenarioConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "run-manifest.toml";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    master_seed: u64,
    created_unix: u64,
    /// Relative path to hex SHA-256.
    artifacts: BTreeMap<String, String>,
    run: &'a RunConfig,
    scenario: &'a ScenarioConfig,
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != FILE_NAME) {
            let rel = path.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
            out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&path)?)));
        }
    }
    Ok(())
}

pub fn write(out_dir: &Path, command: &str, run: &RunConfig, scenario: &ScenarioConfig) -> Result<()> {
    let mut artifacts = BTreeMap::new();
    collect(out_dir, out_dir, &mut artifacts)?;
    let m = Manifest {
        command,
        master_seed: run.master_seed,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        artifacts,
        run,
        scenario,
    };
    std::fs::write(out_dir.join(FILE_NAME), toml::to_string(&m)?)?;
    Ok(())
}
