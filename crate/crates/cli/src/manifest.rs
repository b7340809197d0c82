use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sphere_guide::checkpoint::write_atomic;
use sphere_guide::rng::stream_seed;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// sha256 of the config snapshot bytes.
    pub config_hash: String,
    pub source_revision: String,
    pub root_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub data_dir: PathBuf,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn source_revision() -> String {
    let git = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output();
    match git {
        Ok(o) if o.status.success() => {
            format!("{}+{}", env!("CARGO_PKG_VERSION"), String::from_utf8_lossy(&o.stdout).trim())
        }
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

impl RunManifest {
    pub fn new(snapshot: &str, root_seed: u64, data_dir: &Path) -> Self {
        let seeds = ["field", "cloud", "rays", "sampler"]
            .into_iter()
            .map(|s| (s.to_string(), stream_seed(root_seed, s)))
            .collect();
        Self {
            config_hash: sha256_hex(snapshot.as_bytes()),
            source_revision: source_revision(),
            root_seed,
            seeds,
            data_dir: data_dir.to_path_buf(),
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            outputs: vec![CONFIG_SNAPSHOT.into()],
            error: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Whether the stored snapshot still hashes to the recorded value.
    pub fn snapshot_matches(&self, dir: &Path) -> bool {
        std::fs::read(dir.join(CONFIG_SNAPSHOT)).is_ok_and(|b| sha256_hex(&b) == self.config_hash)
    }
}
