use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Shape of one generated or ingested dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    /// `|D|`.
    pub n_pairs: usize,
    pub n_observed: usize,
    pub n_test: usize,
    /// Every pair of `D` is observed.
    pub full_observation: bool,
    pub ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub sha256: String,
    pub bytes: u64,
}

/// Index of every artifact under an output directory. Contains no
/// timestamps, so identical runs write identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_hash: String,
    pub datasets: Vec<DatasetInfo>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(dataset_hash: &str) -> Self {
        Self {
            dataset_hash: dataset_hash.to_string(),
            datasets: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Data(format!(
                "no {MANIFEST_FILE} in {}; run gen-data first",
                dir.display()
            )));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Loads the manifest and checks it was written for the same data.
    pub fn load_matching(dir: &Path, dataset_hash: &str) -> Result<Self> {
        let m = Self::load(dir)?;
        if m.dataset_hash != dataset_hash {
            return Err(Error::Config(format!(
                "config does not match the dataset in {} (dataset hash {} vs {})",
                dir.display(),
                dataset_hash,
                m.dataset_hash
            )));
        }
        Ok(m)
    }

    pub fn dataset(&self, seed: u64) -> Result<&DatasetInfo> {
        self.datasets
            .iter()
            .find(|d| d.seed == seed)
            .ok_or_else(|| Error::Data(format!("manifest has no dataset for seed {seed}")))
    }

    /// Hashes the file at `dir/rel` and records it, replacing any entry for
    /// the same path.
    pub fn record(&mut self, dir: &Path, rel: &str, command: &str, config_hash: &str, seed: Option<u64>) -> Result<()> {
        let bytes = fs::read(dir.join(rel))?;
        let entry = ManifestEntry {
            path: rel.to_string(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        };
        self.entries.retain(|e| e.path != rel);
        self.entries.push(entry);
        Ok(())
    }

    pub fn entry(&self, rel: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.path == rel)
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        self.datasets.sort_by_key(|d| d.seed);
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
