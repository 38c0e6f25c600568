use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::training::{Method, TrainConfig};

/// Where the experiment's data comes from. Exactly one source per config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated MNAR data; seed `s` of the sweep uses generator seed
    /// `synthetic.seed + s`.
    Synthetic(SynthConfig),
    /// Rating files: a Coat-style dense matrix or `user item rating` rows.
    Files(FileSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub train: PathBuf,
    pub test: PathBuf,
    /// A rating is positive iff it exceeds this value.
    #[serde(default = "default_threshold")]
    pub rating_threshold: f64,
}

fn default_threshold() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Size of the sub-instance checked against exhaustive enumeration.
    pub oracle_pairs: usize,
    /// Number of random instances in the bound audit.
    pub random_instances: usize,
    /// Largest `|D|` of a random instance.
    pub max_random_pairs: usize,
    /// Reliability bins `M`.
    pub bins: usize,
    /// Exponent of the popularity heuristic used as a reference propensity.
    pub heuristic_exponent: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            oracle_pairs: 12,
            random_instances: 100,
            max_random_pairs: 100,
            bins: 15,
            heuristic_exponent: 0.5,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_cutoffs() -> Vec<usize> {
    vec![5, 10]
}

/// One experiment: a dataset source, the methods to train, and the seeds to
/// sweep. Read from TOML; keys mirror the library's config structs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// A single method ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    /// ... or several trained on the same data for paired comparison.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Share of observations held out for validation and calibration.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// NDCG cutoffs.
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub audit: AuditConfig,
}

impl ExperimentConfig {
    /// Parses TOML, applies `key.path=value` overrides, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.method, self.methods.is_empty()) {
            (Some(_), false) => return Err(Error::Config("give either `method` or `methods`, not both".into())),
            (None, true) => return Err(Error::Config("no method configured".into())),
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seed list has duplicates".into()));
        }
        let mut methods = self.methods.clone();
        methods.sort_by_key(|m| m.name());
        methods.dedup();
        if methods.len() != self.methods.len() {
            return Err(Error::Config("method list has duplicates".into()));
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::Config("NDCG cutoffs must be non-empty and positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.audit.bins == 0 || self.audit.random_instances == 0 || self.audit.max_random_pairs == 0 {
            return Err(Error::Config("audit sizes must be positive".into()));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.train.validate()
    }

    /// Configured methods in declaration order.
    pub fn methods(&self) -> Vec<Method> {
        match self.method {
            Some(m) => vec![m],
            None => self.methods.clone(),
        }
    }

    /// SHA-256 of the resolved config (output directory excluded), hex.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Hash of the parts that determine the data on disk.
    pub fn dataset_hash(&self) -> String {
        let json = serde_json::to_string(&(&self.dataset, &self.seeds)).expect("config serializes");
        sha256_hex(json.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets a dotted key, e.g. `train.epochs=5` or `dataset.synthetic.seed=3`.
/// The value is read as a TOML literal, falling back to a bare string.
fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
