//! Configuration-driven experiment runner behind the `dce` binary.
//!
//! Every command reads an [`ExperimentConfig`], writes machine-readable
//! artifacts under `output_dir`, and indexes them in `manifest.json`. Each
//! JSON and CSV artifact carries the config hash and seed; binary
//! checkpoints get theirs through their manifest entry.

pub mod audit;
pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use audit::{oracle_comparison, random_audit, AuditInstance, OracleComparison, RandomAudit};
pub use config::{AuditConfig, DatasetSource, ExperimentConfig, FileSource};
pub use manifest::{DatasetInfo, Manifest, ManifestEntry, MANIFEST_FILE};

use crate::calibration::{ece_binned, ece_pairwise, mce_pairwise, ReliabilityReport};
use crate::data::{
    generate_synthetic, load_ratings, read_indexed_tsv, seeded_rng, split_validation, Grid, GroundTruth,
    Interaction, InteractionTable, SynthConfig,
};
use crate::error::{Error, Result};
use crate::estimators::EstimatorAudit;
use crate::metrics::{evaluate, MetricReport};
use crate::propensity::heuristic_propensity;
use crate::training::{pretrain_propensity_stack, train_with_stack, Method, TrainConfig, TrainedStack};

/// Data for one seed of the sweep, as stored under `data/seed-<s>/`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub seed: u64,
    pub table: InteractionTable,
    pub test: Vec<Interaction>,
    pub truth: Option<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetFile {
    config_hash: String,
    dataset_hash: String,
    seed: u64,
    info: DatasetInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<SynthConfig>,
}

/// Metrics of one trained run, as written to `metrics.json` (after
/// training) or `eval.json` (after re-evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub metrics: MetricReport,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub epochs_run: usize,
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub method: Method,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config_hash: String,
    pub seed: u64,
    pub random: RandomAudit,
    /// Whether the oracle sub-instance came from a trained stack or from
    /// random model outputs over the true `p` and `q`.
    pub oracle_source: String,
    pub oracle: OracleComparison,
    /// Method whose trained stack was audited over the full domain.
    pub method: Option<Method>,
    pub raw: Option<EstimatorAudit>,
    pub calibrated: Option<EstimatorAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub name: String,
    pub ece: f64,
    pub mce: f64,
    pub n: usize,
    /// Against the true propensity or relevance grid, when known.
    pub pairwise_ece: Option<f64>,
    pub pairwise_mce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub bins: usize,
    pub reports: Vec<CalibrationEntry>,
}

impl CalibrationSummary {
    pub fn get(&self, name: &str) -> Option<&CalibrationEntry> {
        self.reports.iter().find(|r| r.name == name)
    }
}

fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

fn data_rel(seed: u64, file: &str) -> String {
    format!("data/{}/{file}", seed_dir(seed))
}

fn run_rel(method: Method, seed: u64, file: &str) -> String {
    format!("runs/{}/{}/{file}", method.name(), seed_dir(seed))
}

fn header(config_hash: &str, seed: impl std::fmt::Display) -> String {
    format!("# config_hash={config_hash} seed={seed}\n")
}

fn write_file(out: &Path, rel: &str, contents: &[u8]) -> Result<()> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn write_json<T: Serialize>(out: &Path, rel: &str, value: &T) -> Result<()> {
    write_file(out, rel, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn tsv_with_header(config_hash: &str, seed: u64, rows: &[Interaction]) -> String {
    let mut s = header(config_hash, seed);
    s.push_str("# user\titem\trating\n");
    for x in rows {
        let _ = writeln!(s, "{}\t{}\t{}", x.user, x.item, x.rating);
    }
    s
}

/// Runs `f` once per seed on its own thread and returns results in seed
/// order. The first error, in seed order, wins.
fn fan_out<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || f(s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Data("worker thread panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

/// Reads the files of a [`FileSource`]. Triples are re-indexed through the
/// training file's ids; test rows with ids unseen in training are dropped.
fn load_file_source(src: &FileSource) -> Result<(InteractionTable, Vec<Interaction>)> {
    let (table, ids) = load_ratings(&src.train, src.rating_threshold)?;
    let (test_table, test_ids) = load_ratings(&src.test, src.rating_threshold)?;
    let index = |known: &[i64], id: i64| known.iter().position(|&x| x == id);
    let user_map: Vec<Option<usize>> = test_ids.users.iter().map(|&id| index(&ids.users, id)).collect();
    let item_map: Vec<Option<usize>> = test_ids.items.iter().map(|&id| index(&ids.items, id)).collect();
    let test: Vec<Interaction> = test_table
        .observed()
        .iter()
        .filter_map(|x| {
            Some(Interaction {
                user: user_map[x.user]?,
                item: item_map[x.item]?,
                rating: x.rating,
            })
        })
        .collect();
    if test.is_empty() {
        return Err(Error::Data("no test row matches the training ids".into()));
    }
    Ok((table, test))
}

/// Generates or ingests the data of every seed and writes
/// `data/seed-<s>/{dataset.json, train.tsv, test.tsv[, truth.csv]}`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    if out.join(MANIFEST_FILE).exists() || out.join("data").exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds an experiment; pass --force to overwrite",
                out.display()
            )));
        }
        for sub in ["data", "runs", "audit", "calibration"] {
            let p = out.join(sub);
            if p.exists() {
                fs::remove_dir_all(p)?;
            }
        }
    }
    let hash = cfg.hash();
    let dataset_hash = cfg.dataset_hash();
    let mut manifest = Manifest::new(&dataset_hash);

    let loaded = match &cfg.dataset {
        DatasetSource::Files(src) => Some(load_file_source(src)?),
        DatasetSource::Synthetic(_) => None,
    };
    for &seed in &cfg.seeds {
        let (table, test, truth, generator) = match &cfg.dataset {
            DatasetSource::Synthetic(base) => {
                let gen = SynthConfig {
                    seed: base.seed.wrapping_add(seed),
                    ..base.clone()
                };
                let ds = generate_synthetic(&gen)?;
                (ds.table, ds.test, Some(ds.truth), Some(gen))
            }
            DatasetSource::Files(_) => {
                let (table, test) = loaded.clone().expect("loaded above");
                (table, test, None, None)
            }
        };
        let info = DatasetInfo {
            seed,
            n_users: table.n_users(),
            n_items: table.n_items(),
            n_pairs: table.domain_size(),
            n_observed: table.observed().len(),
            n_test: test.len(),
            full_observation: table.observed().len() == table.domain_size(),
            ground_truth: truth.is_some(),
        };
        write_file(out, &data_rel(seed, "train.tsv"), tsv_with_header(&hash, seed, table.observed()).as_bytes())?;
        write_file(out, &data_rel(seed, "test.tsv"), tsv_with_header(&hash, seed, &test).as_bytes())?;
        let mut files = vec!["train.tsv", "test.tsv"];
        if let Some(t) = &truth {
            let rel = data_rel(seed, "truth.csv");
            t.write_csv(&out.join(&rel))?;
            let body = fs::read_to_string(out.join(&rel))?;
            write_file(out, &rel, (header(&hash, seed) + &body).as_bytes())?;
            files.push("truth.csv");
        }
        let meta = DatasetFile {
            config_hash: hash.clone(),
            dataset_hash: dataset_hash.clone(),
            seed,
            info: info.clone(),
            generator,
        };
        write_json(out, &data_rel(seed, "dataset.json"), &meta)?;
        files.push("dataset.json");
        for f in files {
            manifest.record(out, &data_rel(seed, f), "gen-data", &hash, Some(seed))?;
        }
        manifest.datasets.push(info);
    }
    manifest.save(out)?;
    Ok(manifest)
}

/// Reads back the data of one seed written by [`cmd_gen_data`].
pub fn load_data(out: &Path, seed: u64) -> Result<LoadedData> {
    let meta_path = out.join(data_rel(seed, "dataset.json"));
    if !meta_path.exists() {
        return Err(Error::Data(format!(
            "no dataset for seed {seed} under {}; run gen-data first",
            out.display()
        )));
    }
    let meta: DatasetFile = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    let (nu, ni) = (meta.info.n_users, meta.info.n_items);
    let observed = read_indexed_tsv(&out.join(data_rel(seed, "train.tsv")), nu, ni)?;
    let table = InteractionTable::new(nu, ni, observed)?;
    let test = read_indexed_tsv(&out.join(data_rel(seed, "test.tsv")), nu, ni)?;
    let truth_path = out.join(data_rel(seed, "truth.csv"));
    let truth = if truth_path.exists() {
        let t = GroundTruth::read_csv(&truth_path)?;
        if t.propensity.rows() != nu || t.propensity.cols() != ni {
            return Err(Error::shape(format!("{nu}x{ni}"), format!("{}x{}", t.propensity.rows(), t.propensity.cols())));
        }
        Some(t)
    } else {
        None
    };
    Ok(LoadedData { seed, table, test, truth })
}

fn train_config_for(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

/// Trains every configured method on every seed. Per seed, the propensity
/// stack is pretrained once and shared by all methods that use it. Writes
/// checkpoints and `metrics.json` per run, plus `summary.csv` (and
/// `comparison.csv` for several methods).
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let mut manifest = Manifest::load_matching(out, &cfg.dataset_hash())?;
    let hash = cfg.hash();
    let methods = cfg.methods();

    let per_seed = fan_out(&cfg.seeds, |seed| {
        let data = load_data(out, seed)?;
        let tcfg = train_config_for(cfg, seed);
        let split = split_validation(&data.table, cfg.val_fraction, seed)?;
        let stack = if methods.iter().any(|m| m.uses_propensity()) {
            Some(pretrain_propensity_stack(&data.table, &split, &tcfg)?)
        } else {
            None
        };
        let mut records = Vec::new();
        for &method in &methods {
            let run = train_with_stack(method, &data.table, &split, stack.as_ref(), &tcfg)?;
            let dir = out.join(run_rel(method, seed, ""));
            run.save(&dir)?;
            let metrics = evaluate(|u, i| run.predict(u, i), &data.test, &cfg.cutoffs, false)?;
            let record = RunRecord {
                config_hash: hash.clone(),
                seed,
                method,
                metrics,
                best_epoch: run.best_epoch,
                best_validation_loss: run.best_validation_loss,
                epochs_run: run.history.len(),
            };
            write_json(out, &run_rel(method, seed, "metrics.json"), &record)?;
            records.push(record);
        }
        Ok(records)
    })?;

    let records: Vec<RunRecord> = per_seed.into_iter().flatten().collect();
    for r in &records {
        let dir = out.join(run_rel(r.method, r.seed, ""));
        let mut files: Vec<String> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<std::io::Result<_>>()?;
        files.sort();
        for f in files {
            manifest.record(out, &run_rel(r.method, r.seed, &f), "train", &hash, Some(r.seed))?;
        }
    }
    write_file(out, "runs/summary.csv", summary_csv(cfg, &hash, &records).as_bytes())?;
    manifest.record(out, "runs/summary.csv", "train", &hash, None)?;
    if methods.len() > 1 {
        write_file(out, "runs/comparison.csv", comparison_csv(cfg, &hash, &records).as_bytes())?;
        manifest.record(out, "runs/comparison.csv", "train", &hash, None)?;
    }
    manifest.save(out)?;
    Ok(records)
}

fn metric_columns(m: &MetricReport) -> Vec<(String, f64)> {
    let mut cols = vec![("mse".to_string(), m.mse), ("auc".to_string(), m.auc)];
    cols.extend(m.ndcg.iter().map(|(k, v)| (format!("ndcg@{k}"), *v)));
    cols
}

/// Mean and sample standard deviation (zero for a single seed) of every
/// metric, per method.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryStat> {
    let mut grouped: Vec<(Method, BTreeMap<String, Vec<f64>>)> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    for r in records {
        let pos = match grouped.iter().position(|(m, _)| *m == r.method) {
            Some(p) => p,
            None => {
                grouped.push((r.method, BTreeMap::new()));
                grouped.len() - 1
            }
        };
        for (name, v) in metric_columns(&r.metrics) {
            if !order.contains(&name) {
                order.push(name.clone());
            }
            grouped[pos].1.entry(name).or_default().push(v);
        }
    }
    let mut stats = Vec::new();
    for (method, by_metric) in grouped {
        for name in &order {
            let Some(values) = by_metric.get(name) else { continue };
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            stats.push(SummaryStat {
                method,
                metric: name.clone(),
                n,
                mean,
                std,
            });
        }
    }
    stats
}

fn seeds_label(cfg: &ExperimentConfig) -> String {
    cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

fn summary_csv(cfg: &ExperimentConfig, hash: &str, records: &[RunRecord]) -> String {
    let mut s = header(hash, seeds_label(cfg));
    let Some(first) = records.first() else { return s };
    let names: Vec<String> = metric_columns(&first.metrics).into_iter().map(|(n, _)| n).collect();
    let _ = writeln!(s, "method,seed,{}", names.join(","));
    for r in records {
        let vals: Vec<String> = metric_columns(&r.metrics).iter().map(|(_, v)| format!("{v:?}")).collect();
        let _ = writeln!(s, "{},{},{}", r.method, r.seed, vals.join(","));
    }
    let stats = summarize(records);
    for method in cfg.methods() {
        for (label, pick) in [("mean", true), ("std", false)] {
            let vals: Vec<String> = names
                .iter()
                .map(|n| {
                    stats
                        .iter()
                        .find(|st| st.method == method && &st.metric == n)
                        .map(|st| format!("{:?}", if pick { st.mean } else { st.std }))
                        .unwrap_or_default()
                })
                .collect();
            let _ = writeln!(s, "{method},{label},{}", vals.join(","));
        }
    }
    s
}

/// Per-seed MSE and AUC of every method side by side.
fn comparison_csv(cfg: &ExperimentConfig, hash: &str, records: &[RunRecord]) -> String {
    let mut s = header(hash, seeds_label(cfg));
    let methods = cfg.methods();
    let cols: Vec<String> = methods.iter().flat_map(|m| [format!("{m}.mse"), format!("{m}.auc")]).collect();
    let _ = writeln!(s, "seed,{}", cols.join(","));
    for &seed in &cfg.seeds {
        let mut row = seed.to_string();
        for &m in &methods {
            match records.iter().find(|r| r.seed == seed && r.method == m) {
                Some(r) => {
                    let _ = write!(row, ",{:?},{:?}", r.metrics.mse, r.metrics.auc);
                }
                None => row.push_str(",,"),
            }
        }
        let _ = writeln!(s, "{row}");
    }
    s
}

fn load_run(out: &Path, method: Method, seed: u64) -> Result<TrainedStack> {
    TrainedStack::load(&out.join(run_rel(method, seed, "")))
        .map_err(|e| Error::Data(format!("missing checkpoint for {method}, seed {seed}: {e}")))
}

/// Reloads every checkpoint and recomputes its test metrics into
/// `eval.json`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let mut manifest = Manifest::load_matching(out, &cfg.dataset_hash())?;
    let hash = cfg.hash();
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let data = load_data(out, seed)?;
        for method in cfg.methods() {
            let run = load_run(out, method, seed)?;
            let metrics = evaluate(|u, i| run.predict(u, i), &data.test, &cfg.cutoffs, true)?;
            let record = RunRecord {
                config_hash: hash.clone(),
                seed,
                method,
                metrics,
                best_epoch: run.best_epoch,
                best_validation_loss: run.best_validation_loss,
                epochs_run: run.history.len(),
            };
            let rel = run_rel(method, seed, "eval.json");
            write_json(out, &rel, &record)?;
            manifest.record(out, &rel, "eval", &hash, Some(seed))?;
            records.push(record);
        }
    }
    manifest.save(out)?;
    Ok(records)
}

/// First configured method whose checkpoint holds both a propensity stack
/// and an imputation model, preferring the calibrated one.
fn audited_method(cfg: &ExperimentConfig) -> Option<Method> {
    let methods = cfg.methods();
    [Method::DceDr, Method::DrJl].into_iter().find(|m| methods.contains(m))
}

/// Raw and calibrated scores of a trained DR stack over the full domain.
struct StackGrids {
    prediction: Grid,
    propensity_raw: Grid,
    propensity_calibrated: Grid,
    imputation_raw: Option<Grid>,
    imputation_calibrated: Option<Grid>,
}

fn stack_grids(run: &TrainedStack) -> Result<StackGrids> {
    let prop = run
        .propensity
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} checkpoint has no propensity model", run.method)))?;
    let imputation_raw = run.imputation.as_ref().map(|m| m.score_grid());
    let imputation_calibrated = match (&run.imputation, &run.imputation_bank) {
        (Some(m), Some(b)) => Some(b.calibrated_grid(m, m.n_users(), m.n_items())?),
        (Some(m), None) => Some(m.score_grid()),
        _ => None,
    };
    Ok(StackGrids {
        prediction: run.prediction.score_grid(),
        propensity_raw: prop.raw_grid(),
        propensity_calibrated: prop.calibrated_grid()?,
        imputation_raw,
        imputation_calibrated,
    })
}

fn domain_instance(cfg: &ExperimentConfig, truth: &GroundTruth, prediction: &Grid, pseudo: &Grid, p_hat: &Grid) -> AuditInstance {
    let kind = cfg.train.error_kind;
    let (e0, e1): (Vec<f64>, Vec<f64>) = prediction.as_slice().iter().map(|&r| kind.pair(r)).unzip();
    AuditInstance {
        e0,
        e1,
        pseudo_label: pseudo.as_slice().to_vec(),
        relevance: truth.relevance.as_slice().to_vec(),
        propensity: truth.propensity.as_slice().to_vec(),
        propensity_hat: p_hat.as_slice().to_vec(),
    }
}

fn pick_pairs(x: &AuditInstance, n: usize, seed: u64) -> AuditInstance {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.shuffle(&mut seeded_rng(seed, 51));
    idx.truncate(n);
    let take = |v: &[f64]| idx.iter().map(|&k| v[k]).collect::<Vec<f64>>();
    AuditInstance {
        e0: take(&x.e0),
        e1: take(&x.e1),
        pseudo_label: take(&x.pseudo_label),
        relevance: take(&x.relevance),
        propensity: take(&x.propensity),
        propensity_hat: take(&x.propensity_hat),
    }
}

fn with_binned(
    mut audit: EstimatorAudit,
    bins: usize,
    data: &LoadedData,
    p_hat: &Grid,
    pseudo: &Grid,
) -> Result<EstimatorAudit> {
    let mask = data.table.observation_mask();
    let labels: Vec<u8> = mask.as_slice().iter().map(|&o| u8::from(o)).collect();
    audit.binned_ece_propensity = Some(ece_binned(p_hat.as_slice(), &labels, bins)?.ece);
    let (scores, ratings): (Vec<f64>, Vec<u8>) = data.test.iter().map(|x| (pseudo.get(x.user, x.item), x.rating)).unzip();
    audit.binned_ece_imputation = Some(ece_binned(&scores, &ratings, bins)?.ece);
    Ok(audit)
}

/// Randomized bound audit, oracle sub-instance, and (when a DR-type run
/// exists) full-domain audits of the raw and calibrated stack. Refuses data
/// without ground truth.
pub fn cmd_audit(cfg: &ExperimentConfig) -> Result<Vec<AuditReport>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let mut manifest = Manifest::load_matching(out, &cfg.dataset_hash())?;
    if manifest.datasets.iter().any(|d| !d.ground_truth) {
        return Err(Error::MissingGroundTruth);
    }
    let hash = cfg.hash();
    let method = audited_method(cfg);
    let kind = cfg.train.error_kind;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let data = load_data(out, seed)?;
        let truth = data.truth.as_ref().ok_or(Error::MissingGroundTruth)?;
        let random = random_audit(cfg.audit.random_instances, cfg.audit.max_random_pairs, kind, seed)?;

        let run = match method {
            Some(m) if out.join(run_rel(m, seed, "stack.json")).exists() => Some(load_run(out, m, seed)?),
            _ => None,
        };
        let (oracle_source, oracle_base, raw, calibrated) = match &run {
            Some(run) => {
                let g = stack_grids(run)?;
                let imp_raw = g.imputation_raw.as_ref().expect("DR stacks impute");
                let imp_cal = g.imputation_calibrated.as_ref().expect("DR stacks impute");
                let raw_x = domain_instance(cfg, truth, &g.prediction, imp_raw, &g.propensity_raw);
                let cal_x = domain_instance(cfg, truth, &g.prediction, imp_cal, &g.propensity_calibrated);
                let raw = with_binned(raw_x.audit()?, cfg.audit.bins, &data, &g.propensity_raw, imp_raw)?;
                let cal = with_binned(cal_x.audit()?, cfg.audit.bins, &data, &g.propensity_calibrated, imp_cal)?;
                ("trained-stack", cal_x, Some(raw), Some(cal))
            }
            None => {
                let mut rng = seeded_rng(seed, 52);
                let (nu, ni) = (data.table.n_users(), data.table.n_items());
                let mut random_grid = || Grid::from_fn(nu, ni, |_, _| rng.gen_range(0.01..0.99));
                let prediction = random_grid();
                let pseudo = random_grid();
                let p_hat = truth.propensity.map(|p| (p + 0.05).min(1.0));
                ("random-models", domain_instance(cfg, truth, &prediction, &pseudo, &p_hat), None, None)
            }
        };
        let oracle = oracle_comparison(&pick_pairs(&oracle_base, cfg.audit.oracle_pairs, seed))?;
        let report = AuditReport {
            config_hash: hash.clone(),
            seed,
            random,
            oracle_source: oracle_source.to_string(),
            oracle,
            method: run.as_ref().map(|r| r.method),
            raw,
            calibrated,
        };
        let rel = format!("audit/{}.json", seed_dir(seed));
        write_json(out, &rel, &report)?;
        manifest.record(out, &rel, "audit", &hash, Some(seed))?;
        reports.push(report);
    }
    manifest.save(out)?;
    Ok(reports)
}

/// Method whose propensity stack the calibration report describes.
fn reported_method(cfg: &ExperimentConfig) -> Result<Method> {
    let methods = cfg.methods();
    [Method::DceDr, Method::DrJl, Method::Ips, Method::Snips]
        .into_iter()
        .find(|m| methods.contains(m))
        .ok_or_else(|| Error::Config("calib-report needs a configured method with a propensity model".into()))
}

/// Reliability bins (shared edges, `M` from the audit config) for the
/// propensity model before and after calibration, the popularity heuristic,
/// and the imputation model before and after calibration.
pub fn cmd_calib_report(cfg: &ExperimentConfig) -> Result<Vec<CalibrationSummary>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let mut manifest = Manifest::load_matching(out, &cfg.dataset_hash())?;
    let hash = cfg.hash();
    let method = reported_method(cfg)?;
    let bins = cfg.audit.bins;
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let data = load_data(out, seed)?;
        let run = load_run(out, method, seed)?;
        let g = stack_grids(&run)?;
        let mask = data.table.observation_mask();
        let observed: Vec<u8> = mask.as_slice().iter().map(|&o| u8::from(o)).collect();
        let heuristic = heuristic_propensity(&data.table, cfg.audit.heuristic_exponent)?;

        let mut named: Vec<(&str, ReliabilityReport, Option<(&Grid, &Grid)>)> = Vec::new();
        let truth_p = data.truth.as_ref().map(|t| &t.propensity);
        let truth_q = data.truth.as_ref().map(|t| &t.relevance);
        for (name, grid) in [
            ("propensity_raw", &g.propensity_raw),
            ("propensity_calibrated", &g.propensity_calibrated),
            ("propensity_heuristic", &heuristic),
        ] {
            let report = ece_binned(grid.as_slice(), &observed, bins)?;
            named.push((name, report, truth_p.map(|t| (t, grid))));
        }
        for (name, grid) in [
            ("imputation_raw", g.imputation_raw.as_ref()),
            ("imputation_calibrated", g.imputation_calibrated.as_ref()),
        ] {
            let Some(grid) = grid else { continue };
            let (scores, labels): (Vec<f64>, Vec<u8>) =
                data.test.iter().map(|x| (grid.get(x.user, x.item), x.rating)).unzip();
            let report = ece_binned(&scores, &labels, bins)?;
            named.push((name, report, truth_q.map(|t| (t, grid))));
        }

        let mut entries = Vec::new();
        for (name, report, pairwise) in named {
            let base = format!("calibration/{}/{name}", seed_dir(seed));
            let csv = header(&hash, seed) + &report.to_csv();
            write_file(out, &format!("{base}.csv"), csv.as_bytes())?;
            #[derive(Serialize)]
            struct Payload<'a> {
                config_hash: &'a str,
                seed: u64,
                name: &'a str,
                report: &'a ReliabilityReport,
            }
            write_json(
                out,
                &format!("{base}.json"),
                &Payload {
                    config_hash: &hash,
                    seed,
                    name,
                    report: &report,
                },
            )?;
            manifest.record(out, &format!("{base}.csv"), "calib-report", &hash, Some(seed))?;
            manifest.record(out, &format!("{base}.json"), "calib-report", &hash, Some(seed))?;
            let (pairwise_ece, pairwise_mce) = match pairwise {
                Some((t, est)) => (Some(ece_pairwise(t, est)?), Some(mce_pairwise(t, est)?)),
                None => (None, None),
            };
            entries.push(CalibrationEntry {
                name: name.to_string(),
                ece: report.ece,
                mce: report.mce,
                n: report.n,
                pairwise_ece,
                pairwise_mce,
            });
        }
        let summary = CalibrationSummary {
            config_hash: hash.clone(),
            seed,
            method,
            bins,
            reports: entries,
        };
        let rel = format!("calibration/{}/summary.json", seed_dir(seed));
        write_json(out, &rel, &summary)?;
        manifest.record(out, &rel, "calib-report", &hash, Some(seed))?;
        summaries.push(summary);
    }
    manifest.save(out)?;
    Ok(summaries)
}

/// Output directory of one run, for callers that want to inspect
/// checkpoints directly.
pub fn run_dir(cfg: &ExperimentConfig, method: Method, seed: u64) -> PathBuf {
    cfg.output_dir.join(run_rel(method, seed, ""))
}
