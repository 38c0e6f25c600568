use std::fs;
use std::path::Path;
use std::process::Command;

use dce::harness::{self, ExperimentConfig, Manifest};
use dce::training::Method;
use dce::Error;

fn config(dir: &Path, body: &str, overrides: &[&str]) -> ExperimentConfig {
    let text = format!(
        "output_dir = {:?}\n{body}",
        dir.to_str().unwrap()
    );
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str(&text, &overrides).unwrap()
}

const SMALL: &str = r#"
method = "dce-dr"
seeds = [0, 1]

[dataset.synthetic]
n_users = 40
n_items = 30
seed = 11
test_items_per_user = 8

[train]
epochs = 3
dim = 4
k = 2
obs_batch = 32

[train.propensity]
epochs = 3
dim = 4

[train.propensity_calibration]
epochs = 3
"#;

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = harness::cmd_gen_data(&config(a.path(), SMALL, &[]), false).unwrap();
    let mb = harness::cmd_gen_data(&config(b.path(), SMALL, &[]), false).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        fs::read(a.path().join("manifest.json")).unwrap(),
        fs::read(b.path().join("manifest.json")).unwrap()
    );
    assert_eq!(ma.datasets.len(), 2);
    let truth = ma.entry("data/seed-1/truth.csv").unwrap();
    assert_eq!(truth.seed, Some(1));
    assert_eq!(truth.sha256.len(), 64);

    let text = fs::read_to_string(a.path().join("data/seed-0/train.tsv")).unwrap();
    let cfg = config(a.path(), SMALL, &[]);
    assert!(text.starts_with(&format!("# config_hash={} seed=0", cfg.hash())));

    let data = harness::load_data(a.path(), 0).unwrap();
    assert_eq!(data.table.n_users(), 40);
    assert!(data.truth.is_some());
    assert_eq!(data.test.len(), 40 * 8);
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL, &[]);
    harness::cmd_gen_data(&cfg, false).unwrap();
    let err = harness::cmd_gen_data(&cfg, false).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    harness::cmd_gen_data(&cfg, true).unwrap();
}

#[test]
fn floor_one_observes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL, &["dataset.synthetic.propensity_floor=1.0"]);
    let m = harness::cmd_gen_data(&cfg, false).unwrap();
    assert!(m.datasets.iter().all(|d| d.full_observation && d.n_observed == 1200));
}

#[test]
fn full_size_pair_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        SMALL,
        &["dataset.synthetic.n_users=500", "dataset.synthetic.n_items=300", "seeds=[0]"],
    );
    let m = harness::cmd_gen_data(&cfg, false).unwrap();
    assert_eq!(m.dataset(0).unwrap().n_pairs, 150_000);
}

#[test]
fn naive_run_has_no_auxiliary_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL, &["method=\"naive\"", "seeds=[0,1,2,3,4]"]);
    harness::cmd_gen_data(&cfg, false).unwrap();
    let records = harness::cmd_train(&cfg).unwrap();
    assert_eq!(records.len(), 5);
    let run = harness::run_dir(&cfg, Method::Naive, 0);
    assert!(run.join("prediction.bin").exists());
    for f in ["propensity.bin", "imputation.bin", "imputation_bank.bin", "propensity_bank.bin"] {
        assert!(!run.join(f).exists(), "{f}");
    }

    let summary = fs::read_to_string(dir.path().join("runs/summary.csv")).unwrap();
    let mean_row = summary.lines().find(|l| l.starts_with("naive,mean,")).unwrap();
    let std_row = summary.lines().find(|l| l.starts_with("naive,std,")).unwrap();
    let mse: Vec<f64> = records.iter().map(|r| r.metrics.mse).collect();
    let mean = mse.iter().sum::<f64>() / 5.0;
    let std = (mse.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let field = |row: &str| row.split(',').nth(2).unwrap().parse::<f64>().unwrap();
    assert!((field(mean_row) - mean).abs() < 1e-12);
    assert!((field(std_row) - std).abs() < 1e-12);
    let stats = harness::summarize(&records);
    assert!(stats.iter().all(|s| s.n == 5));
}

#[test]
fn paired_training_audit_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("method = \"dce-dr\"", "methods = [\"dr-jl\", \"dce-dr\"]");
    let cfg = config(dir.path(), &body, &[]);
    harness::cmd_gen_data(&cfg, false).unwrap();
    let records = harness::cmd_train(&cfg).unwrap();
    assert_eq!(records.len(), 4);

    let comparison = fs::read_to_string(dir.path().join("runs/comparison.csv")).unwrap();
    let lines: Vec<&str> = comparison.lines().collect();
    assert_eq!(lines[1], "seed,dr-jl.mse,dr-jl.auc,dce-dr.mse,dce-dr.auc");
    assert_eq!(lines.len(), 4);

    // Re-running reproduces every JSON payload byte for byte.
    let metrics = |d: &Path| fs::read(d.join("runs/dce-dr/seed-1/metrics.json")).unwrap();
    let first = metrics(dir.path());
    let manifest_before = Manifest::load(dir.path()).unwrap();
    harness::cmd_train(&cfg).unwrap();
    assert_eq!(first, metrics(dir.path()));
    assert_eq!(manifest_before, Manifest::load(dir.path()).unwrap());

    let evals = harness::cmd_eval(&cfg).unwrap();
    for (e, r) in evals.iter().zip(&records) {
        assert_eq!(e.metrics.mse, r.metrics.mse);
        assert_eq!(e.metrics.auc, r.metrics.auc);
    }

    let audits = harness::cmd_audit(&cfg).unwrap();
    for a in &audits {
        assert_eq!(a.random.violations, 0);
        assert_eq!(a.random.instances, 100);
        assert_eq!(a.oracle.n_pairs, 12);
        assert!(a.oracle.bias_delta <= 1e-10 && a.oracle.variance_delta <= 1e-10);
        assert_eq!(a.oracle_source, "trained-stack");
        assert_eq!(a.method, Some(Method::DceDr));
        assert!(a.raw.as_ref().unwrap().all_hold());
        assert!(a.calibrated.as_ref().unwrap().all_hold());
    }
    assert!(dir.path().join("audit/seed-0.json").exists());

    let reports = harness::cmd_calib_report(&cfg).unwrap();
    for s in &reports {
        assert_eq!(s.bins, 15);
        assert_eq!(s.reports.len(), 5);
        assert!(s.get("imputation_calibrated").is_some());
    }
    let read = |name: &str| -> serde_json::Value {
        let text = fs::read_to_string(dir.path().join(format!("calibration/seed-0/{name}.json"))).unwrap();
        serde_json::from_str(&text).unwrap()
    };
    let edges = |v: &serde_json::Value| -> Vec<(f64, f64)> {
        v["report"]["bins"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| (b["lower"].as_f64().unwrap(), b["upper"].as_f64().unwrap()))
            .collect()
    };
    let before = read("propensity_raw");
    assert_eq!(edges(&before).len(), 15);
    assert_eq!(edges(&before), edges(&read("propensity_calibrated")));
    assert_eq!(edges(&read("imputation_raw")), edges(&read("imputation_calibrated")));
    assert_eq!(before["config_hash"], serde_json::json!(cfg.hash()));

    let m = Manifest::load(dir.path()).unwrap();
    for e in &m.entries {
        let bytes = fs::read(dir.path().join(&e.path)).unwrap();
        assert_eq!(dce::harness::config::sha256_hex(&bytes), e.sha256, "{}", e.path);
    }
    assert!(m.entry("calibration/seed-1/summary.json").is_some());
}

#[test]
fn heuristic_propensity_is_worse_calibrated_than_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        SMALL,
        &[
            "method=\"dr-jl\"",
            "seeds=[0,1,2]",
            "dataset.synthetic.n_users=200",
            "dataset.synthetic.n_items=120",
            "train.epochs=1",
            "train.propensity.epochs=20",
            "train.propensity.dim=8",
            "train.propensity_calibration.epochs=10",
        ],
    );
    harness::cmd_gen_data(&cfg, false).unwrap();
    harness::cmd_train(&cfg).unwrap();
    for s in harness::cmd_calib_report(&cfg).unwrap() {
        let ece = |name: &str| s.get(name).unwrap().pairwise_ece.unwrap();
        eprintln!(
            "seed {}: heuristic {:.4} raw {:.4} calibrated {:.4}",
            s.seed,
            ece("propensity_heuristic"),
            ece("propensity_raw"),
            ece("propensity_calibrated")
        );
        assert!(ece("propensity_heuristic") > ece("propensity_raw"));
        assert!(ece("propensity_heuristic") > ece("propensity_calibrated"));
    }
}

#[test]
fn identity_stack_audits_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        SMALL,
        &[
            "method=\"dr-jl\"",
            "seeds=[0]",
            "train.bank_init_noise=0.0",
            "train.propensity_calibration.epochs=0",
        ],
    );
    harness::cmd_gen_data(&cfg, false).unwrap();
    harness::cmd_train(&cfg).unwrap();
    let audit = harness::cmd_audit(&cfg).unwrap().remove(0);
    let (raw, cal) = (audit.raw.unwrap(), audit.calibrated.unwrap());
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
    assert!(close(raw.bias, cal.bias) && close(raw.variance, cal.variance));
    assert!(close(raw.ece_propensity, cal.ece_propensity));
    assert_eq!(raw.ece_imputation, cal.ece_imputation);
    for (a, b) in raw.bounds.iter().zip(&cal.bounds) {
        assert!(close(a.lhs, b.lhs) && close(a.rhs, b.rhs), "{}", a.name);
    }
}

fn write_triples(path: &Path, rows: &[(i64, i64, f64)]) {
    let text: String = rows.iter().map(|(u, i, r)| format!("{u}\t{i}\t{r}\n")).collect();
    fs::write(path, text).unwrap();
}

#[test]
fn file_data_has_no_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 0..12 {
        for i in 0..10 {
            let r = ((u * 7 + i * 3) % 5 + 1) as f64;
            if (u + i) % 3 == 0 {
                train.push((100 + u, 500 + i, r));
            }
            if (u + 2 * i) % 4 == 1 {
                test.push((100 + u, 500 + i, r));
            }
        }
    }
    test.push((999, 500, 5.0));
    write_triples(&dir.path().join("train.tsv"), &train);
    write_triples(&dir.path().join("test.tsv"), &test);
    let body = format!(
        "method = \"naive\"\n[dataset.files]\ntrain = {:?}\ntest = {:?}\n[train]\nepochs = 2\ndim = 3\n",
        dir.path().join("train.tsv"),
        dir.path().join("test.tsv")
    );
    let out = dir.path().join("out");
    let cfg = config(&out, &body, &[]);
    let m = harness::cmd_gen_data(&cfg, false).unwrap();
    let d = m.dataset(0).unwrap();
    assert!(!d.ground_truth);
    assert_eq!((d.n_users, d.n_items, d.n_observed, d.n_test), (12, 10, train.len(), test.len() - 1));
    harness::cmd_train(&cfg).unwrap();
    assert!(matches!(harness::cmd_audit(&cfg), Err(Error::MissingGroundTruth)));
}

#[test]
fn mismatched_config_and_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL, &[]);
    // Nothing generated yet.
    assert_eq!(harness::cmd_train(&cfg).unwrap_err().exit_code(), 2);
    harness::cmd_gen_data(&cfg, false).unwrap();
    let other = config(dir.path(), SMALL, &["dataset.synthetic.seed=12"]);
    assert_eq!(harness::cmd_train(&other).unwrap_err().exit_code(), 1);
    // No checkpoint yet.
    assert_eq!(harness::cmd_calib_report(&cfg).unwrap_err().exit_code(), 2);
    let naive = config(dir.path(), SMALL, &["method=\"naive\""]);
    assert_eq!(harness::cmd_calib_report(&naive).unwrap_err().exit_code(), 1);
}

fn dce(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dce")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, format!("output_dir = {:?}\n{SMALL}", dir.path().join("out"))).unwrap();
    let p = path.to_str().unwrap();

    assert_eq!(dce(&["--help"]).0, 0);
    assert_eq!(dce(&["frobnicate"]).0, 1);
    assert_eq!(dce(&["train"]).0, 1);
    assert_eq!(dce(&["train", "--config", "/nonexistent.toml"]).0, 1);
    assert_eq!(dce(&["train", "--config", p, "--set", "train.bogus=1"]).0, 1);
    assert_eq!(dce(&["train", "--config", p]).0, 2);

    let (code, text) = dce(&["gen-data", "--config", p, "--set", "seeds=[0]"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("pairs=1200"));
    assert_eq!(dce(&["gen-data", "--config", p, "--set", "seeds=[0]"]).0, 1);

    let (code, text) = dce(&[
        "train",
        "--config",
        p,
        "--set",
        "seeds=[0]",
        "--set",
        "train.prediction_adam.lr=1e300",
    ]);
    assert_eq!(code, 3, "{text}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!cfg.methods().is_empty());
        n += 1;
    }
    assert!(n >= 3);
}
