//! Drives a whole experiment from a config file, as the `dce` binary does:
//! generate data, train, audit, and write calibration reports.
//!
//! ```bash
//! cargo run --release --example run_experiment -- [config.toml] [output_dir]
//! ```

use std::path::PathBuf;

use dce::harness::{self, ExperimentConfig};

fn main() -> dce::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = PathBuf::from(
        args.next()
            .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/quick.toml").into()),
    );
    let out = args.next().unwrap_or_else(|| "target/experiment".into());
    let cfg = ExperimentConfig::load(&config, &[format!("output_dir={out:?}")])?;
    println!("config hash {}", cfg.hash());

    harness::cmd_gen_data(&cfg, true)?;
    let records = harness::cmd_train(&cfg)?;
    for s in harness::summarize(&records) {
        if s.metric == "mse" || s.metric == "auc" {
            println!("{:<7} {:<4} {:.4} ± {:.4}", s.method, s.metric, s.mean, s.std);
        }
    }
    for a in harness::cmd_audit(&cfg)? {
        println!(
            "seed {}: {} bound violations in {} random instances",
            a.seed, a.random.violations, a.random.instances
        );
    }
    for s in harness::cmd_calib_report(&cfg)? {
        for e in &s.reports {
            println!("seed {} {:<22} binned ECE {:.4}", s.seed, e.name, e.ece);
        }
    }
    println!("artifacts indexed in {out}/manifest.json");
    Ok(())
}
