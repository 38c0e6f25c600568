use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dce::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dce", version, about = "Doubly calibrated debiasing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic data or ingest rating files.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing experiment directory.
        #[arg(long)]
        force: bool,
    },
    /// Train every configured method on every seed.
    Train(Common),
    /// Re-evaluate saved checkpoints on the test set.
    Eval(Common),
    /// Audit estimator bias/variance bounds against ground truth.
    Audit(Common),
    /// Write reliability diagrams before and after calibration.
    CalibReport(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: Cli) -> dce::Result<()> {
    let load = |c: &Common| ExperimentConfig::load(&c.config, &c.overrides);
    match cli.command {
        Command::GenData { common, force } => {
            let cfg = load(&common)?;
            let m = harness::cmd_gen_data(&cfg, force)?;
            for d in &m.datasets {
                println!(
                    "seed {}: {}x{} pairs={} observed={} test={}",
                    d.seed, d.n_users, d.n_items, d.n_pairs, d.n_observed, d.n_test
                );
            }
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let records = harness::cmd_train(&cfg)?;
            for r in &records {
                println!("{} seed {}: mse={:.4} auc={:.4}", r.method, r.seed, r.metrics.mse, r.metrics.auc);
            }
            for s in harness::summarize(&records) {
                println!("{} {}: {:.4} ± {:.4} (n={})", s.method, s.metric, s.mean, s.std, s.n);
            }
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            for r in harness::cmd_eval(&cfg)? {
                println!("{} seed {}: mse={:.4} auc={:.4}", r.method, r.seed, r.metrics.mse, r.metrics.auc);
            }
        }
        Command::Audit(c) => {
            let cfg = load(&c)?;
            for r in harness::cmd_audit(&cfg)? {
                println!(
                    "seed {}: {} random instances, {} violations; oracle bias delta {:.1e}, variance delta {:.1e}",
                    r.seed, r.random.instances, r.random.violations, r.oracle.bias_delta, r.oracle.variance_delta
                );
            }
        }
        Command::CalibReport(c) => {
            let cfg = load(&c)?;
            for s in harness::cmd_calib_report(&cfg)? {
                for e in &s.reports {
                    println!("seed {} {}: ece={:.4} mce={:.4}", s.seed, e.name, e.ece, e.mce);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
