//! Shows the bias/variance decomposition of the doubly robust estimator on a
//! small instance: closed-form moments against exhaustive enumeration, and
//! the calibration bounds on bias and variance.
//!
//! ```bash
//! cargo run --release --example estimator_audit
//! ```

use dce::data::seeded_rng;
use dce::harness::{oracle_comparison, random_audit, AuditInstance};
use dce::model::ErrorKind;

fn main() -> dce::Result<()> {
    let mut rng = seeded_rng(7, 0);
    let x = AuditInstance::random(12, ErrorKind::Bce, &mut rng);

    let oracle = oracle_comparison(&x)?;
    println!("ideal loss           {:.6}", oracle.ideal);
    println!("E[DR] (enumerated)   {:.6}", oracle.expectation);
    println!("bias   closed form {:.3e}  enumerated {:.3e}", oracle.bias_closed_form, oracle.bias_enumerated);
    println!("var    closed form {:.3e}  enumerated {:.3e}", oracle.variance_closed_form, oracle.variance_enumerated);

    let audit = x.audit()?;
    println!("\nECE(propensity) {:.4}  ECE(imputation) {:.4}", audit.ece_propensity, audit.ece_imputation);
    for b in &audit.bounds {
        println!("{:<45} {:.4e} <= {:.4e}  {}", b.name, b.lhs, b.rhs, if b.holds { "ok" } else { "VIOLATED" });
    }

    let sweep = random_audit(1000, 100, ErrorKind::Bce, 0)?;
    println!(
        "\n{} random instances, {} checks, {} violations, min slack {:.2e}",
        sweep.instances, sweep.checks, sweep.violations, sweep.min_slack
    );
    Ok(())
}
