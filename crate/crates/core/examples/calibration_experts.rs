//! Calibrates a propensity model whose error differs between two user
//! groups: over-confident for one, under-confident for the other. A single
//! global Platt fit can only average the two; a bank of two experts with a
//! learned assignment fixes both.
//!
//! ```bash
//! cargo run --release --example calibration_experts
//! ```

use rand::Rng;
use rand_distr::StandardNormal;

use dce::calibration::{ece_pairwise, fit_experts, BankRole, CalibrationTarget, ExpertBank, FitConfig, FixedScores};
use dce::data::{generate_synthetic, seeded_rng, split_validation, Grid, SynthConfig};
use dce::training::holdout_rate;
use dce::{logit, sigmoid};

fn main() -> dce::Result<()> {
    let (nu, ni, seed) = (500, 300, 0);
    let data = generate_synthetic(&SynthConfig::new(nu, ni, seed))?;
    let split = split_validation(&data.table, 0.1, seed)?;
    let p = &data.truth.propensity;

    let slope = |u: usize| if u % 2 == 0 { 2.0 } else { 0.5 };
    let raw = Grid::from_fn(nu, ni, |u, i| sigmoid(slope(u) * logit(p.get(u, i))));
    // A noisy group indicator stands in for learned user embeddings.
    let mut rng = seeded_rng(seed, 1);
    let embeddings: Vec<f64> = (0..nu)
        .flat_map(|u| {
            let z: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            [if u % 2 == 0 { 1.0 } else { -1.0 } + 0.3 * z, z2]
        })
        .collect();
    let source = FixedScores::new(raw.clone(), embeddings, 2)?;
    let target = CalibrationTarget::Propensity { pairs: &split.d_val, holdout_rate: holdout_rate(&split) };
    let cfg = FitConfig { seed, ..FitConfig::default() };

    println!("uncalibrated      ECE {:.4}", ece_pairwise(p, &raw)?);
    for k in [1, 2] {
        let mut bank = ExpertBank::new(k, 2, BankRole::Propensity, 0.1, seed)?;
        let report = fit_experts(&mut bank, &source, target, &cfg)?;
        let ece = ece_pairwise(p, &bank.calibrated_grid(&source, nu, ni)?)?;
        println!(
            "K={k} experts       ECE {ece:.4}  (final loss {:.4})",
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        for (j, e) in bank.experts().iter().enumerate() {
            println!("  expert {j}: a = {:+.3}, b = {:+.3}", e.a, e.b);
        }
    }
    Ok(())
}
