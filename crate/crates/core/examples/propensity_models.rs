//! Compares propensity estimates against the true exposure probabilities:
//! the item-popularity heuristic, a trained factorization classifier, and
//! the same classifier after expert calibration.
//!
//! ```bash
//! cargo run --release --example propensity_models
//! ```

use dce::calibration::{ece_binned, ece_pairwise};
use dce::data::{generate_synthetic, split_validation, SynthConfig};
use dce::propensity::heuristic_propensity;
use dce::training::{pretrain_propensity_stack, TrainConfig};

fn main() -> dce::Result<()> {
    let data = generate_synthetic(&SynthConfig::new(500, 300, 1))?;
    let split = split_validation(&data.table, 0.1, 1)?;
    let stack = pretrain_propensity_stack(&data.table, &split, &TrainConfig { seed: 1, ..Default::default() })?;

    let mask = data.table.observation_mask();
    let observed: Vec<u8> = mask.as_slice().iter().map(|&o| u8::from(o)).collect();
    let truth = &data.truth.propensity;
    println!("{:<22} {:>12} {:>12}", "estimate", "pairwise ECE", "binned ECE");
    for (name, grid) in [
        ("popularity heuristic", heuristic_propensity(&data.table, 0.5)?),
        ("classifier", stack.raw_grid()),
        ("calibrated classifier", stack.calibrated_grid()?),
    ] {
        let binned = ece_binned(grid.as_slice(), &observed, 15)?;
        println!("{name:<22} {:>12.4} {:>12.4}", ece_pairwise(truth, &grid)?, binned.ece);
    }
    Ok(())
}
