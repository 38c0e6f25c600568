//! Trains the naive, DR-JL and DCE-DR estimators on the same synthetic MNAR
//! dataset for several seeds and prints test metrics side by side.
//!
//! ```bash
//! cargo run --release --example compare_methods -- [seeds] [users] [items]
//! ```

use dce::data::{generate_synthetic, split_validation, SynthConfig};
use dce::metrics::evaluate;
use dce::training::{pretrain_propensity_stack, train_with_stack, Method, TrainConfig};

fn main() -> dce::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(5) as u64;
    let users = args.get(1).copied().unwrap_or(500);
    let items = args.get(2).copied().unwrap_or(300);

    println!("seed,method,mse,auc,ndcg@5");
    for seed in 0..seeds {
        let data = generate_synthetic(&SynthConfig::new(users, items, seed))?;
        let split = split_validation(&data.table, 0.1, seed)?;
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let stack = pretrain_propensity_stack(&data.table, &split, &cfg)?;
        for method in [Method::Naive, Method::DrJl, Method::DceDr] {
            let run = train_with_stack(method, &data.table, &split, Some(&stack), &cfg)?;
            let report = evaluate(|u, i| run.predict(u, i), &data.test, &[5], false)?;
            println!(
                "{seed},{method},{:.5},{:.4},{:.4}",
                report.mse, report.auc, report.ndcg[&5]
            );
        }
    }
    Ok(())
}
