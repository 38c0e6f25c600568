//! Evaluates a scoring function on a tiny test set: MSE, global AUC,
//! per-user AUC, and NDCG at several cutoffs.
//!
//! ```bash
//! cargo run --example ranking_metrics
//! ```

use dce::data::Interaction;
use dce::metrics::evaluate;

fn main() -> dce::Result<()> {
    let test: Vec<Interaction> = [(0, 0, 1), (0, 1, 0), (0, 2, 1), (1, 0, 0), (1, 1, 1), (1, 2, 0), (2, 0, 0), (2, 1, 0)]
        .into_iter()
        .map(|(user, item, rating)| Interaction { user, item, rating })
        .collect();
    // A decent but imperfect scorer: right on most pairs, with one tie.
    let score = |u: usize, i: usize| match (u, i) {
        (0, 0) | (1, 1) => 0.9,
        (0, 2) | (2, 1) => 0.6,
        (1, 2) => 0.7,
        _ => 0.2,
    };
    let report = evaluate(score, &test, &[1, 3], true)?;
    println!("{}", report.csv_header());
    println!("{}", report.csv_row());
    println!("users ranked: {}, per-user AUC: {:?}", report.n_users_ranked, report.user_auc);
    Ok(())
}
