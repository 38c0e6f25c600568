//! Generates a synthetic MNAR dataset, prints how biased the observed ratings
//! are relative to the uniformly exposed test set, and writes the tables and
//! ground-truth grids to a directory.
//!
//! ```bash
//! cargo run --release --example generate_data -- [out_dir]
//! ```

use std::path::PathBuf;

use dce::data::{generate_synthetic, write_tsv, SynthConfig};

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn main() -> dce::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/synthetic".into()));
    let cfg = SynthConfig::new(500, 300, 0);
    let data = generate_synthetic(&cfg)?;
    let observed = data.table.observed();

    println!("users x items      {} x {}", data.table.n_users(), data.table.n_items());
    println!(
        "observed ratings   {} ({:.1}% of pairs)",
        observed.len(),
        100.0 * observed.len() as f64 / data.table.domain_size() as f64
    );
    println!("mean propensity    {:.4}", mean(data.truth.propensity.as_slice().iter().copied()));
    println!("mean relevance     {:.4}", mean(data.truth.relevance.as_slice().iter().copied()));
    println!("positive rate, observed  {:.4}", mean(observed.iter().map(|x| f64::from(x.rating))));
    println!("positive rate, test      {:.4}", mean(data.test.iter().map(|x| f64::from(x.rating))));

    std::fs::create_dir_all(&out)?;
    write_tsv(&out.join("train.tsv"), observed)?;
    write_tsv(&out.join("test.tsv"), &data.test)?;
    data.truth.write_csv(&out.join("truth.csv"))?;
    println!("wrote {}", out.display());
    Ok(())
}
