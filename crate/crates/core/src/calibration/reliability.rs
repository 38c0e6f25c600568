//! Calibration error: the pairwise forms against known probabilities and the
//! equal-width binned form against observed labels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Grid;
use crate::error::{Error, Result};

/// `(1/|D|) · Σ |p − p̂|`.
pub fn ece_pairwise(truth: &Grid, estimate: &Grid) -> Result<f64> {
    truth.check_shape(estimate)?;
    let n = truth.len().max(1) as f64;
    Ok(truth
        .as_slice()
        .iter()
        .zip(estimate.as_slice())
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
        / n)
}

/// `max |p − p̂|`.
pub fn mce_pairwise(truth: &Grid, estimate: &Grid) -> Result<f64> {
    truth.check_shape(estimate)?;
    Ok(truth
        .as_slice()
        .iter()
        .zip(estimate.as_slice())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean predicted score; zero for empty bins.
    pub mean_score: f64,
    /// Empirical positive rate; zero for empty bins.
    pub positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub mce: f64,
    pub n: usize,
}

impl ReliabilityReport {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,lower,upper,count,mean_score,positive_rate\n");
        for (m, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                s,
                "{m},{:?},{:?},{},{:?},{:?}",
                b.lower, b.upper, b.count, b.mean_score, b.positive_rate
            );
        }
        s
    }
}

/// Bin index for right-closed intervals `((m−1)/M, m/M]`, with 0 in the
/// first bin.
fn bin_of(score: f64, m: usize) -> usize {
    let idx = (score * m as f64).ceil() as isize - 1;
    idx.clamp(0, m as isize - 1) as usize
}

pub fn ece_binned(scores: &[f64], labels: &[u8], num_bins: usize) -> Result<ReliabilityReport> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::Data("reliability report needs at least one sample".into()));
    }
    if num_bins == 0 {
        return Err(Error::Config("number of bins must be at least 1".into()));
    }
    let mut count = vec![0usize; num_bins];
    let mut score_sum = vec![0.0; num_bins];
    let mut pos = vec![0usize; num_bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = bin_of(s, num_bins);
        count[b] += 1;
        score_sum[b] += s;
        pos[b] += usize::from(y > 0);
    }
    let n = scores.len();
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    let bins = (0..num_bins)
        .map(|b| {
            let (mean_score, positive_rate) = if count[b] > 0 {
                let c = count[b] as f64;
                (score_sum[b] / c, pos[b] as f64 / c)
            } else {
                (0.0, 0.0)
            };
            if count[b] > 0 {
                let gap = (positive_rate - mean_score).abs();
                ece += count[b] as f64 / n as f64 * gap;
                mce = mce.max(gap);
            }
            ReliabilityBin {
                lower: b as f64 / num_bins as f64,
                upper: (b + 1) as f64 / num_bins as f64,
                count: count[b],
                mean_score,
                positive_rate,
            }
        })
        .collect();
    Ok(ReliabilityReport { bins, ece, mce, n })
}
