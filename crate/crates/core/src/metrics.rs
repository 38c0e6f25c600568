//! Metrics on the unbiased test set: MSE, global AUC, and NDCG@K.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::error::{Error, Result};

pub fn mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Data("MSE needs at least one sample".into()));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / predictions.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean.
        let midrank = (start + 1 + end) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&j| labels[j] > 0).count();
        rank_sum += midrank * positives as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn dcg(gains: &[u8], k: usize) -> f64 {
    gains
        .iter()
        .take(k)
        .enumerate()
        .map(|(rank, &g)| f64::from(g) / ((rank + 2) as f64).log2())
        .sum()
}

/// NDCG@K of one ranked list of binary gains, or `None` when the list has no
/// positives.
pub fn ndcg_list(ranked: &[u8], k: usize) -> Option<f64> {
    let positives = ranked.iter().filter(|&&g| g > 0).count();
    if positives == 0 {
        return None;
    }
    let ideal: f64 = (0..positives.min(k)).map(|rank| 1.0 / ((rank + 2) as f64).log2()).sum();
    Some(dcg(ranked, k) / ideal)
}

/// Mean NDCG@K over users' ranked relevance lists; users without positives
/// are left out of the average.
pub fn ndcg_at_k(ranked_lists: &[Vec<u8>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("NDCG cutoff must be at least 1".into()));
    }
    let values: Vec<f64> = ranked_lists.iter().filter_map(|l| ndcg_list(l, k)).collect();
    if values.is_empty() {
        return Err(Error::Data("no user has a positive test item".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Sorts `(score, label)` pairs by descending score and returns the labels.
/// Equal scores keep their input order.
pub fn rank_by_score(scored: &[(f64, u8)]) -> Vec<u8> {
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v.into_iter().map(|(_, y)| y).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub auc: f64,
    /// Cutoff → NDCG@cutoff.
    pub ndcg: BTreeMap<usize, f64>,
    pub n_test: usize,
    pub n_users_ranked: usize,
    /// Per-user AUC averaged over users with both classes, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_auc: Option<f64>,
}

impl MetricReport {
    pub fn csv_header(&self) -> String {
        let mut s = String::from("mse,auc");
        for k in self.ndcg.keys() {
            let _ = write!(s, ",ndcg@{k}");
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{:?},{:?}", self.mse, self.auc);
        for v in self.ndcg.values() {
            let _ = write!(s, ",{v:?}");
        }
        s
    }
}

/// Scores every test pair with `predict` and computes all metrics.
pub fn evaluate(
    predict: impl Fn(usize, usize) -> f64,
    test: &[Interaction],
    cutoffs: &[usize],
    per_user_auc: bool,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let scores: Vec<f64> = test.iter().map(|x| predict(x.user, x.item)).collect();
    let labels: Vec<u8> = test.iter().map(|x| x.rating).collect();
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();

    let mut by_user: BTreeMap<usize, Vec<(f64, u8)>> = BTreeMap::new();
    for (x, &s) in test.iter().zip(&scores) {
        by_user.entry(x.user).or_default().push((s, x.rating));
    }
    let ranked: Vec<Vec<u8>> = by_user.values().map(|v| rank_by_score(v)).collect();
    let mut ndcg = BTreeMap::new();
    for &k in cutoffs {
        ndcg.insert(k, ndcg_at_k(&ranked, k)?);
    }

    let user_auc = if per_user_auc {
        let values: Vec<f64> = by_user
            .values()
            .filter_map(|v| {
                let (s, y): (Vec<f64>, Vec<u8>) = v.iter().copied().unzip();
                auc(&s, &y).ok()
            })
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    } else {
        None
    };

    Ok(MetricReport {
        mse: mse(&scores, &targets)?,
        auc: auc(&scores, &labels)?,
        ndcg,
        n_test: test.len(),
        n_users_ranked: ranked.iter().filter(|l| l.iter().any(|&g| g > 0)).count(),
        user_auc,
    })
}
