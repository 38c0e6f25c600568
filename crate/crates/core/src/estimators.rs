//! Estimators of the ideal loss and the closed-form / brute-force analysis of
//! the doubly robust estimator.
//!
//! All functions take flat per-pair slices over the full domain `D` (any
//! consistent ordering). `o[k]` is the observation indicator of pair `k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ErrorKind;

/// Slack below which an audited inequality counts as violated.
pub const BOUND_TOLERANCE: f64 = 1e-12;

/// Largest domain [`brute_force_moments`] will enumerate.
pub const MAX_ENUMERATION: usize = 16;

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(expected, got))
    }
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

pub fn ideal_loss(e: &[f64]) -> f64 {
    mean(e.iter().copied(), e.len())
}

pub fn naive_estimator(e: &[f64], o: &[bool]) -> Result<f64> {
    check_len(e.len(), o.len())?;
    let n_obs = o.iter().filter(|&&x| x).count();
    if n_obs == 0 {
        return Err(Error::Data("naive estimator needs at least one observation".into()));
    }
    Ok(e.iter().zip(o).filter(|(_, &x)| x).map(|(e, _)| e).sum::<f64>() / n_obs as f64)
}

/// Error-imputation-based estimator.
pub fn eib_estimator(e: &[f64], e_hat: &[f64], o: &[bool]) -> Result<f64> {
    check_len(e.len(), e_hat.len())?;
    check_len(e.len(), o.len())?;
    Ok(mean(
        (0..e.len()).map(|k| if o[k] { e[k] } else { e_hat[k] }),
        e.len(),
    ))
}

/// Inverse propensity scoring.
pub fn ips_estimator(e: &[f64], p_hat: &[f64], o: &[bool]) -> Result<f64> {
    check_len(e.len(), p_hat.len())?;
    check_len(e.len(), o.len())?;
    Ok(mean(
        (0..e.len()).map(|k| if o[k] { e[k] / p_hat[k] } else { 0.0 }),
        e.len(),
    ))
}

/// Self-normalized IPS: `Σ o·e/p̂ / Σ o/p̂`.
pub fn snips_estimator(e: &[f64], p_hat: &[f64], o: &[bool]) -> Result<f64> {
    check_len(e.len(), p_hat.len())?;
    check_len(e.len(), o.len())?;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..e.len() {
        if o[k] {
            num += e[k] / p_hat[k];
            den += 1.0 / p_hat[k];
        }
    }
    if den <= 0.0 {
        return Err(Error::Data("SNIPS normalizer is zero".into()));
    }
    Ok(num / den)
}

/// Doubly robust estimator `(1/|D|) Σ (ê + o·(e − ê)/p̂)`.
pub fn dr_estimator(e: &[f64], e_hat: &[f64], p_hat: &[f64], o: &[bool]) -> Result<f64> {
    check_len(e.len(), e_hat.len())?;
    check_len(e.len(), p_hat.len())?;
    check_len(e.len(), o.len())?;
    Ok(mean(
        (0..e.len()).map(|k| dr_term(e[k], e_hat[k], p_hat[k], o[k])),
        e.len(),
    ))
}

#[inline]
fn dr_term(e: f64, e_hat: f64, p_hat: f64, o: bool) -> f64 {
    if o {
        e_hat + (e - e_hat) / p_hat
    } else {
        e_hat
    }
}

/// Doubly robust estimator with calibrated imputed errors `ē` and calibrated
/// propensities `p̄`.
pub fn dr_calibrated(e: &[f64], e_bar: &[f64], p_bar: &[f64], o: &[bool]) -> Result<f64> {
    dr_estimator(e, e_bar, p_bar, o)
}

/// `ē = e(r̂, r̄)` for each pair, with `r̄` a soft pseudo label.
pub fn calibrated_imputed_errors(kind: ErrorKind, r_hat: &[f64], r_bar: &[f64]) -> Result<Vec<f64>> {
    check_len(r_hat.len(), r_bar.len())?;
    Ok(r_hat.iter().zip(r_bar).map(|(&r, &t)| kind.error(r, t)).collect())
}

/// Bias of the DR estimator,
/// `(1/|D|) · |Σ ((p̂ − p)/p̂)·(e − ê)|`.
pub fn dr_bias(e: &[f64], e_hat: &[f64], p: &[f64], p_hat: &[f64]) -> Result<f64> {
    check_len(e.len(), e_hat.len())?;
    check_len(e.len(), p.len())?;
    check_len(e.len(), p_hat.len())?;
    let s: f64 = (0..e.len())
        .map(|k| (p_hat[k] - p[k]) / p_hat[k] * (e[k] - e_hat[k]))
        .sum();
    Ok(s.abs() / e.len() as f64)
}

/// Variance of the DR estimator,
/// `(1/|D|²) · Σ p(1 − p)·(ê − e)²/p̂²`.
pub fn dr_variance(e: &[f64], e_hat: &[f64], p: &[f64], p_hat: &[f64]) -> Result<f64> {
    check_len(e.len(), e_hat.len())?;
    check_len(e.len(), p.len())?;
    check_len(e.len(), p_hat.len())?;
    let n = e.len() as f64;
    let s: f64 = (0..e.len())
        .map(|k| p[k] * (1.0 - p[k]) * (e_hat[k] - e[k]).powi(2) / (p_hat[k] * p_hat[k]))
        .sum();
    Ok(s / (n * n))
}

/// Exact mean and variance of the DR estimator under `o ~ Bernoulli(p)`,
/// by enumerating all `2^|D|` observation masks.
pub fn brute_force_moments(e: &[f64], e_hat: &[f64], p: &[f64], p_hat: &[f64]) -> Result<(f64, f64)> {
    let n = e.len();
    check_len(n, e_hat.len())?;
    check_len(n, p.len())?;
    check_len(n, p_hat.len())?;
    if n > MAX_ENUMERATION {
        return Err(Error::Config(format!(
            "enumeration over {n} pairs exceeds the limit of {MAX_ENUMERATION}"
        )));
    }
    let outcomes: Vec<(f64, f64)> = (0u32..1 << n)
        .map(|mask| {
            let mut prob = 1.0;
            let mut value = 0.0;
            for k in 0..n {
                let observed = mask >> k & 1 == 1;
                prob *= if observed { p[k] } else { 1.0 - p[k] };
                value += dr_term(e[k], e_hat[k], p_hat[k], observed);
            }
            (prob, value / n as f64)
        })
        .collect();
    let expectation: f64 = outcomes.iter().map(|(w, x)| w * x).sum();
    let variance: f64 = outcomes
        .iter()
        .map(|(w, x)| w * (x - expectation).powi(2))
        .sum();
    Ok((expectation, variance))
}

/// `max(p̂, threshold)` elementwise.
pub fn clip_propensity(p_hat: &[f64], threshold: f64) -> Vec<f64> {
    p_hat.iter().map(|&p| p.max(threshold)).collect()
}

/// One audited inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

impl BoundCheck {
    fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        let slack = rhs - lhs;
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            slack,
            holds: slack >= -BOUND_TOLERANCE,
        }
    }
}

/// Bias, variance, calibration errors, and the six calibration bounds for
/// one DR instance with known ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorAudit {
    pub n_pairs: usize,
    pub bias: f64,
    pub variance: f64,
    /// Pairwise calibration error of the propensity model, `|p − p̂|`.
    pub ece_propensity: f64,
    pub mce_propensity: f64,
    /// Pairwise calibration error of the imputation model, `|q − r̃|`.
    pub ece_imputation: f64,
    pub mce_imputation: f64,
    pub rho_max: f64,
    pub pi_max: f64,
    pub omega_max: f64,
    pub bounds: Vec<BoundCheck>,
    /// Pairs whose propensity estimate exactly repeats another pair's.
    pub propensity_ties: usize,
    /// Binned (M-bin) ECE of each model against realized labels, when
    /// labels were available.
    #[serde(default)]
    pub binned_ece_propensity: Option<f64>,
    #[serde(default)]
    pub binned_ece_imputation: Option<f64>,
}

impl EstimatorAudit {
    pub fn all_hold(&self) -> bool {
        self.bounds.iter().all(|b| b.holds)
    }

    pub fn violations(&self) -> usize {
        self.bounds.iter().filter(|b| !b.holds).count()
    }
}

/// Inputs to [`calibration_bounds`], one entry per pair of `D`.
#[derive(Debug, Clone, Copy)]
pub struct AuditInputs<'a> {
    /// Error against label 0, `e⁽⁰⁾`.
    pub e0: &'a [f64],
    /// Error against label 1, `e⁽¹⁾`.
    pub e1: &'a [f64],
    /// Imputation pseudo label `r̃`; the imputed error is `r̃·e⁽¹⁾ + (1 − r̃)·e⁽⁰⁾`.
    pub pseudo_label: &'a [f64],
    /// True relevance `q = P(r = 1)`; the error is `q·e⁽¹⁾ + (1 − q)·e⁽⁰⁾`.
    pub relevance: &'a [f64],
    pub propensity: &'a [f64],
    pub propensity_hat: &'a [f64],
}

pub fn calibration_bounds(x: AuditInputs<'_>) -> Result<EstimatorAudit> {
    let n = x.e0.len();
    for len in [x.e1.len(), x.pseudo_label.len(), x.relevance.len(), x.propensity.len(), x.propensity_hat.len()] {
        check_len(n, len)?;
    }
    if n == 0 {
        return Err(Error::Data("audit needs a non-empty domain".into()));
    }
    let e: Vec<f64> = (0..n).map(|k| x.relevance[k] * x.e1[k] + (1.0 - x.relevance[k]) * x.e0[k]).collect();
    let e_hat: Vec<f64> = (0..n)
        .map(|k| x.pseudo_label[k] * x.e1[k] + (1.0 - x.pseudo_label[k]) * x.e0[k])
        .collect();
    let (p, p_hat) = (x.propensity, x.propensity_hat);

    let bias = dr_bias(&e, &e_hat, p, p_hat)?;
    let variance = dr_variance(&e, &e_hat, p, p_hat)?;

    let prop_gap: Vec<f64> = (0..n).map(|k| (p[k] - p_hat[k]).abs()).collect();
    let imp_gap: Vec<f64> = (0..n).map(|k| (x.relevance[k] - x.pseudo_label[k]).abs()).collect();
    let ece_propensity = ideal_loss(&prop_gap);
    let mce_propensity = prop_gap.iter().copied().fold(0.0, f64::max);
    let ece_imputation = ideal_loss(&imp_gap);
    let mce_imputation = imp_gap.iter().copied().fold(0.0, f64::max);

    let max_over = |f: &dyn Fn(usize) -> f64| (0..n).map(f).fold(0.0, f64::max);
    let rho_max = max_over(&|k| ((e[k] - e_hat[k]) / p_hat[k]).abs());
    let pi_max = max_over(&|k| ((p_hat[k] - p[k]) * (x.e1[k] - x.e0[k]) / p_hat[k]).abs());
    let omega_max = max_over(&|k| {
        (p[k] * (1.0 - p[k]) * (x.e1[k] - x.e0[k]).powi(2) / (p_hat[k] * p_hat[k])).abs()
    });

    let bounds = vec![
        BoundCheck::new("bias <= rho_max * ECE(propensity)", bias, rho_max * ece_propensity),
        BoundCheck::new("bias <= rho_max * MCE(propensity)", bias, rho_max * mce_propensity),
        BoundCheck::new("bias <= pi_max * ECE(imputation)", bias, pi_max * ece_imputation),
        BoundCheck::new("bias <= pi_max * MCE(imputation)", bias, pi_max * mce_imputation),
        BoundCheck::new("var <= omega_max * ECE(imputation)^2", variance, omega_max * ece_imputation.powi(2)),
        BoundCheck::new(
            "var <= omega_max / |D| * MCE(imputation)^2",
            variance,
            omega_max / n as f64 * mce_imputation.powi(2),
        ),
    ];

    let mut sorted = p_hat.to_vec();
    sorted.sort_by(f64::total_cmp);
    let propensity_ties = sorted.windows(2).filter(|w| w[0] == w[1]).count();

    Ok(EstimatorAudit {
        n_pairs: n,
        bias,
        variance,
        ece_propensity,
        mce_propensity,
        ece_imputation,
        mce_imputation,
        rho_max,
        pi_max,
        omega_max,
        bounds,
        propensity_ties,
        binned_ece_propensity: None,
        binned_ece_imputation: None,
    })
}
