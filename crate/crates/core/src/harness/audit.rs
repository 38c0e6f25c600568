use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::seeded_rng;
use crate::error::Result;
use crate::estimators::{
    brute_force_moments, dr_estimator, ideal_loss, dr_bias, dr_variance, calibration_bounds, AuditInputs,
    EstimatorAudit,
};
use crate::model::ErrorKind;

/// A DR instance with ground truth: error pairs from a prediction, the
/// imputation pseudo label, relevance `q`, and true and estimated
/// propensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditInstance {
    pub e0: Vec<f64>,
    pub e1: Vec<f64>,
    pub pseudo_label: Vec<f64>,
    pub relevance: Vec<f64>,
    pub propensity: Vec<f64>,
    pub propensity_hat: Vec<f64>,
}

impl AuditInstance {
    /// Uniform random instance with `n` pairs: `r̂, r̃, q ~ U(0.01, 0.99)`,
    /// `p, p̂ ~ U(0.05, 1)`.
    pub fn random<R: Rng + ?Sized>(n: usize, kind: ErrorKind, rng: &mut R) -> Self {
        let mut x = Self {
            e0: Vec::with_capacity(n),
            e1: Vec::with_capacity(n),
            pseudo_label: Vec::with_capacity(n),
            relevance: Vec::with_capacity(n),
            propensity: Vec::with_capacity(n),
            propensity_hat: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let (e0, e1) = kind.pair(rng.gen_range(0.01..0.99));
            x.e0.push(e0);
            x.e1.push(e1);
            x.pseudo_label.push(rng.gen_range(0.01..0.99));
            x.relevance.push(rng.gen_range(0.01..0.99));
            x.propensity.push(rng.gen_range(0.05..=1.0));
            x.propensity_hat.push(rng.gen_range(0.05..=1.0));
        }
        x
    }

    pub fn len(&self) -> usize {
        self.e0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e0.is_empty()
    }

    pub fn inputs(&self) -> AuditInputs<'_> {
        AuditInputs {
            e0: &self.e0,
            e1: &self.e1,
            pseudo_label: &self.pseudo_label,
            relevance: &self.relevance,
            propensity: &self.propensity,
            propensity_hat: &self.propensity_hat,
        }
    }

    /// Expected errors `e` and imputed errors `ê`.
    pub fn errors(&self) -> (Vec<f64>, Vec<f64>) {
        let mix = |t: &[f64]| -> Vec<f64> {
            (0..self.len())
                .map(|k| t[k] * self.e1[k] + (1.0 - t[k]) * self.e0[k])
                .collect()
        };
        (mix(&self.relevance), mix(&self.pseudo_label))
    }

    pub fn audit(&self) -> Result<EstimatorAudit> {
        calibration_bounds(self.inputs())
    }

    /// The first `n` pairs.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            e0: self.e0[..n].to_vec(),
            e1: self.e1[..n].to_vec(),
            pseudo_label: self.pseudo_label[..n].to_vec(),
            relevance: self.relevance[..n].to_vec(),
            propensity: self.propensity[..n].to_vec(),
            propensity_hat: self.propensity_hat[..n].to_vec(),
        }
    }
}

/// Outcome of auditing many random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomAudit {
    pub instances: usize,
    pub max_pairs: usize,
    pub checks: usize,
    pub violations: usize,
    /// Smallest `rhs − lhs` over all checks.
    pub min_slack: f64,
}

/// Audits `instances` random instances with `|D|` uniform in
/// `1..=max_pairs`, drawn from `seed`.
pub fn random_audit(instances: usize, max_pairs: usize, kind: ErrorKind, seed: u64) -> Result<RandomAudit> {
    let mut rng = seeded_rng(seed, 50);
    let mut out = RandomAudit {
        instances,
        max_pairs,
        checks: 0,
        violations: 0,
        min_slack: f64::INFINITY,
    };
    for _ in 0..instances {
        let n = rng.gen_range(1..=max_pairs);
        let audit = AuditInstance::random(n, kind, &mut rng).audit()?;
        out.checks += audit.bounds.len();
        out.violations += audit.violations();
        for b in &audit.bounds {
            out.min_slack = out.min_slack.min(b.slack);
        }
    }
    Ok(out)
}

/// Closed-form moments against exhaustive enumeration on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub n_pairs: usize,
    pub ideal: f64,
    pub expectation: f64,
    pub bias_closed_form: f64,
    pub bias_enumerated: f64,
    pub variance_closed_form: f64,
    pub variance_enumerated: f64,
    pub bias_delta: f64,
    pub variance_delta: f64,
    /// The DR value on the all-observed mask, for reference.
    pub full_observation_value: f64,
}

pub fn oracle_comparison(x: &AuditInstance) -> Result<OracleComparison> {
    let (e, e_hat) = x.errors();
    let (p, p_hat) = (&x.propensity, &x.propensity_hat);
    let (expectation, variance_enumerated) = brute_force_moments(&e, &e_hat, p, p_hat)?;
    let ideal = ideal_loss(&e);
    let bias_enumerated = (expectation - ideal).abs();
    let bias_closed_form = dr_bias(&e, &e_hat, p, p_hat)?;
    let variance_closed_form = dr_variance(&e, &e_hat, p, p_hat)?;
    Ok(OracleComparison {
        n_pairs: x.len(),
        ideal,
        expectation,
        bias_closed_form,
        bias_enumerated,
        variance_closed_form,
        variance_enumerated,
        bias_delta: (bias_closed_form - bias_enumerated).abs(),
        variance_delta: (variance_closed_form - variance_enumerated).abs(),
        full_observation_value: dr_estimator(&e, &e_hat, p_hat, &vec![true; x.len()])?,
    })
}
