//! Calibration losses for the two expert banks and their analytic gradients
//! with respect to the bank parameters (experts and assignment network).

use super::{Assignment, ExpertBank, ScoreSource};
use crate::data::{Interaction, LabeledPair};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{clamp_prob, logit, EPS_LOG};

/// Mean batch loss, its gradient over the bank's flat parameters, and the
/// number of pairs whose imputation label coefficient `r / p̄` exceeded one.
#[derive(Debug, Clone)]
pub struct BankLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub coef_above_one: usize,
}

/// Forward pass for one pair, retaining what the backward pass needs.
struct Forward {
    beta: Vec<f64>,
    outputs: Vec<f64>,
    raw_logit: f64,
    value: f64,
}

fn forward(bank: &ExpertBank, user: usize, embedding: &[f64], raw: f64, mode: Assignment<'_>) -> Result<Forward> {
    let beta = bank.assignment(user, embedding, mode)?;
    let raw_logit = logit(clamp_prob(raw));
    let outputs: Vec<f64> = (0..bank.k()).map(|k| bank.expert(k).apply(raw)).collect();
    let value = beta.iter().zip(&outputs).map(|(b, c)| b * c).sum();
    Ok(Forward {
        beta,
        outputs,
        raw_logit,
        value,
    })
}

/// Adds `d_value · ∂value/∂params` into `grad`.
fn backward(bank: &ExpertBank, embedding: &[f64], fwd: &Forward, mode: Assignment<'_>, d_value: f64, grad: &mut [f64]) {
    let k_count = bank.k();
    for k in 0..k_count {
        let c = fwd.outputs[k];
        let slope = d_value * fwd.beta[k] * c * (1.0 - c);
        grad[k] += slope * fwd.raw_logit;
        grad[k_count + k] += slope;
    }
    if let Assignment::Relaxed { tau, .. } = mode {
        // ∂β_k/∂z_j = β_k (δ_kj − β_j) / τ, so ∂value/∂z_j = β_j (c_j − value) / τ.
        let w = bank.weight_offset();
        let o = bank.offset_offset();
        let d = bank.dim();
        for j in 0..k_count {
            let dz = d_value * fwd.beta[j] * (fwd.outputs[j] - fwd.value) / tau;
            if dz == 0.0 {
                continue;
            }
            for (g, e) in grad[w + j * d..w + (j + 1) * d].iter_mut().zip(embedding) {
                *g += dz * e;
            }
            grad[o + j] += dz;
        }
    }
}

/// Weighted cross entropy `−t·log v − (1 − t)·log(1 − v)` on the clamped value
/// and its derivative in `v` (zero where the clamp is active).
fn soft_bce(value: f64, t: f64) -> (f64, f64) {
    let v = clamp_prob(value);
    let loss = -t * v.ln() - (1.0 - t) * (1.0 - v).ln();
    let d = if (EPS_LOG..=1.0 - EPS_LOG).contains(&value) {
        -t / v + (1.0 - t) / (1.0 - v)
    } else {
        0.0
    };
    (loss, d)
}

/// Propensity-calibration loss: cross entropy of the calibrated propensity
/// `p̄ = Σ_k β_k c_k(p̂)` against the observation label of each pair drawn
/// from `D_val`. Averaged over the batch.
///
/// `D_val` labels only the held-out share `f` of observations as positive,
/// so its label rate is `v = f·p / (1 − (1 − f)·p)` rather than `p`. With
/// `holdout_rate = f < 1` the cross entropy is taken on `v(p̄)`, which makes
/// `p̄` itself target the observation probability; `holdout_rate = 1` is the
/// plain cross entropy on `p̄`.
pub fn loss_propcal<S: ScoreSource + ?Sized>(
    bank: &ExpertBank,
    propensity_model: &S,
    batch: &[LabeledPair],
    mode: Assignment<'_>,
    holdout_rate: f64,
) -> Result<BankLoss> {
    if !(holdout_rate > 0.0 && holdout_rate <= 1.0) {
        return Err(Error::Config(format!("holdout rate must lie in (0, 1], got {holdout_rate}")));
    }
    let mut grad = vec![0.0; bank.params().len()];
    let mut loss = 0.0;
    let n = batch.len().max(1) as f64;
    let f = holdout_rate;
    for x in batch {
        let emb = propensity_model.user_embedding(x.user);
        let fwd = forward(bank, x.user, emb, propensity_model.score(x.user, x.item), mode)?;
        let denom = 1.0 - (1.0 - f) * fwd.value;
        let v = f * fwd.value / denom;
        let (l, d) = soft_bce(v, f64::from(x.label));
        loss += l / n;
        backward(bank, emb, &fwd, mode, d * f / (denom * denom) / n, &mut grad);
    }
    Ok(BankLoss {
        loss,
        grad,
        coef_above_one: 0,
    })
}

/// How the imputation-calibration loss uses the calibrated propensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ImpCalForm {
    /// Soft label `r/p̄`, unmodified. The label exceeds one for positives
    /// with `p̄ < r`, and the loss is then unbounded below in `r̄`.
    Label,
    /// Soft label `min(r/p̄, 1)`.
    ClampedLabel,
    /// Cross entropy against `r`, weighted by `1/p̄` and self-normalized over
    /// the batch.
    #[default]
    Weighted,
}

/// Imputation-calibration loss over validation observations, with
/// `r̄ = Σ_k β_k c_k(r̃)`. See [`ImpCalForm`] for the role of `p̄`.
///
/// `coef_above_one` counts pairs with `r/p̄ > 1` whatever the form.
pub fn loss_impcal<S: ScoreSource + ?Sized>(
    bank: &ExpertBank,
    imputation_model: &S,
    batch: &[Interaction],
    calibrated_propensity: &dyn Fn(usize, usize) -> f64,
    mode: Assignment<'_>,
    form: ImpCalForm,
) -> Result<BankLoss> {
    let mut grad = vec![0.0; bank.params().len()];
    let mut coef_above_one = 0;
    let weights: Vec<f64> = batch
        .iter()
        .map(|x| 1.0 / calibrated_propensity(x.user, x.item).max(EPS_LOG))
        .collect();
    let total_weight: f64 = match form {
        ImpCalForm::Weighted => weights.iter().sum(),
        _ => batch.len() as f64,
    };
    let mut loss = 0.0;
    for (x, &w) in batch.iter().zip(&weights) {
        let r = f64::from(x.rating);
        let coef = r * w;
        if coef > 1.0 {
            coef_above_one += 1;
        }
        let (target, scale) = match form {
            ImpCalForm::Label => (coef, 1.0),
            ImpCalForm::ClampedLabel => (coef.min(1.0), 1.0),
            ImpCalForm::Weighted => (r, w),
        };
        let emb = imputation_model.user_embedding(x.user);
        let fwd = forward(bank, x.user, emb, imputation_model.score(x.user, x.item), mode)?;
        let (l, d) = soft_bce(fwd.value, target);
        let scale = scale / total_weight.max(f64::MIN_POSITIVE);
        loss += scale * l;
        backward(bank, emb, &fwd, mode, scale * d, &mut grad);
    }
    Ok(BankLoss {
        loss,
        grad,
        coef_above_one,
    })
}
