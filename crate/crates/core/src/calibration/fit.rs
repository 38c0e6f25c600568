use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{loss_impcal, ImpCalForm, loss_propcal, Assignment, BankLoss, ExpertBank, ScoreSource, TemperatureSchedule, UserNoise};
use crate::data::{seeded_rng, Interaction, LabeledPair};
use crate::error::{Error, Result};
use crate::model::{AdamConfig, AdamState};

/// Calibration set and loss selector for [`fit_experts`].
#[derive(Clone, Copy)]
pub enum CalibrationTarget<'a> {
    /// Observation labels over `D_val`, whose positives are the held-out
    /// share `holdout_rate` of all observations.
    Propensity {
        pairs: &'a [LabeledPair],
        holdout_rate: f64,
    },
    /// Validation ratings weighted by the calibrated propensity.
    Imputation {
        pairs: &'a [Interaction],
        calibrated_propensity: &'a dyn Fn(usize, usize) -> f64,
        form: ImpCalForm,
    },
}

impl<'a> CalibrationTarget<'a> {
    /// Propensity target with the plain cross entropy on `p̄`.
    pub fn propensity(pairs: &'a [LabeledPair]) -> Self {
        CalibrationTarget::Propensity {
            pairs,
            holdout_rate: 1.0,
        }
    }

    fn len(&self) -> usize {
        match self {
            CalibrationTarget::Propensity { pairs, .. } => pairs.len(),
            CalibrationTarget::Imputation { pairs, .. } => pairs.len(),
        }
    }

    fn user(&self, idx: usize) -> usize {
        match self {
            CalibrationTarget::Propensity { pairs, .. } => pairs[idx].user,
            CalibrationTarget::Imputation { pairs, .. } => pairs[idx].user,
        }
    }
}

fn default_t0() -> f64 {
    1.0
}
fn default_tq() -> f64 {
    1e-3
}
fn default_negative_rate() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default = "default_tq")]
    pub tq: f64,
    /// Fraction of `D_val` negatives kept each epoch (1.0 keeps all).
    #[serde(default = "default_negative_rate")]
    pub negative_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 1024,
            adam: AdamConfig::new(0.05, 0.0),
            t0: default_t0(),
            tq: default_tq(),
            negative_rate: default_negative_rate(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epoch_losses: Vec<f64>,
    pub temperatures: Vec<f64>,
    /// Pairs seen with an imputation-loss coefficient `r/p̄ > 1`.
    pub coef_above_one: usize,
}

/// One pass over `indices` in mini-batches; returns the mean loss and the
/// count of coefficients above one.
#[allow(clippy::too_many_arguments)]
pub(crate) fn calibration_pass<S: ScoreSource + ?Sized, R: Rng>(
    bank: &mut ExpertBank,
    adam: &mut AdamState,
    source: &S,
    target: CalibrationTarget<'_>,
    indices: &[usize],
    batch_size: usize,
    tau: f64,
    rng: &mut R,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut warnings = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let noise = UserNoise::draw(chunk.iter().map(|&j| target.user(j)), bank.k(), rng);
        let mode = Assignment::Relaxed { tau, noise: &noise };
        let BankLoss {
            loss,
            grad,
            coef_above_one,
        } = match target {
            CalibrationTarget::Propensity { pairs, holdout_rate } => {
                let batch: Vec<LabeledPair> = chunk.iter().map(|&j| pairs[j]).collect();
                loss_propcal(bank, source, &batch, mode, holdout_rate)?
            }
            CalibrationTarget::Imputation {
                pairs,
                calibrated_propensity,
                form,
            } => {
                let batch: Vec<Interaction> = chunk.iter().map(|&j| pairs[j]).collect();
                loss_impcal(bank, source, &batch, calibrated_propensity, mode, form)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::Divergence("calibration loss is not finite".into()));
        }
        total += loss * chunk.len() as f64;
        warnings += coef_above_one;
        adam.step(bank.params_mut(), &grad);
    }
    if !bank.is_finite() {
        return Err(Error::Divergence("expert bank parameters are not finite".into()));
    }
    Ok((total / indices.len().max(1) as f64, warnings))
}

/// Fits a bank on top of a frozen base model with Adam, annealing the
/// Gumbel-Softmax temperature once per epoch.
pub fn fit_experts<S: ScoreSource + ?Sized>(
    bank: &mut ExpertBank,
    source: &S,
    target: CalibrationTarget<'_>,
    cfg: &FitConfig,
) -> Result<FitReport> {
    if target.len() == 0 {
        return Err(Error::Data("calibration set is empty".into()));
    }
    if bank.dim() != source.embedding_dim() {
        return Err(Error::shape(bank.dim(), source.embedding_dim()));
    }
    let schedule = TemperatureSchedule::new(cfg.t0, cfg.tq, cfg.epochs.max(1))?;
    let mut adam = AdamState::new(cfg.adam, bank.params().len());
    let mut rng = seeded_rng(cfg.seed, 31);
    let mut report = FitReport::default();

    let all: Vec<usize> = (0..target.len()).collect();
    for epoch in 0..cfg.epochs {
        let tau = schedule.temperature(epoch)?;
        let mut indices: Vec<usize> = match target {
            CalibrationTarget::Propensity { pairs, .. } if cfg.negative_rate < 1.0 => all
                .iter()
                .copied()
                .filter(|&j| pairs[j].label == 1 || rng.gen::<f64>() < cfg.negative_rate)
                .collect(),
            _ => all.clone(),
        };
        indices.shuffle(&mut rng);
        let (loss, warnings) =
            calibration_pass(bank, &mut adam, source, target, &indices, cfg.batch_size, tau, &mut rng)?;
        report.epoch_losses.push(loss);
        report.temperatures.push(tau);
        report.coef_above_one += warnings;
    }
    Ok(report)
}
