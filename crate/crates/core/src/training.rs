//! Training loops: the propensity-stack pretraining, the tri-level joint
//! learning of prediction model, imputation model and imputation experts,
//! and the single-estimator baselines sharing the same batch schedule.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibration_pass, fit_experts, Assignment, BankRole, CalibrationTarget, ExpertBank, FitConfig, FitReport, ImpCalForm, TemperatureSchedule,
};
use crate::data::{seeded_rng, Grid, Interaction, InteractionTable, Split};
use crate::error::{Error, Result};
use crate::model::{AdamConfig, AdamState, ErrorKind, FactorModel, Role, WeightedTarget};
use crate::propensity::{train_propensity_classifier, PropensityConfig};

/// Debiasing method used to train the prediction model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Naive,
    Eib,
    Ips,
    Snips,
    DrJl,
    DceDr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Naive,
        Method::Eib,
        Method::Ips,
        Method::Snips,
        Method::DrJl,
        Method::DceDr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Eib => "eib",
            Method::Ips => "ips",
            Method::Snips => "snips",
            Method::DrJl => "dr-jl",
            Method::DceDr => "dce-dr",
        }
    }

    pub fn uses_propensity(self) -> bool {
        matches!(self, Method::Ips | Method::Snips | Method::DrJl | Method::DceDr)
    }

    pub fn uses_imputation(self) -> bool {
        matches!(self, Method::Eib | Method::DrJl | Method::DceDr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

fn default_epochs() -> usize {
    20
}
fn default_obs_batch() -> usize {
    128
}
fn default_calib_batch() -> usize {
    256
}
fn default_dim() -> usize {
    16
}
fn default_k() -> usize {
    5
}
fn default_init_std() -> f64 {
    0.1
}
fn default_model_adam() -> AdamConfig {
    AdamConfig::new(0.01, 0.3)
}
fn default_calibration_adam() -> AdamConfig {
    AdamConfig::new(0.01, 0.0)
}
fn default_bank_noise() -> f64 {
    0.1
}
fn default_t0() -> f64 {
    1.0
}
fn default_tq() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Epoch budget `Q`.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Mini-batch size over the observed training set.
    #[serde(default = "default_obs_batch")]
    pub obs_batch: usize,
    /// Pairs sampled from `D` per prediction step; by default the observed
    /// batch scaled by `|D| / |O|`.
    #[serde(default)]
    pub full_batch: Option<usize>,
    /// Mini-batch size for the imputation-expert pass over `O_val`.
    #[serde(default = "default_calib_batch")]
    pub calib_batch: usize,
    /// Embedding size of the prediction and imputation models.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Number of calibration experts per bank.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub error_kind: ErrorKind,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_model_adam")]
    pub prediction_adam: AdamConfig,
    #[serde(default = "default_model_adam")]
    pub imputation_adam: AdamConfig,
    /// Optimizer of the imputation experts; `lr = 0` freezes them.
    #[serde(default = "default_calibration_adam")]
    pub calibration_adam: AdamConfig,
    /// Standard deviation of the initial assignment weights.
    #[serde(default = "default_bank_noise")]
    pub bank_init_noise: f64,
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default = "default_tq")]
    pub tq: f64,
    /// Epochs without validation improvement before stopping; `None` trains
    /// for the full budget.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub impcal_form: ImpCalForm,
    /// Lower clip on propensities used in the losses; `None` disables.
    #[serde(default)]
    pub clip_threshold: Option<f64>,
    /// Fit the propensity experts against the holdout-rate link so that `p̄`
    /// targets the observation probability (see [`crate::calibration::loss_propcal`]).
    #[serde(default = "default_true")]
    pub holdout_correction: bool,
    #[serde(default)]
    pub propensity: PropensityConfig,
    #[serde(default)]
    pub propensity_calibration: FitConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            obs_batch: default_obs_batch(),
            full_batch: None,
            calib_batch: default_calib_batch(),
            dim: default_dim(),
            k: default_k(),
            error_kind: ErrorKind::default(),
            init_std: default_init_std(),
            prediction_adam: default_model_adam(),
            imputation_adam: default_model_adam(),
            calibration_adam: default_calibration_adam(),
            bank_init_noise: default_bank_noise(),
            t0: default_t0(),
            tq: default_tq(),
            patience: None,
            impcal_form: ImpCalForm::default(),
            clip_threshold: None,
            holdout_correction: true,
            propensity: PropensityConfig::default(),
            propensity_calibration: FitConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("obs_batch", self.obs_batch),
            ("calib_batch", self.calib_batch),
            ("dim", self.dim),
            ("k", self.k),
            ("full_batch", self.full_batch.unwrap_or(1)),
            ("propensity.batch_size", self.propensity.batch_size),
            ("propensity.dim", self.propensity.dim),
            ("propensity_calibration.batch_size", self.propensity_calibration.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if let Some(t) = self.clip_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("clip_threshold must lie in (0, 1), got {t}")));
            }
        }
        if !(self.t0 > 0.0 && self.tq > 0.0 && self.tq <= self.t0) {
            return Err(Error::Config("temperatures must satisfy 0 < tq <= t0".into()));
        }
        Ok(())
    }
}

/// Frozen propensity model `h_ψ` and its calibration experts.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityStack {
    pub model: FactorModel,
    pub bank: ExpertBank,
    pub classifier_losses: Vec<f64>,
    pub calibration: FitReport,
}

impl PropensityStack {
    /// Wraps an existing model with identity experts.
    pub fn identity(model: FactorModel, k: usize) -> Result<Self> {
        let bank = ExpertBank::identity(k, model.dim(), BankRole::Propensity)?;
        Ok(Self {
            model,
            bank,
            classifier_losses: Vec::new(),
            calibration: FitReport::default(),
        })
    }

    /// `p̂` over the full domain.
    pub fn raw_grid(&self) -> Grid {
        self.model.score_grid()
    }

    /// `p̄` over the full domain.
    pub fn calibrated_grid(&self) -> Result<Grid> {
        self.bank
            .calibrated_grid(&self.model, self.model.n_users(), self.model.n_items())
    }
}

/// Share of observations held out for validation.
pub fn holdout_rate(split: &Split) -> f64 {
    let val = split.val_obs.len() as f64;
    val / (val + split.train_obs.len() as f64)
}

/// Trains `h_ψ` to separate training observations from never-observed pairs,
/// then fits the propensity experts on `D_val` on top of the frozen model.
pub fn pretrain_propensity_stack(table: &InteractionTable, split: &Split, cfg: &TrainConfig) -> Result<PropensityStack> {
    cfg.validate()?;
    let pcfg = PropensityConfig {
        seed: cfg.seed,
        ..cfg.propensity.clone()
    };
    let fit = train_propensity_classifier(table, &split.train_obs, &pcfg)?;
    let mut bank = ExpertBank::new(cfg.k, pcfg.dim, BankRole::Propensity, cfg.bank_init_noise, cfg.seed)?;
    let fcfg = FitConfig {
        seed: cfg.seed,
        ..cfg.propensity_calibration.clone()
    };
    let target = CalibrationTarget::Propensity {
        pairs: &split.d_val,
        holdout_rate: if cfg.holdout_correction { holdout_rate(split) } else { 1.0 },
    };
    let calibration = fit_experts(&mut bank, &fit.model, target, &fcfg)?;
    Ok(PropensityStack {
        model: fit.model,
        bank,
        classifier_losses: fit.epoch_losses,
        calibration,
    })
}

/// One observed pair for the imputation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputationSample {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
    /// `p̄` (or `p̂`, or 1 for unweighted imputation).
    pub propensity: f64,
}

/// Imputation loss over observed pairs,
/// `mean o·(e(r̂, r̃) − e(r̂, r))² / p̄`, with gradient w.r.t. the imputation
/// model only; `r̂` and `p̄` are constants.
pub fn loss_imp_cal(
    imputation: &FactorModel,
    prediction: &FactorModel,
    batch: &[ImputationSample],
    kind: ErrorKind,
) -> (f64, Vec<f64>) {
    let mut grad = imputation.zero_grad();
    let mut loss = 0.0;
    let n = batch.len().max(1) as f64;
    for s in batch {
        let r_hat = prediction.predict(s.user, s.item);
        let (e0, e1) = kind.pair(r_hat);
        let r_tilde = imputation.predict(s.user, s.item);
        let e_hat = r_tilde * e1 + (1.0 - r_tilde) * e0;
        let e = if s.rating > 0 { e1 } else { e0 };
        let gap = e_hat - e;
        loss += gap * gap / s.propensity / n;
        let d_rtilde = 2.0 * gap * (e1 - e0) / s.propensity / n;
        imputation.accumulate_score_grad(s.user, s.item, d_rtilde, &mut grad);
    }
    (loss, grad)
}

/// One pair of a batch drawn from `D` for the prediction loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrSample {
    pub user: usize,
    pub item: usize,
    /// Rating if the pair is in the observed training set.
    pub label: Option<u8>,
    pub propensity: f64,
    /// `r̄` (or `r̃`), held constant.
    pub pseudo_label: f64,
}

/// Doubly robust prediction loss `mean (ē + o·(e − ē)/p̄)` over a batch of
/// `D`, with `ē = e(r̂, r̄)`. The gradient flows to the prediction model
/// through both `ē` and `e`.
pub fn loss_pred_dr_cal(prediction: &FactorModel, batch: &[DrSample], kind: ErrorKind) -> (f64, Vec<f64>) {
    let mut grad = prediction.zero_grad();
    let mut loss = 0.0;
    let n = batch.len().max(1) as f64;
    for s in batch {
        let r_hat = prediction.predict(s.user, s.item);
        let e_bar = kind.error(r_hat, s.pseudo_label);
        let de_bar = kind.derivative(r_hat, s.pseudo_label);
        let (value, d) = match s.label {
            Some(r) => {
                let t = f64::from(r);
                let w = 1.0 / s.propensity;
                (
                    e_bar + w * (kind.error(r_hat, t) - e_bar),
                    de_bar * (1.0 - w) + w * kind.derivative(r_hat, t),
                )
            }
            None => (e_bar, de_bar),
        };
        loss += value / n;
        prediction.accumulate_score_grad(s.user, s.item, d / n, &mut grad);
    }
    (loss, grad)
}

/// Prediction loss on an observed batch for the propensity-only and naive
/// estimators. `propensity = None` gives the naive mean; with
/// `self_normalized` the weights `1/p̂` are normalized within the batch.
pub fn loss_observed(
    prediction: &FactorModel,
    batch: &[Interaction],
    propensity: Option<&Grid>,
    self_normalized: bool,
    kind: ErrorKind,
) -> (f64, Vec<f64>) {
    let raw: Vec<f64> = batch
        .iter()
        .map(|x| propensity.map_or(1.0, |p| 1.0 / p.get(x.user, x.item)))
        .collect();
    let total = if self_normalized { raw.iter().sum() } else { batch.len() as f64 };
    let targets: Vec<WeightedTarget> = batch
        .iter()
        .zip(&raw)
        .map(|(x, &w)| WeightedTarget {
            user: x.user,
            item: x.item,
            target: f64::from(x.rating),
            weight: w / total,
        })
        .collect();
    crate::model::gradient(prediction, &targets, kind)
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub temperature: f64,
    pub prediction_loss: f64,
    #[serde(default)]
    pub imputation_loss: Option<f64>,
    #[serde(default)]
    pub calibration_loss: Option<f64>,
    #[serde(default)]
    pub coef_above_one: usize,
    pub validation_loss: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for r in history {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Everything a training run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedStack {
    pub method: Method,
    pub prediction: FactorModel,
    pub imputation: Option<FactorModel>,
    pub imputation_bank: Option<ExpertBank>,
    pub propensity: Option<PropensityStack>,
    pub history: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct StackMeta {
    method: Method,
    best_epoch: usize,
    best_validation_loss: f64,
    classifier_losses: Vec<f64>,
    calibration: FitReport,
}

impl TrainedStack {
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        self.prediction.predict(user, item)
    }

    /// Writes each component's checkpoint plus `stack.json` and
    /// `history.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.prediction.save(&dir.join("prediction.bin"))?;
        if let Some(m) = &self.imputation {
            m.save(&dir.join("imputation.bin"))?;
        }
        if let Some(b) = &self.imputation_bank {
            b.save(&dir.join("imputation_bank.bin"))?;
        }
        let (classifier_losses, calibration) = match &self.propensity {
            Some(p) => {
                p.model.save(&dir.join("propensity.bin"))?;
                p.bank.save(&dir.join("propensity_bank.bin"))?;
                (p.classifier_losses.clone(), p.calibration.clone())
            }
            None => (Vec::new(), FitReport::default()),
        };
        let meta = StackMeta {
            method: self.method,
            best_epoch: self.best_epoch,
            best_validation_loss: self.best_validation_loss,
            classifier_losses,
            calibration,
        };
        fs::write(dir.join("stack.json"), serde_json::to_string_pretty(&meta)?)?;
        write_history(&dir.join("history.jsonl"), &self.history)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("stack.json");
        if !meta_path.exists() {
            return Err(Error::Data(format!("no checkpoint at {}", dir.display())));
        }
        let meta: StackMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        let optional_model = |name: &str| -> Result<Option<FactorModel>> {
            let p = dir.join(name);
            p.exists().then(|| FactorModel::load(&p)).transpose()
        };
        let optional_bank = |name: &str| -> Result<Option<ExpertBank>> {
            let p = dir.join(name);
            p.exists().then(|| ExpertBank::load(&p)).transpose()
        };
        let propensity = match (optional_model("propensity.bin")?, optional_bank("propensity_bank.bin")?) {
            (Some(model), Some(bank)) => Some(PropensityStack {
                model,
                bank,
                classifier_losses: meta.classifier_losses,
                calibration: meta.calibration,
            }),
            _ => None,
        };
        Ok(Self {
            method: meta.method,
            prediction: FactorModel::load(&dir.join("prediction.bin"))?,
            imputation: optional_model("imputation.bin")?,
            imputation_bank: optional_bank("imputation_bank.bin")?,
            propensity,
            history: read_history(&dir.join("history.jsonl"))?,
            best_epoch: meta.best_epoch,
            best_validation_loss: meta.best_validation_loss,
        })
    }
}

fn diverged(what: &str) -> Error {
    Error::Divergence(format!("{what} became non-finite"))
}

/// Tri-level joint learning with a pretrained, frozen propensity stack.
///
/// Per epoch, for each mini-batch of the observed training set: one
/// imputation step on the weighted imputation loss, then one prediction
/// step on a batch drawn uniformly (with replacement) from `D`. After the
/// pass over the observed set, one pass over `O_val` updates the imputation
/// experts, with the Gumbel-Softmax temperature annealed per epoch.
pub fn trilevel_train(
    table: &InteractionTable,
    split: &Split,
    stack: &PropensityStack,
    cfg: &TrainConfig,
) -> Result<TrainedStack> {
    run(Method::DceDr, table, split, Some(stack), cfg)
}

/// The same loop without any calibration: raw `p̂` and `r̃`.
pub fn train_dr_jl(table: &InteractionTable, split: &Split, stack: &PropensityStack, cfg: &TrainConfig) -> Result<TrainedStack> {
    run(Method::DrJl, table, split, Some(stack), cfg)
}

/// Trains any method, pretraining the propensity stack when needed.
pub fn train_method(method: Method, table: &InteractionTable, split: &Split, cfg: &TrainConfig) -> Result<TrainedStack> {
    let stack = if method.uses_propensity() {
        Some(pretrain_propensity_stack(table, split, cfg)?)
    } else {
        None
    };
    run(method, table, split, stack.as_ref(), cfg)
}

/// Trains a method on a given propensity stack (ignored by methods that do
/// not use propensities).
pub fn train_with_stack(
    method: Method,
    table: &InteractionTable,
    split: &Split,
    stack: Option<&PropensityStack>,
    cfg: &TrainConfig,
) -> Result<TrainedStack> {
    run(method, table, split, stack, cfg)
}

struct Snapshot {
    prediction: FactorModel,
    imputation: Option<FactorModel>,
    bank: Option<ExpertBank>,
}

fn run(
    method: Method,
    table: &InteractionTable,
    split: &Split,
    stack: Option<&PropensityStack>,
    cfg: &TrainConfig,
) -> Result<TrainedStack> {
    cfg.validate()?;
    if split.train_obs.is_empty() {
        return Err(Error::Data("training set has no observations".into()));
    }
    let (nu, ni) = (table.n_users(), table.n_items());
    let kind = cfg.error_kind;

    let mut labels: Grid<i8> = Grid::filled(nu, ni, -1);
    for x in &split.train_obs {
        labels.set(x.user, x.item, x.rating as i8);
    }

    let propensity = if method.uses_propensity() {
        let stack = stack.ok_or_else(|| Error::Config(format!("method {method} needs a propensity model")))?;
        if (stack.model.n_users(), stack.model.n_items()) != (nu, ni) {
            return Err(Error::shape(format!("{nu}x{ni}"), format!("{}x{}", stack.model.n_users(), stack.model.n_items())));
        }
        let grid = if method == Method::DceDr {
            stack.calibrated_grid()?
        } else {
            stack.raw_grid()
        };
        Some(match cfg.clip_threshold {
            Some(t) => grid.map(|p| p.max(t)),
            None => grid,
        })
    } else {
        None
    };
    let p_at = |u: usize, i: usize| propensity.as_ref().map_or(1.0, |g| g.get(u, i));

    let mut prediction = FactorModel::random(nu, ni, cfg.dim, Role::Prediction, cfg.init_std, cfg.seed);
    let mut imputation = method
        .uses_imputation()
        .then(|| FactorModel::random(nu, ni, cfg.dim, Role::Imputation, cfg.init_std, cfg.seed));
    let mut bank = if method == Method::DceDr {
        Some(ExpertBank::new(
            cfg.k,
            cfg.dim,
            BankRole::Imputation,
            cfg.bank_init_noise,
            cfg.seed.wrapping_add(1),
        )?)
    } else {
        None
    };

    let mut pred_adam = AdamState::new(cfg.prediction_adam, prediction.num_params());
    let mut imp_adam = imputation
        .as_ref()
        .map(|m| AdamState::new(cfg.imputation_adam, m.num_params()));
    let mut bank_adam = bank
        .as_ref()
        .map(|b| AdamState::new(cfg.calibration_adam, b.params().len()));

    // Batching and Gumbel noise draw from separate streams, so the
    // calibration pass never shifts the batch schedule.
    let mut batch_rng = seeded_rng(cfg.seed, 40);
    let mut gumbel_rng = seeded_rng(cfg.seed, 41);
    let domain = nu * ni;
    let full_batch = cfg
        .full_batch
        .unwrap_or_else(|| ((cfg.obs_batch * domain) as f64 / split.train_obs.len() as f64).round() as usize)
        .max(1);
    let schedule = TemperatureSchedule::new(cfg.t0, cfg.tq, cfg.epochs)?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Snapshot)> = None;

    for epoch in 0..cfg.epochs {
        let tau = schedule.temperature(epoch)?;
        let mut order: Vec<usize> = (0..split.train_obs.len()).collect();
        order.shuffle(&mut batch_rng);

        let (mut pred_total, mut imp_total, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.obs_batch) {
            let obs: Vec<Interaction> = chunk.iter().map(|&j| split.train_obs[j]).collect();

            if let (Some(phi), Some(adam)) = (imputation.as_mut(), imp_adam.as_mut()) {
                let samples: Vec<ImputationSample> = obs
                    .iter()
                    .map(|x| ImputationSample {
                        user: x.user,
                        item: x.item,
                        rating: x.rating,
                        propensity: p_at(x.user, x.item),
                    })
                    .collect();
                let (loss, grad) = loss_imp_cal(phi, &prediction, &samples, kind);
                if !loss.is_finite() {
                    return Err(diverged("imputation loss"));
                }
                imp_total += loss;
                adam.step(phi.params_mut(), &grad);
            }

            let (loss, grad) = match method {
                Method::Naive => loss_observed(&prediction, &obs, None, false, kind),
                Method::Ips => loss_observed(&prediction, &obs, propensity.as_ref(), false, kind),
                Method::Snips => loss_observed(&prediction, &obs, propensity.as_ref(), true, kind),
                Method::Eib | Method::DrJl | Method::DceDr => {
                    let phi = imputation.as_ref().expect("imputation model present");
                    let mut samples = Vec::with_capacity(full_batch);
                    for _ in 0..full_batch {
                        let k = batch_rng.gen_range(0..domain);
                        let (u, i) = (k / ni, k % ni);
                        let label = labels.get(u, i);
                        let r_tilde = phi.predict(u, i);
                        let pseudo_label = match &bank {
                            Some(b) => b.calibrated_score(u, phi.user_embedding(u), r_tilde, Assignment::Argmax)?,
                            None => r_tilde,
                        };
                        samples.push(DrSample {
                            user: u,
                            item: i,
                            label: (label >= 0).then_some(label as u8),
                            propensity: p_at(u, i),
                            pseudo_label,
                        });
                    }
                    loss_pred_dr_cal(&prediction, &samples, kind)
                }
            };
            if !loss.is_finite() {
                return Err(diverged("prediction loss"));
            }
            pred_total += loss;
            pred_adam.step(prediction.params_mut(), &grad);
            steps += 1;
        }
        if !prediction.is_finite() || imputation.as_ref().is_some_and(|m| !m.is_finite()) {
            return Err(diverged("model parameters"));
        }

        let mut calibration_loss = None;
        let mut coef_above_one = 0;
        if let (Some(b), Some(adam), Some(phi), Some(grid)) =
            (bank.as_mut(), bank_adam.as_mut(), imputation.as_ref(), propensity.as_ref())
        {
            if !split.val_obs.is_empty() {
                let mut idx: Vec<usize> = (0..split.val_obs.len()).collect();
                idx.shuffle(&mut gumbel_rng);
                let pb = |u: usize, i: usize| grid.get(u, i);
                let target = CalibrationTarget::Imputation {
                    pairs: &split.val_obs,
                    calibrated_propensity: &pb,
                    form: cfg.impcal_form,
                };
                let (loss, warnings) = calibration_pass(
                    b,
                    adam,
                    phi,
                    target,
                    &idx,
                    cfg.calib_batch,
                    tau,
                    &mut gumbel_rng,
                )?;
                calibration_loss = Some(loss);
                coef_above_one = warnings;
            }
        }

        let validation_loss = validation_loss(
            method,
            &prediction,
            imputation.as_ref(),
            bank.as_ref(),
            &split.val_obs,
            &p_at,
            kind,
        )?;
        if !validation_loss.is_finite() {
            return Err(diverged("validation loss"));
        }
        history.push(EpochRecord {
            epoch,
            temperature: tau,
            prediction_loss: pred_total / steps.max(1) as f64,
            imputation_loss: imputation.as_ref().map(|_| imp_total / steps.max(1) as f64),
            calibration_loss,
            coef_above_one,
            validation_loss,
        });

        let improved = best.as_ref().map_or(true, |(_, v, _)| validation_loss < *v);
        if improved {
            best = Some((
                epoch,
                validation_loss,
                Snapshot {
                    prediction: prediction.clone(),
                    imputation: imputation.clone(),
                    bank: bank.clone(),
                },
            ));
        }
        if let (Some(patience), Some((best_epoch, _, _))) = (cfg.patience, best.as_ref()) {
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }

    let (best_epoch, best_validation_loss, snapshot) = best.expect("at least one epoch");
    if cfg.patience.is_some() {
        prediction = snapshot.prediction;
        imputation = snapshot.imputation;
        bank = snapshot.bank;
    }
    Ok(TrainedStack {
        method,
        prediction,
        imputation,
        imputation_bank: bank,
        propensity: if method.uses_propensity() { stack.cloned() } else { None },
        history,
        best_epoch,
        best_validation_loss,
    })
}

/// The method's own estimator of the prediction loss on `O_val`; every pair
/// there is observed, so the DR form reduces to `ē + (e − ē)/p̄`.
fn validation_loss(
    method: Method,
    prediction: &FactorModel,
    imputation: Option<&FactorModel>,
    bank: Option<&ExpertBank>,
    val: &[Interaction],
    p_at: &dyn Fn(usize, usize) -> f64,
    kind: ErrorKind,
) -> Result<f64> {
    if val.is_empty() {
        return Ok(0.0);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for x in val {
        let r_hat = prediction.predict(x.user, x.item);
        let e = kind.error(r_hat, f64::from(x.rating));
        let p = p_at(x.user, x.item);
        let value = match (method, imputation) {
            (Method::Naive, _) => e,
            (Method::Ips, _) => e / p,
            (Method::Snips, _) => {
                num += e / p;
                den += 1.0 / p;
                continue;
            }
            (_, Some(phi)) => {
                let r_tilde = phi.predict(x.user, x.item);
                let pseudo = match bank {
                    Some(b) => b.calibrated_score(
                        x.user,
                        phi.user_embedding(x.user),
                        r_tilde,
                        Assignment::Argmax,
                    )?,
                    None => r_tilde,
                };
                let e_bar = kind.error(r_hat, pseudo);
                e_bar + (e - e_bar) / p
            }
            (_, None) => e,
        };
        num += value;
        den += 1.0;
    }
    Ok(num / den)
}
