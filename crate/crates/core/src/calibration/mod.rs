//! Calibration experts.
//!
//! A bank holds `K` Platt maps `c_k(p) = σ(a_k · logit(p) + b_k)` and a
//! single-layer assignment network `α_u = softmax(W·E_u + c)` over the user
//! embedding `E_u` of a frozen base model. During training the per-user
//! assignment is a Gumbel-Softmax relaxed sample `β_u`; at evaluation time
//! it is the argmax one-hot of `α_u`.

mod fit;
mod loss;
mod reliability;

pub use fit::{fit_experts, CalibrationTarget, FitConfig, FitReport};
pub(crate) use fit::calibration_pass;
pub use loss::{loss_impcal, loss_propcal, BankLoss, ImpCalForm};
pub use reliability::{ece_binned, ece_pairwise, mce_pairwise, ReliabilityBin, ReliabilityReport};

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{seeded_rng, Grid};
use crate::error::{Error, Result};
use crate::model::{ByteReader, FactorModel};
use crate::{clamp_prob, logit, sigmoid};

/// Platt scaling map `σ(a · logit(p) + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattExpert {
    pub a: f64,
    pub b: f64,
}

impl PlattExpert {
    pub const IDENTITY: PlattExpert = PlattExpert { a: 1.0, b: 0.0 };

    pub fn apply(&self, p: f64) -> f64 {
        sigmoid(self.a * logit(clamp_prob(p)) + self.b)
    }

    /// `self ∘ inner`, i.e. `p ↦ self.apply(inner.apply(p))`.
    pub fn compose(&self, inner: &PlattExpert) -> PlattExpert {
        PlattExpert {
            a: self.a * inner.a,
            b: self.a * inner.b + self.b,
        }
    }
}

pub fn platt_apply(expert: &PlattExpert, p: f64) -> f64 {
    expert.apply(p)
}

/// Which base model a bank calibrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankRole {
    Imputation,
    Propensity,
}

/// Frozen model whose scores a bank calibrates.
pub trait ScoreSource {
    fn score(&self, user: usize, item: usize) -> f64;
    fn user_embedding(&self, user: usize) -> &[f64];
    fn embedding_dim(&self) -> usize;
}

impl ScoreSource for FactorModel {
    fn score(&self, user: usize, item: usize) -> f64 {
        self.predict(user, item)
    }
    fn user_embedding(&self, user: usize) -> &[f64] {
        FactorModel::user_embedding(self, user)
    }
    fn embedding_dim(&self) -> usize {
        self.dim()
    }
}

/// Precomputed scores and user embeddings, for scorers that are not
/// factor models (heuristics, externally produced grids).
#[derive(Debug, Clone, PartialEq)]
pub struct FixedScores {
    pub scores: Grid,
    pub embeddings: Vec<f64>,
    pub dim: usize,
}

impl FixedScores {
    pub fn new(scores: Grid, embeddings: Vec<f64>, dim: usize) -> Result<Self> {
        if embeddings.len() != scores.rows() * dim {
            return Err(Error::shape(scores.rows() * dim, embeddings.len()));
        }
        Ok(Self {
            scores,
            embeddings,
            dim,
        })
    }
}

impl ScoreSource for FixedScores {
    fn score(&self, user: usize, item: usize) -> f64 {
        clamp_prob(self.scores.get(user, item))
    }
    fn user_embedding(&self, user: usize) -> &[f64] {
        &self.embeddings[user * self.dim..(user + 1) * self.dim]
    }
    fn embedding_dim(&self) -> usize {
        self.dim
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `K` i.i.d. standard Gumbel draws.
pub fn gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| {
            // Open interval keeps both logarithms finite.
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Relaxed sample `softmax((log α + g) / τ)` with caller-supplied noise `g`.
/// Zero noise gives `softmax(log α / τ)`.
pub fn gumbel_softmax_with_noise(alpha: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if alpha.len() != noise.len() {
        return Err(Error::shape(alpha.len(), noise.len()));
    }
    let z: Vec<f64> = alpha
        .iter()
        .zip(noise)
        .map(|(&a, &g)| (a.ln() + g) / tau)
        .collect();
    Ok(softmax(&z))
}

pub fn gumbel_softmax<R: Rng + ?Sized>(alpha: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    let g = gumbel_noise(alpha.len(), rng);
    gumbel_softmax_with_noise(alpha, tau, &g)
}

/// Exponential annealing `τ_q = T0 · (TQ / T0)^(q / Q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub t0: f64,
    pub tq: f64,
    pub epochs: usize,
}

impl TemperatureSchedule {
    pub fn new(t0: f64, tq: f64, epochs: usize) -> Result<Self> {
        if !(t0 > tq && tq > 0.0) {
            return Err(Error::Config(format!(
                "temperature schedule needs T0 > TQ > 0, got T0={t0}, TQ={tq}"
            )));
        }
        if epochs == 0 {
            return Err(Error::Config("temperature schedule needs Q ≥ 1".into()));
        }
        Ok(Self { t0, tq, epochs })
    }

    /// Initial temperature 1 and terminal temperature 10⁻³.
    pub fn standard(epochs: usize) -> Self {
        Self {
            t0: 1.0,
            tq: 1e-3,
            epochs: epochs.max(1),
        }
    }

    pub fn temperature(&self, epoch: usize) -> Result<f64> {
        if epoch > self.epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        if epoch == 0 {
            return Ok(self.t0);
        }
        if epoch == self.epochs {
            return Ok(self.tq);
        }
        Ok(self.t0 * (self.tq / self.t0).powf(epoch as f64 / self.epochs as f64))
    }
}

/// Per-user Gumbel noise, drawn once per user per batch and reused across
/// that user's pairs.
#[derive(Debug, Clone, Default)]
pub struct UserNoise {
    k: usize,
    noise: HashMap<usize, Vec<f64>>,
}

impl UserNoise {
    pub fn draw<R: Rng + ?Sized>(users: impl IntoIterator<Item = usize>, k: usize, rng: &mut R) -> Self {
        let mut noise = HashMap::new();
        for u in users {
            noise.entry(u).or_insert_with(|| gumbel_noise(k, rng));
        }
        Self { k, noise }
    }

    pub fn zeros(users: impl IntoIterator<Item = usize>, k: usize) -> Self {
        let noise = users.into_iter().map(|u| (u, vec![0.0; k])).collect();
        Self { k, noise }
    }

    pub fn get(&self, user: usize) -> &[f64] {
        self.noise
            .get(&user)
            .map(Vec::as_slice)
            .unwrap_or_else(|| panic!("no Gumbel noise drawn for user {user} (K={})", self.k))
    }
}

/// How per-user assignment vectors are formed.
#[derive(Debug, Clone, Copy)]
pub enum Assignment<'a> {
    /// Gumbel-Softmax relaxation at temperature `tau` with fixed noise.
    Relaxed { tau: f64, noise: &'a UserNoise },
    /// One-hot on `argmax α_u`.
    Argmax,
}

/// `K` Platt experts plus their assignment network.
///
/// Flat parameter layout: `[a_1..a_K | b_1..b_K | W (K × d, row-major) | c_1..c_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    k: usize,
    dim: usize,
    role: BankRole,
    params: Vec<f64>,
}

impl ExpertBank {
    /// Identity experts and a zero assignment network (uniform `α`).
    pub fn identity(k: usize, dim: usize, role: BankRole) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("an expert bank needs K ≥ 1".into()));
        }
        let mut params = vec![0.0; 2 * k + k * dim + k];
        params[..k].fill(1.0);
        Ok(Self {
            k,
            dim,
            role,
            params,
        })
    }

    /// Identity experts with `N(0, noise²)` assignment weights.
    pub fn new(k: usize, dim: usize, role: BankRole, noise: f64, seed: u64) -> Result<Self> {
        let mut bank = Self::identity(k, dim, role)?;
        let mut rng = seeded_rng(seed, 30);
        let w = bank.weight_offset();
        for p in &mut bank.params[w..w + k * dim] {
            let z: f64 = rng.sample(StandardNormal);
            *p = noise * z;
        }
        Ok(bank)
    }

    pub fn k(&self) -> usize {
        self.k
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn role(&self) -> BankRole {
        self.role
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn weight_offset(&self) -> usize {
        2 * self.k
    }
    pub(crate) fn offset_offset(&self) -> usize {
        2 * self.k + self.k * self.dim
    }

    pub fn expert(&self, k: usize) -> PlattExpert {
        PlattExpert {
            a: self.params[k],
            b: self.params[self.k + k],
        }
    }

    pub fn experts(&self) -> Vec<PlattExpert> {
        (0..self.k).map(|k| self.expert(k)).collect()
    }

    pub fn set_expert(&mut self, k: usize, expert: PlattExpert) {
        self.params[k] = expert.a;
        self.params[self.k + k] = expert.b;
    }

    /// Sets row `k` of the assignment weights and its offset.
    pub fn set_assignment_row(&mut self, k: usize, weights: &[f64], offset: f64) {
        assert_eq!(weights.len(), self.dim);
        let w = self.weight_offset() + k * self.dim;
        self.params[w..w + self.dim].copy_from_slice(weights);
        let c = self.offset_offset();
        self.params[c + k] = offset;
    }

    pub fn assignment_logits(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.dim {
            return Err(Error::shape(self.dim, embedding.len()));
        }
        let w = self.weight_offset();
        let c = self.offset_offset();
        Ok((0..self.k)
            .map(|k| {
                let row = &self.params[w + k * self.dim..w + (k + 1) * self.dim];
                row.iter().zip(embedding).map(|(a, b)| a * b).sum::<f64>() + self.params[c + k]
            })
            .collect())
    }

    /// `α_u = softmax(W·E_u + c)`.
    pub fn assignment_probs(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.assignment_logits(embedding)?))
    }

    /// Assignment vector for one user under `mode`.
    pub fn assignment(&self, user: usize, embedding: &[f64], mode: Assignment<'_>) -> Result<Vec<f64>> {
        let z = self.assignment_logits(embedding)?;
        match mode {
            Assignment::Argmax => {
                let best = argmax(&z);
                let mut beta = vec![0.0; self.k];
                beta[best] = 1.0;
                Ok(beta)
            }
            Assignment::Relaxed { tau, noise } => {
                if !(tau > 0.0) {
                    return Err(Error::Config(format!("temperature must be positive, got {tau}")));
                }
                // log α differs from z by a constant, which softmax ignores.
                let g = noise.get(user);
                let scaled: Vec<f64> = z.iter().zip(g).map(|(z, g)| (z + g) / tau).collect();
                Ok(softmax(&scaled))
            }
        }
    }

    /// `Σ_k β_k · c_k(raw)`.
    pub fn mix(&self, raw: f64, beta: &[f64]) -> f64 {
        beta.iter()
            .enumerate()
            .filter(|(_, &b)| b != 0.0)
            .map(|(k, &b)| b * self.expert(k).apply(raw))
            .sum()
    }

    /// Calibrated score `p̄` (or `r̄`) for one pair.
    pub fn calibrated_score(
        &self,
        user: usize,
        embedding: &[f64],
        raw_score: f64,
        mode: Assignment<'_>,
    ) -> Result<f64> {
        let beta = self.assignment(user, embedding, mode)?;
        Ok(self.mix(raw_score, &beta))
    }

    /// Deterministic calibrated grid over the full domain (argmax assignment).
    pub fn calibrated_grid<S: ScoreSource + ?Sized>(&self, source: &S, n_users: usize, n_items: usize) -> Result<Grid> {
        let mut betas = Vec::with_capacity(n_users);
        for u in 0..n_users {
            betas.push(self.assignment(u, source.user_embedding(u), Assignment::Argmax)?);
        }
        Ok(Grid::from_fn(n_users, n_items, |u, i| {
            self.mix(source.score(u, i), &betas[u])
        }))
    }

    /// Index of the argmax expert for each user.
    pub fn user_assignments<S: ScoreSource + ?Sized>(&self, source: &S, n_users: usize) -> Result<Vec<usize>> {
        (0..n_users)
            .map(|u| Ok(argmax(&self.assignment_logits(source.user_embedding(u))?)))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    const MAGIC: &'static [u8; 8] = b"DCEXB\0\0\0";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.params.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.push(match self.role {
            BankRole::Imputation => 1,
            BankRole::Propensity => 2,
        });
        out.extend_from_slice(&(self.k as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != Self::MAGIC {
            return Err(Error::Data("not an expert-bank checkpoint".into()));
        }
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(Error::Data(format!("unsupported bank version {version}")));
        }
        let role = match r.take(1)?[0] {
            1 => BankRole::Imputation,
            2 => BankRole::Propensity,
            t => return Err(Error::Data(format!("unknown bank role {t}"))),
        };
        let k = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let mut bank = Self::identity(k, dim, role)?;
        for p in bank.params.iter_mut() {
            *p = r.f64()?;
        }
        r.finish()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = k;
        }
    }
    best
}
