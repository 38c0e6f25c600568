//! Sigmoid-output matrix factorization with analytic gradients, prediction
//! error functions, and an Adam optimizer with decoupled weight decay.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::seeded_rng;
use crate::error::{Error, Result};
use crate::{clamp_prob, sigmoid, EPS_LOG};

/// Prediction error family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    #[default]
    Bce,
    Mse,
}

impl ErrorKind {
    /// Errors against hard labels: `(e⁽⁰⁾, e⁽¹⁾)`.
    pub fn pair(self, r_hat: f64) -> (f64, f64) {
        let r = clamp_prob(r_hat);
        match self {
            ErrorKind::Bce => (-(1.0 - r).ln(), -r.ln()),
            ErrorKind::Mse => (r * r, (1.0 - r) * (1.0 - r)),
        }
    }

    /// Error against a possibly soft target `t ∈ [0, 1]`, defined as the
    /// Bernoulli(t) mixture `t·e⁽¹⁾ + (1 − t)·e⁽⁰⁾`. For BCE this is the usual
    /// cross entropy; for MSE it is the expected squared error.
    pub fn error(self, r_hat: f64, target: f64) -> f64 {
        let (e0, e1) = self.pair(r_hat);
        target * e1 + (1.0 - target) * e0
    }

    /// Derivatives `(de⁽⁰⁾/dr̂, de⁽¹⁾/dr̂)` of the clamped error pair.
    pub fn pair_derivative(self, r_hat: f64) -> (f64, f64) {
        if !(EPS_LOG..=1.0 - EPS_LOG).contains(&r_hat) {
            return (0.0, 0.0);
        }
        match self {
            ErrorKind::Bce => (1.0 / (1.0 - r_hat), -1.0 / r_hat),
            ErrorKind::Mse => (2.0 * r_hat, -2.0 * (1.0 - r_hat)),
        }
    }

    pub fn derivative(self, r_hat: f64, target: f64) -> f64 {
        let (d0, d1) = self.pair_derivative(r_hat);
        target * d1 + (1.0 - target) * d0
    }
}

/// Checked variant of [`ErrorKind::error`] that rejects non-finite input.
pub fn error(kind: ErrorKind, r_hat: f64, target: f64) -> Result<f64> {
    if !r_hat.is_finite() || !target.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite error input (r_hat={r_hat}, target={target})"
        )));
    }
    Ok(kind.error(r_hat, target))
}

pub fn error_pair(kind: ErrorKind, r_hat: f64) -> Result<(f64, f64)> {
    if !r_hat.is_finite() {
        return Err(Error::Divergence(format!("non-finite prediction {r_hat}")));
    }
    Ok(kind.pair(r_hat))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prediction,
    Imputation,
    Propensity,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Prediction => 0,
            Role::Imputation => 1,
            Role::Propensity => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Role::Prediction,
            1 => Role::Imputation,
            2 => Role::Propensity,
            t => return Err(Error::Data(format!("unknown role tag {t}"))),
        })
    }
}

/// Matrix-factorization scorer
/// `σ(⟨P_u, Q_i⟩ + b_u + b_i + g)`, clamped to `[ε, 1 − ε]`.
///
/// Parameters live in one flat vector laid out as
/// `[user factors | item factors | user bias | item bias | global bias]`
/// so optimizers and gradient checks can treat them uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    n_users: usize,
    n_items: usize,
    dim: usize,
    role: Role,
    params: Vec<f64>,
}

impl FactorModel {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize, role: Role) -> Self {
        let len = (n_users + n_items) * dim + n_users + n_items + 1;
        Self {
            n_users,
            n_items,
            dim,
            role,
            params: vec![0.0; len],
        }
    }

    /// Factors drawn from `N(0, init_std²)`, biases zero.
    pub fn random(
        n_users: usize,
        n_items: usize,
        dim: usize,
        role: Role,
        init_std: f64,
        seed: u64,
    ) -> Self {
        let mut m = Self::zeros(n_users, n_items, dim, role);
        let mut rng = seeded_rng(seed, 10 + role.tag() as u64);
        let n_factors = (n_users + n_items) * dim;
        for p in &mut m.params[..n_factors] {
            let z: f64 = rng.sample(StandardNormal);
            *p = init_std * z;
        }
        m
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }
    pub fn n_items(&self) -> usize {
        self.n_items
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn role(&self) -> Role {
        self.role
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn item_factor_offset(&self) -> usize {
        self.n_users * self.dim
    }
    fn user_bias_offset(&self) -> usize {
        (self.n_users + self.n_items) * self.dim
    }
    fn item_bias_offset(&self) -> usize {
        self.user_bias_offset() + self.n_users
    }
    fn global_offset(&self) -> usize {
        self.params.len() - 1
    }

    pub fn user_embedding(&self, u: usize) -> &[f64] {
        &self.params[u * self.dim..(u + 1) * self.dim]
    }
    pub fn user_embedding_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.params[u * self.dim..(u + 1) * self.dim]
    }
    pub fn item_embedding(&self, i: usize) -> &[f64] {
        let o = self.item_factor_offset() + i * self.dim;
        &self.params[o..o + self.dim]
    }
    pub fn item_embedding_mut(&mut self, i: usize) -> &mut [f64] {
        let o = self.item_factor_offset() + i * self.dim;
        &mut self.params[o..o + self.dim]
    }
    pub fn set_user_bias(&mut self, u: usize, v: f64) {
        let o = self.user_bias_offset();
        self.params[o + u] = v;
    }
    pub fn set_item_bias(&mut self, i: usize, v: f64) {
        let o = self.item_bias_offset();
        self.params[o + i] = v;
    }
    pub fn set_global_bias(&mut self, v: f64) {
        let o = self.global_offset();
        self.params[o] = v;
    }

    pub fn logit(&self, u: usize, i: usize) -> f64 {
        let dot: f64 = self
            .user_embedding(u)
            .iter()
            .zip(self.item_embedding(i))
            .map(|(a, b)| a * b)
            .sum();
        dot + self.params[self.user_bias_offset() + u]
            + self.params[self.item_bias_offset() + i]
            + self.params[self.global_offset()]
    }

    /// Clamped probability in `[ε, 1 − ε]`.
    pub fn predict(&self, u: usize, i: usize) -> f64 {
        clamp_prob(sigmoid(self.logit(u, i)))
    }

    /// Derivative of [`predict`](Self::predict) w.r.t. the logit; zero where
    /// the clamp is active.
    pub fn predict_with_slope(&self, u: usize, i: usize) -> (f64, f64) {
        let s = sigmoid(self.logit(u, i));
        if (EPS_LOG..=1.0 - EPS_LOG).contains(&s) {
            (s, s * (1.0 - s))
        } else {
            (clamp_prob(s), 0.0)
        }
    }

    pub fn score_grid(&self) -> crate::data::Grid {
        crate::data::Grid::from_fn(self.n_users, self.n_items, |u, i| self.predict(u, i))
    }

    /// Adds `d_logit · ∂logit/∂params` into `grad` for one pair.
    pub fn accumulate_logit_grad(&self, u: usize, i: usize, d_logit: f64, grad: &mut [f64]) {
        if d_logit == 0.0 {
            return;
        }
        let d = self.dim;
        let uo = u * d;
        let io = self.item_factor_offset() + i * d;
        for k in 0..d {
            grad[uo + k] += d_logit * self.params[io + k];
            grad[io + k] += d_logit * self.params[uo + k];
        }
        grad[self.user_bias_offset() + u] += d_logit;
        grad[self.item_bias_offset() + i] += d_logit;
        grad[self.global_offset()] += d_logit;
    }

    /// Adds `d_score · ∂score/∂params` for one pair, where `score` is the
    /// clamped probability.
    pub fn accumulate_score_grad(&self, u: usize, i: usize, d_score: f64, grad: &mut [f64]) {
        let (_, slope) = self.predict_with_slope(u, i);
        self.accumulate_logit_grad(u, i, d_score * slope, grad);
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    const MAGIC: &'static [u8; 8] = b"DCEMF\0\0\0";
    const VERSION: u32 = 1;

    /// Little-endian binary checkpoint: magic, version, role, shapes, payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * self.params.len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.push(self.role.tag());
        for n in [self.n_users, self.n_items, self.dim] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != Self::MAGIC {
            return Err(Error::Data("not a factor-model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let role = Role::from_tag(r.take(1)?[0])?;
        let n_users = r.u64()? as usize;
        let n_items = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let mut m = Self::zeros(n_users, n_items, dim, role);
        for p in m.params.iter_mut() {
            *p = r.f64()?;
        }
        r.finish()?;
        Ok(m)
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

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Data("trailing bytes in checkpoint".into()))
        }
    }
}

/// One weighted training target for [`gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedTarget {
    pub user: usize,
    pub item: usize,
    pub target: f64,
    pub weight: f64,
}

/// Value and exact gradient of `Σ weight · e(score(u, i), target)`.
pub fn gradient(model: &FactorModel, batch: &[WeightedTarget], kind: ErrorKind) -> (f64, Vec<f64>) {
    let mut grad = model.zero_grad();
    let mut loss = 0.0;
    for t in batch {
        if t.weight == 0.0 {
            continue;
        }
        let s = model.predict(t.user, t.item);
        loss += t.weight * kind.error(s, t.target);
        model.accumulate_score_grad(
            t.user,
            t.item,
            t.weight * kind.derivative(s, t.target),
            &mut grad,
        );
    }
    (loss, grad)
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Moment accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with decoupled weight decay.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter shape changed");
        assert_eq!(grad.len(), self.m.len(), "gradient shape mismatch");
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * params[k]);
        }
    }
}

/// Applies one Adam step to a factor model.
pub fn adam_step(model: &mut FactorModel, state: &mut AdamState, grad: &[f64]) {
    state.step(&mut model.params, grad);
}
