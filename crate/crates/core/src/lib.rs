//! Doubly calibrated estimators for recommendation on data missing not at
//! random.
//!
//! The crate covers synthetic MNAR generation and rating-file ingestion
//! ([`data`]), matrix-factorization models with analytic gradients
//! ([`model`], [`propensity`]), banks of Platt calibration experts with a
//! Gumbel-Softmax assignment network ([`calibration`]), the estimator family
//! with exact bias/variance analysis ([`estimators`]), the tri-level joint
//! training loop ([`training`]), ranking metrics ([`metrics`]), and a
//! configuration-driven experiment runner ([`harness`]).

pub mod calibration;
pub mod data;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod propensity;
pub mod training;

pub use error::{Error, Result};

/// Probabilities are clamped to `[EPS_LOG, 1 − EPS_LOG]` before any log.
pub const EPS_LOG: f64 = 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on a clamped probability.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS_LOG, 1.0 - EPS_LOG)
}
