//! Propensity estimation: the observation classifier `h_ψ` and the popularity
//! heuristic, plus the heuristic imputed error used as a baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{seeded_rng, Grid, Interaction, InteractionTable};
use crate::error::{Error, Result};
use crate::model::{gradient, AdamConfig, AdamState, ErrorKind, FactorModel, Role, WeightedTarget};
use crate::EPS_LOG;

fn default_negatives() -> Option<usize> {
    Some(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropensityConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives drawn per positive each epoch; `None` uses the whole
    /// complement `D \ O` every epoch.
    #[serde(default = "default_negatives")]
    pub negatives_per_positive: Option<usize>,
    pub adam: AdamConfig,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            epochs: 20,
            batch_size: 512,
            negatives_per_positive: default_negatives(),
            adam: AdamConfig::new(0.01, 1e-4),
            init_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub model: FactorModel,
    /// Mean BCE over each epoch's examples.
    pub epoch_losses: Vec<f64>,
}

/// Trains `h_ψ` as a BCE classifier separating `positives` from pairs never
/// observed in `table`.
pub fn train_propensity_classifier(
    table: &InteractionTable,
    positives: &[Interaction],
    cfg: &PropensityConfig,
) -> Result<PropensityFit> {
    if positives.is_empty() {
        return Err(Error::Data("propensity classifier needs at least one observation".into()));
    }
    if cfg.batch_size == 0 || cfg.dim == 0 {
        return Err(Error::Config("batch_size and dim must be positive".into()));
    }
    let (nu, ni) = (table.n_users(), table.n_items());
    let observed = table.observation_mask();
    let complement: Vec<(usize, usize)> = (0..nu)
        .flat_map(|u| (0..ni).map(move |i| (u, i)))
        .filter(|&(u, i)| !observed.get(u, i))
        .collect();

    let mut model = FactorModel::random(nu, ni, cfg.dim, Role::Propensity, cfg.init_std, cfg.seed);
    let mut adam = AdamState::new(cfg.adam, model.num_params());
    let mut rng = seeded_rng(cfg.seed, 20);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut examples: Vec<(usize, usize, f64)> =
            positives.iter().map(|x| (x.user, x.item, 1.0)).collect();
        if !complement.is_empty() {
            match cfg.negatives_per_positive {
                None => examples.extend(complement.iter().map(|&(u, i)| (u, i, 0.0))),
                Some(ratio) => {
                    for _ in 0..ratio * positives.len() {
                        let (u, i) = complement[rng.gen_range(0..complement.len())];
                        examples.push((u, i, 0.0));
                    }
                }
            }
        }
        examples.shuffle(&mut rng);

        let mut total = 0.0;
        for chunk in examples.chunks(cfg.batch_size) {
            let w = 1.0 / chunk.len() as f64;
            let batch: Vec<_> = chunk
                .iter()
                .map(|&(user, item, target)| WeightedTarget { user, item, target, weight: w })
                .collect();
            let (loss, grad) = gradient(&model, &batch, ErrorKind::Bce);
            total += loss * chunk.len() as f64;
            adam.step(model.params_mut(), &grad);
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Divergence("propensity classifier loss is not finite".into()));
        }
        epoch_losses.push(mean);
    }
    Ok(PropensityFit {
        model,
        epoch_losses,
    })
}

/// Popularity heuristic `p̂_{u,i} = (n_i / max_j n_j)^η`, where `n_i` counts
/// observations of item `i`. Never-observed items get `ε` so the grid stays
/// strictly positive.
pub fn heuristic_propensity(table: &InteractionTable, exponent: f64) -> Result<Grid> {
    let counts = table.item_counts();
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::Data("heuristic propensity needs at least one observation".into()));
    }
    let per_item: Vec<f64> = counts
        .iter()
        .map(|&c| ((c as f64 / max as f64).powf(exponent)).max(EPS_LOG))
        .collect();
    Ok(Grid::from_fn(table.n_users(), table.n_items(), |_, i| per_item[i]))
}

/// `ê = ω · |r̂ − γ|`.
pub fn heuristic_imputed_error(r_hat: f64, omega: f64, gamma: f64) -> f64 {
    omega * (r_hat - gamma).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, sample_observations, SynthConfig};
    use crate::metrics::auc;

    fn table_with_counts(counts: &[usize]) -> InteractionTable {
        let n_users = *counts.iter().max().unwrap();
        let mut obs = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            for u in 0..c {
                obs.push(Interaction { user: u, item: i, rating: 1 });
            }
        }
        InteractionTable::new(n_users, counts.len(), obs).unwrap()
    }

    #[test]
    fn heuristic_values() {
        let t = table_with_counts(&[1, 4, 2]);
        let p = heuristic_propensity(&t, 0.5).unwrap();
        assert_eq!(p.get(0, 1), 1.0);
        assert_eq!(p.get(2, 0), 0.5);
        let p1 = heuristic_propensity(&t, 1.0).unwrap();
        assert_eq!((p1.get(0, 0), p1.get(0, 1)), (0.25, 1.0));
        for u in 0..t.n_users() {
            assert_eq!(p.get(u, 2), p.get(0, 2));
        }
    }

    #[test]
    fn heuristic_rejects_empty() {
        let t = InteractionTable::new(2, 2, vec![]).unwrap();
        assert!(heuristic_propensity(&t, 0.5).is_err());
    }

    #[test]
    fn heuristic_error_values() {
        assert_eq!(heuristic_imputed_error(0.3, 2.0, 0.3), 0.0);
        assert!((heuristic_imputed_error(0.9, 0.5, 0.1) - 0.4).abs() < 1e-15);
        let d = 0.25;
        assert_eq!(
            heuristic_imputed_error(0.5 + d, 1.3, 0.5),
            heuristic_imputed_error(0.5 - d, 1.3, 0.5)
        );
    }

    #[test]
    fn empty_positives_rejected() {
        let t = InteractionTable::new(2, 2, vec![]).unwrap();
        assert!(train_propensity_classifier(&t, &[], &PropensityConfig::default()).is_err());
    }

    #[test]
    fn full_observation_drifts_to_one() {
        let obs: Vec<_> = (0..4)
            .flat_map(|u| (0..3).map(move |i| Interaction { user: u, item: i, rating: 0 }))
            .collect();
        let t = InteractionTable::new(4, 3, obs.clone()).unwrap();
        let cfg = PropensityConfig {
            dim: 2,
            epochs: 6,
            batch_size: 4,
            ..Default::default()
        };
        let fit = train_propensity_classifier(&t, &obs, &cfg).unwrap();
        for w in fit.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", fit.epoch_losses);
        }
        assert!(fit.model.predict(0, 0) > 0.5);
    }

    #[test]
    fn classifier_is_deterministic_and_informative() {
        let mut sc = SynthConfig::new(200, 200, 4);
        sc.popularity_skew = 1.5;
        let data = generate_synthetic(&sc).unwrap();
        let cfg = PropensityConfig {
            dim: 8,
            epochs: 5,
            seed: 3,
            ..Default::default()
        };
        let a = train_propensity_classifier(&data.table, data.table.observed(), &cfg).unwrap();
        let b = train_propensity_classifier(&data.table, data.table.observed(), &cfg).unwrap();
        assert_eq!(a.model, b.model);

        // Held-out draw of the observation process.
        let fresh = sample_observations(&data.truth.propensity, 777);
        let scores = a.model.score_grid();
        let labels: Vec<u8> = fresh.as_slice().iter().map(|&o| u8::from(o)).collect();
        let auc = auc(scores.as_slice(), &labels).unwrap();
        assert!(auc > 0.5, "auc {auc}");
    }
}
