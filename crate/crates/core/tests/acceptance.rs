//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL|SKIP`
//! line; run with `--nocapture` to see them.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use dce::calibration::{
    ece_pairwise, fit_experts, gumbel_softmax, gumbel_softmax_with_noise, loss_impcal, loss_propcal, Assignment,
    BankRole, CalibrationTarget, ExpertBank, FitConfig, FixedScores, ImpCalForm, TemperatureSchedule, UserNoise,
};
use dce::data::{generate_synthetic, load_rating_matrix, seeded_rng, split_validation, Grid, Interaction, LabeledPair, SynthConfig};
use dce::estimators::{dr_estimator, ideal_loss, dr_bias, dr_variance};
use dce::harness::{self, AuditInstance, ExperimentConfig};
use dce::metrics::{auc, ndcg_list};
use dce::model::{gradient, ErrorKind, FactorModel, Role, WeightedTarget};
use dce::training::{
    holdout_rate, loss_imp_cal, loss_pred_dr_cal, pretrain_propensity_stack, train_dr_jl, trilevel_train, DrSample,
    ImputationSample, Method, PropensityStack, TrainConfig,
};
use dce::{logit, sigmoid};

fn report(n: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n}: {status} — {detail}");
}

/// Exact `(E, Var)` of `(1/n) Σ [ê + o(e − ê)/p̂]` over all `2^n` masks.
fn enumerate_dr(e: &[f64], e_hat: &[f64], p: &[f64], p_hat: &[f64]) -> (f64, f64) {
    let n = e.len();
    let outcomes: Vec<(f64, f64)> = (0u32..(1 << n))
        .map(|mask| {
            let mut prob = 1.0;
            let mut value = 0.0;
            for k in 0..n {
                let o = (mask >> k) & 1 == 1;
                prob *= if o { p[k] } else { 1.0 - p[k] };
                value += e_hat[k] + if o { (e[k] - e_hat[k]) / p_hat[k] } else { 0.0 };
            }
            (prob, value / n as f64)
        })
        .collect();
    let mean: f64 = outcomes.iter().map(|(w, v)| w * v).sum();
    let var: f64 = outcomes.iter().map(|(w, v)| w * (v - mean).powi(2)).sum();
    (mean, var)
}

#[test]
fn criterion_01_closed_form_moments_match_enumeration() {
    let start = Instant::now();
    let mut rng = seeded_rng(1, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=12);
        let x = AuditInstance::random(n, ErrorKind::Bce, &mut rng);
        let (e, e_hat) = x.errors();
        let (mean, var) = enumerate_dr(&e, &e_hat, &x.propensity, &x.propensity_hat);
        let bias = (mean - ideal_loss(&e)).abs();
        let b = dr_bias(&e, &e_hat, &x.propensity, &x.propensity_hat).unwrap();
        let v = dr_variance(&e, &e_hat, &x.propensity, &x.propensity_hat).unwrap();
        worst = worst.max((b - bias).abs()).max((v - var).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && elapsed <= Duration::from_secs(10);
    report(1, pass, &format!("max |closed form − enumeration| = {worst:.2e} over 100 instances in {elapsed:.2?}"));
    assert!(pass);
}

/// The six inequalities recomputed from their definitions.
fn independent_bounds(x: &AuditInstance) -> [(f64, f64); 6] {
    let n = x.len();
    let nf = n as f64;
    let (e, e_hat) = x.errors();
    let (p, ph) = (&x.propensity, &x.propensity_hat);
    let bias = (0..n).map(|k| (ph[k] - p[k]) / ph[k] * (e[k] - e_hat[k])).sum::<f64>().abs() / nf;
    let var = (0..n).map(|k| p[k] * (1.0 - p[k]) * (e_hat[k] - e[k]).powi(2) / ph[k].powi(2)).sum::<f64>() / (nf * nf);
    let ece_h = (0..n).map(|k| (p[k] - ph[k]).abs()).sum::<f64>() / nf;
    let mce_h = (0..n).map(|k| (p[k] - ph[k]).abs()).fold(0.0, f64::max);
    let gaps: Vec<f64> = (0..n).map(|k| (x.relevance[k] - x.pseudo_label[k]).abs()).collect();
    let ece_g = gaps.iter().sum::<f64>() / nf;
    let mce_g = gaps.iter().copied().fold(0.0, f64::max);
    let de: Vec<f64> = (0..n).map(|k| x.e1[k] - x.e0[k]).collect();
    let rho = (0..n).map(|k| ((e[k] - e_hat[k]) / ph[k]).abs()).fold(0.0, f64::max);
    let pi = (0..n).map(|k| ((ph[k] - p[k]) * de[k] / ph[k]).abs()).fold(0.0, f64::max);
    let omega = (0..n).map(|k| p[k] * (1.0 - p[k]) * de[k] * de[k] / ph[k].powi(2)).fold(0.0, f64::max);
    [
        (bias, rho * ece_h),
        (bias, rho * mce_h),
        (bias, pi * ece_g),
        (bias, pi * mce_g),
        (var, omega * ece_g * ece_g),
        (var, omega / nf * mce_g * mce_g),
    ]
}

#[test]
fn criterion_02_calibration_bounds() {
    let mut rng = seeded_rng(2, 0);
    let mut violations = 0;
    let mut disagreements = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=100);
        let x = AuditInstance::random(n, ErrorKind::Bce, &mut rng);
        let audit = x.audit().unwrap();
        for (check, (lhs, rhs)) in audit.bounds.iter().zip(independent_bounds(&x)) {
            let slack = rhs - lhs;
            min_slack = min_slack.min(slack);
            if slack < -1e-12 {
                violations += 1;
            }
            let tol = 1e-12 * (1.0 + lhs.abs().max(rhs.abs()));
            if (check.lhs - lhs).abs() > tol || (check.rhs - rhs).abs() > tol || check.holds != (slack >= -1e-12) {
                disagreements += 1;
            }
        }
    }

    // Tightness: constant (e − ê)/p̂ = c and p̂ ≥ p everywhere.
    let mut worst_gap: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=100);
        let c: f64 = rng.gen_range(0.01..0.05) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut x = AuditInstance::random(n, ErrorKind::Bce, &mut rng);
        for k in 0..n {
            let ph = rng.gen_range(0.3..1.0);
            x.propensity_hat[k] = ph;
            x.propensity[k] = ph * rng.gen_range(0.2..1.0);
            // r̂ away from 1/2 so e⁽¹⁾ − e⁽⁰⁾ is not small.
            let r_hat: f64 = if rng.gen_bool(0.5) { rng.gen_range(0.05..0.3) } else { rng.gen_range(0.7..0.95) };
            let (e0, e1) = ErrorKind::Bce.pair(r_hat);
            x.e0[k] = e0;
            x.e1[k] = e1;
            let q = rng.gen_range(0.3..0.7);
            x.relevance[k] = q;
            // e − ê = (q − r̃)(e⁽¹⁾ − e⁽⁰⁾) = c·p̂.
            x.pseudo_label[k] = q - c * ph / (e1 - e0);
        }
        let (e, e_hat) = x.errors();
        let bias = (0..n)
            .map(|k| (x.propensity_hat[k] - x.propensity[k]) / x.propensity_hat[k] * (e[k] - e_hat[k]))
            .sum::<f64>()
            .abs()
            / n as f64;
        let ece = (0..n).map(|k| (x.propensity[k] - x.propensity_hat[k]).abs()).sum::<f64>() / n as f64;
        let audit = x.audit().unwrap();
        worst_gap = worst_gap
            .max((bias - c.abs() * ece).abs())
            .max((audit.bias - audit.rho_max * audit.ece_propensity).abs());
    }
    let pass = violations == 0 && disagreements == 0 && worst_gap <= 1e-10;
    report(
        2,
        pass,
        &format!(
            "1000 instances: {violations} violations, min slack {min_slack:.3e}, {disagreements} disagreements with the \
             independent recomputation; equality construction gap {worst_gap:.2e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_double_robustness() {
    let mut rng = seeded_rng(3, 0);
    let mut worst_p: f64 = 0.0;
    let mut worst_e: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(1..=12);
        let x = AuditInstance::random(n, ErrorKind::Bce, &mut rng);
        let (e, e_hat) = x.errors();
        let ideal = e.iter().sum::<f64>() / n as f64;
        // p̂ = p: unbiased in expectation.
        let (mean, _) = enumerate_dr(&e, &e_hat, &x.propensity, &x.propensity);
        worst_p = worst_p.max((mean - ideal).abs());
        // ê = e: exact on every mask, whatever p̂ is.
        for mask in 0u32..(1 << n) {
            let o: Vec<bool> = (0..n).map(|k| (mask >> k) & 1 == 1).collect();
            let v = dr_estimator(&e, &e, &x.propensity_hat, &o).unwrap();
            worst_e = worst_e.max((v - ideal).abs());
        }
    }
    let pass = worst_p <= 1e-10 && worst_e <= 1e-10;
    report(3, pass, &format!("|E[DR] − ideal| with p̂ = p: {worst_p:.2e}; max pointwise gap with ê = e: {worst_e:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_04_error_gap_identity() {
    let mut rng = seeded_rng(4, 0);
    let mut worst: f64 = 0.0;
    for kind in [ErrorKind::Bce, ErrorKind::Mse] {
        for _ in 0..10_000 {
            let (q, r_tilde, r_hat): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen_range(0.001..0.999));
            let (e0, e1) = match kind {
                ErrorKind::Bce => (-(1.0 - r_hat).ln(), -r_hat.ln()),
                ErrorKind::Mse => (r_hat * r_hat, (1.0 - r_hat).powi(2)),
            };
            let e = kind.error(r_hat, q);
            let e_hat = kind.error(r_hat, r_tilde);
            worst = worst.max(((e - e_hat) - (q - r_tilde) * (e1 - e0)).abs());
        }
    }
    let pass = worst <= 1e-12;
    report(4, pass, &format!("max deviation over 2 × 10^4 triples: {worst:.2e}"));
    assert!(pass);
}

/// Max relative error between an analytic gradient and central differences.
fn fd_error(params: &[f64], analytic: &[f64], f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut x = params.to_vec();
    for k in 0..params.len() {
        x[k] = params[k] + h;
        let plus = f(&x);
        x[k] = params[k] - h;
        let minus = f(&x);
        x[k] = params[k];
        let fd = (plus - minus) / (2.0 * h);
        let denom = fd.abs().max(analytic[k].abs()).max(1e-6);
        worst = worst.max((fd - analytic[k]).abs() / denom);
    }
    worst
}

fn with_params(m: &FactorModel, p: &[f64]) -> FactorModel {
    let mut m = m.clone();
    m.params_mut().copy_from_slice(p);
    m
}

fn with_bank_params(b: &ExpertBank, p: &[f64]) -> ExpertBank {
    let mut b = b.clone();
    b.params_mut().copy_from_slice(p);
    b
}

#[test]
fn criterion_05_gradient_suite() {
    let start = Instant::now();
    let (nu, ni, d) = (5, 6, 3);
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = seeded_rng(seed, 5);
        let kind = if seed % 2 == 0 { ErrorKind::Bce } else { ErrorKind::Mse };
        let theta = FactorModel::random(nu, ni, d, Role::Prediction, 0.5, seed);
        let phi = FactorModel::random(nu, ni, d, Role::Imputation, 0.5, seed + 50);
        let pairs = |rng: &mut rand_chacha::ChaCha8Rng| (rng.gen_range(0..nu), rng.gen_range(0..ni));

        // Factor model under weighted soft targets.
        let targets: Vec<WeightedTarget> = (0..10)
            .map(|_| {
                let (user, item) = pairs(&mut rng);
                WeightedTarget { user, item, target: rng.gen(), weight: rng.gen_range(0.1..2.0) }
            })
            .collect();
        let (_, g) = gradient(&theta, &targets, kind);
        worst = worst.max(fd_error(theta.params(), &g, &|p| gradient(&with_params(&theta, p), &targets, kind).0));

        // Imputation loss w.r.t. the imputation model.
        let imp: Vec<ImputationSample> = (0..10)
            .map(|_| {
                let (user, item) = pairs(&mut rng);
                ImputationSample { user, item, rating: rng.gen_range(0..2), propensity: rng.gen_range(0.1..1.0) }
            })
            .collect();
        let (_, g) = loss_imp_cal(&phi, &theta, &imp, kind);
        worst = worst.max(fd_error(phi.params(), &g, &|p| loss_imp_cal(&with_params(&phi, p), &theta, &imp, kind).0));

        // Doubly robust prediction loss.
        let dr: Vec<DrSample> = (0..12)
            .map(|_| {
                let (user, item) = pairs(&mut rng);
                DrSample {
                    user,
                    item,
                    label: rng.gen_bool(0.5).then(|| rng.gen_range(0..2)),
                    propensity: rng.gen_range(0.1..1.0),
                    pseudo_label: rng.gen(),
                }
            })
            .collect();
        let (_, g) = loss_pred_dr_cal(&theta, &dr, kind);
        worst = worst.max(fd_error(theta.params(), &g, &|p| loss_pred_dr_cal(&with_params(&theta, p), &dr, kind).0));

        // Calibration losses w.r.t. Platt and assignment parameters, with
        // frozen Gumbel noise and in argmax mode.
        let bank = ExpertBank::new(3, d, BankRole::Propensity, 0.5, seed).unwrap();
        let noise = UserNoise::draw(0..nu, 3, &mut rng);
        let prop_batch: Vec<LabeledPair> = (0..12)
            .map(|_| {
                let (user, item) = pairs(&mut rng);
                LabeledPair { user, item, label: rng.gen_range(0..2) }
            })
            .collect();
        let imp_batch: Vec<Interaction> = (0..12)
            .map(|_| {
                let (user, item) = pairs(&mut rng);
                Interaction { user, item, rating: rng.gen_range(0..2) }
            })
            .collect();
        let p_bar = |u: usize, i: usize| 0.2 + 0.1 * ((u + i) % 7) as f64;
        for mode in [Assignment::Relaxed { tau: 0.7, noise: &noise }, Assignment::Argmax] {
            for f in [1.0, 0.1] {
                let g = loss_propcal(&bank, &theta, &prop_batch, mode, f).unwrap().grad;
                worst = worst.max(fd_error(bank.params(), &g, &|p| {
                    loss_propcal(&with_bank_params(&bank, p), &theta, &prop_batch, mode, f).unwrap().loss
                }));
            }
            for form in [ImpCalForm::Label, ImpCalForm::ClampedLabel, ImpCalForm::Weighted] {
                let g = loss_impcal(&bank, &phi, &imp_batch, &p_bar, mode, form).unwrap().grad;
                worst = worst.max(fd_error(bank.params(), &g, &|p| {
                    loss_impcal(&with_bank_params(&bank, p), &phi, &imp_batch, &p_bar, mode, form).unwrap().loss
                }));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-4 && elapsed <= Duration::from_secs(30);
    report(5, pass, &format!("max relative FD error {worst:.2e} in {elapsed:.2?}"));
    assert!(pass);
}

fn random_alpha(rng: &mut impl Rng) -> Vec<f64> {
    let k = rng.gen_range(2..=8);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|a| a / s).collect()
}

/// Number of draws (out of 10⁵) whose largest entry falls below 0.999 at
/// τ = 10⁻³.
fn low_temperature_misses(seed: u64) -> (usize, f64) {
    let mut rng = seeded_rng(seed, 6);
    let mut misses = 0;
    let mut lower_bound = 0.0;
    let delta = 1e-3 * 999f64.ln();
    for _ in 0..100_000 {
        let alpha = random_alpha(&mut rng);
        let y = gumbel_softmax(&alpha, 1e-3, &mut rng).unwrap();
        if y.iter().copied().fold(0.0, f64::max) < 0.999 {
            misses += 1;
        }
        // P(top two perturbed logits closer than τ·ln 999), which forces a miss.
        lower_bound += 1.0 - alpha.iter().map(|&a| a / (a + (1.0 - a) * delta.exp())).sum::<f64>();
    }
    (misses, lower_bound)
}

#[test]
fn criterion_06_gumbel_softmax_contract() {
    let mut rng = seeded_rng(6, 0);
    let mut simplex_err: f64 = 0.0;
    let mut zero_noise_err: f64 = 0.0;
    for _ in 0..100_000 {
        let alpha = random_alpha(&mut rng);
        let tau = rng.gen_range(1e-3..2.0);
        let y = gumbel_softmax(&alpha, tau, &mut rng).unwrap();
        simplex_err = simplex_err.max((y.iter().sum::<f64>() - 1.0).abs());
        if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            simplex_err = f64::INFINITY;
        }
    }
    for _ in 0..1000 {
        let alpha = random_alpha(&mut rng);
        let tau = rng.gen_range(0.05..2.0);
        let y = gumbel_softmax_with_noise(&alpha, tau, &vec![0.0; alpha.len()]).unwrap();
        let z: Vec<f64> = alpha.iter().map(|a| a.ln() / tau).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
        for (k, v) in y.iter().enumerate() {
            zero_noise_err = zero_noise_err.max((v - (z[k] - m).exp() / denom).abs());
        }
    }
    let schedule = TemperatureSchedule::standard(20);
    let endpoints = schedule.temperature(0).unwrap() == 1.0 && schedule.temperature(20).unwrap() == 1e-3;
    let (misses, expected_at_least) = low_temperature_misses(6);
    // Misses occur at (at least) the analytic rate; 4σ binomial slack.
    let consistent = misses as f64 >= expected_at_least - 4.0 * expected_at_least.sqrt();

    let every_draw = misses == 0;
    let achievable = simplex_err <= 1e-9 && zero_noise_err <= 1e-12 && endpoints && consistent;
    report(
        6,
        every_draw && achievable,
        &format!(
            "simplex error {simplex_err:.1e}, zero-noise error {zero_noise_err:.1e}, endpoints exact: {endpoints}; \
             at τ = 1e-3, {misses}/100000 draws had max < 0.999 (analytic lower bound {expected_at_least:.0}), so the \
             every-draw clause does not hold for non-degenerate α"
        ),
    );
    assert!(achievable);
}

/// The literal every-draw clause. It cannot hold: whenever the two largest
/// perturbed logits are within τ·ln 999 of each other, the top entry is
/// below 0.999, and that event has positive probability.
#[test]
#[ignore = "unattainable clause, see criterion_06 output"]
fn criterion_06_every_draw_clause_literal() {
    assert_eq!(low_temperature_misses(6).0, 0);
}

#[test]
fn criterion_07_calibration_efficacy() {
    let start = Instant::now();
    let (nu, ni) = (500, 300);
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let data = generate_synthetic(&SynthConfig::new(nu, ni, seed)).unwrap();
        let split = split_validation(&data.table, 0.1, seed).unwrap();
        let p = &data.truth.propensity;
        // Even users over-confident, odd users under-confident.
        let scale = |u: usize| if u % 2 == 0 { 2.0 } else { 0.5 };
        let raw = Grid::from_fn(nu, ni, |u, i| sigmoid(scale(u) * logit(p.get(u, i))));
        let mut rng = seeded_rng(seed, 99);
        let embeddings: Vec<f64> = (0..nu)
            .flat_map(|u| {
                let z: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                [if u % 2 == 0 { 1.0 } else { -1.0 } + 0.3 * z, z2]
            })
            .collect();
        let source = FixedScores::new(raw.clone(), embeddings, 2).unwrap();
        let target = CalibrationTarget::Propensity { pairs: &split.d_val, holdout_rate: holdout_rate(&split) };
        let cfg = FitConfig { seed, ..FitConfig::default() };
        let fitted = |k: usize| -> f64 {
            let mut bank = ExpertBank::new(k, 2, BankRole::Propensity, 0.1, seed).unwrap();
            fit_experts(&mut bank, &source, target, &cfg).unwrap();
            ece_pairwise(p, &bank.calibrated_grid(&source, nu, ni).unwrap()).unwrap()
        };
        let before = ece_pairwise(p, &raw).unwrap();
        let global = fitted(1);
        let experts = fitted(2);
        let reduction = 1.0 - experts / before;
        if reduction >= 0.3 && experts < global {
            wins += 1;
        }
        lines.push(format!("seed {seed}: raw {before:.4}, global {global:.4}, K=2 {experts:.4} (−{:.0}%)", 100.0 * reduction));
    }
    let elapsed = start.elapsed();
    let pass = wins >= 4 && elapsed <= Duration::from_secs(300);
    report(7, pass, &format!("{wins}/5 seeds meet both conditions in {elapsed:.1?}; {}", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_08_end_to_end_ordering() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "output_dir = {:?}\nmethods = [\"naive\", \"dr-jl\", \"dce-dr\"]\nseeds = [0, 1, 2, 3, 4]\n\
         [dataset.synthetic]\nn_users = 500\nn_items = 300\nseed = 0\n",
        dir.path()
    );
    let cfg = ExperimentConfig::from_toml_str(&text, &[]).unwrap();
    harness::cmd_gen_data(&cfg, false).unwrap();
    let records = harness::cmd_train(&cfg).unwrap();
    let get = |m: Method, s: u64| records.iter().find(|r| r.method == m && r.seed == s).unwrap().metrics.clone();

    let (mut dce_mse, mut dce_auc, mut jl_mse, mut jl_auc) = (0, 0, 0, 0);
    let mut rows = Vec::new();
    for s in 0..5 {
        let (naive, jl, dce) = (get(Method::Naive, s), get(Method::DrJl, s), get(Method::DceDr, s));
        dce_mse += usize::from(dce.mse < jl.mse);
        dce_auc += usize::from(dce.auc > jl.auc);
        jl_mse += usize::from(jl.mse < naive.mse);
        jl_auc += usize::from(jl.auc > naive.auc);
        rows.push(format!(
            "seed {s}: MSE {:.4}/{:.4}/{:.4} AUC {:.4}/{:.4}/{:.4}",
            naive.mse, jl.mse, dce.mse, naive.auc, jl.auc, dce.auc
        ));
    }
    let comparison = Path::new(dir.path()).join("runs/comparison.csv");
    let elapsed = start.elapsed();
    let pass = dce_mse >= 4 && dce_auc >= 4 && jl_mse >= 4 && comparison.exists() && elapsed <= Duration::from_secs(900);
    report(
        8,
        pass,
        &format!(
            "DCE-DR vs DR-JL: lower MSE {dce_mse}/5, higher AUC {dce_auc}/5; DR-JL vs naive: lower MSE {jl_mse}/5 \
             (higher AUC {jl_auc}/5, not part of the MSE-based reading); {elapsed:.0?}; naive/DR-JL/DCE-DR {}",
            rows.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_identity_experts_reduce_to_dr_jl() {
    let mut sc = SynthConfig::new(40, 30, 9);
    sc.exposure_offset = -1.0;
    let data = generate_synthetic(&sc).unwrap();
    let split = split_validation(&data.table, 0.2, 9).unwrap();
    let mut cfg = TrainConfig { obs_batch: 32, dim: 4, k: 1, seed: 9, ..Default::default() };
    cfg.calibration_adam.lr = 0.0;
    cfg.propensity.dim = 4;
    cfg.propensity.epochs = 3;
    let psi = pretrain_propensity_stack(&data.table, &split, &cfg).unwrap().model;
    let stack = PropensityStack::identity(psi, 1).unwrap();

    let mut worst: f64 = 0.0;
    for epochs in 1..=4 {
        let cfg = TrainConfig { epochs, ..cfg.clone() };
        let a = trilevel_train(&data.table, &split, &stack, &cfg).unwrap();
        let b = train_dr_jl(&data.table, &split, &stack, &cfg).unwrap();
        let max_diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        worst = worst
            .max(max_diff(a.prediction.params(), b.prediction.params()))
            .max(max_diff(a.imputation.as_ref().unwrap().params(), b.imputation.as_ref().unwrap().params()));
    }
    let pass = worst <= 1e-10;
    report(9, pass, &format!("max parameter difference over epochs 1..=4: {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_10_metric_oracles() {
    let mut rng = seeded_rng(10, 0);
    let mut auc_err: f64 = 0.0;
    let mut ndcg_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..60);
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        auc_err = auc_err.max((auc(&scores, &labels).unwrap() - wins / pairs).abs());

        // Distinct scores: rank by score, compare to the ideal ordering.
        let k = rng.gen_range(1..=n);
        let mut order: Vec<usize> = (0..n).collect();
        let distinct: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        order.sort_by(|&a, &b| distinct[b].total_cmp(&distinct[a]));
        let ranked: Vec<u8> = order.iter().map(|&i| labels[i]).collect();
        let dcg = |list: &[u8]| -> f64 {
            list.iter().take(k).enumerate().map(|(r, &g)| f64::from(g) / ((r + 2) as f64).log2()).sum()
        };
        let mut ideal = labels.clone();
        ideal.sort_by(|a, b| b.cmp(a));
        let oracle = dcg(&ranked) / dcg(&ideal);
        ndcg_err = ndcg_err.max((ndcg_list(&ranked, k).unwrap() - oracle).abs());
    }
    let spot = ndcg_list(&[0, 1], 2) == Some(1.0 / 3f64.log2())
        && ndcg_list(&[1, 0, 0], 3) == Some(1.0)
        && auc(&[0.2, 0.8], &[0, 1]).unwrap() == 1.0;
    let pass = auc_err <= 1e-12 && ndcg_err <= 1e-12 && spot;
    report(10, pass, &format!("AUC oracle gap {auc_err:.1e}, NDCG oracle gap {ndcg_err:.1e}, spot values exact: {spot}"));
    assert!(pass);
}

#[test]
fn criterion_11_coat_ingestion() {
    let Some(path) = std::env::var_os("COAT_TRAIN") else {
        println!("criterion 11: SKIP — set COAT_TRAIN to the Coat train.ascii file to run");
        return;
    };
    let path = Path::new(&path);
    let table = load_rating_matrix(path, 3.0).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let raw: Vec<f64> = text.split_whitespace().map(|v| v.parse().unwrap()).collect();
    let expected_positive = raw.iter().filter(|&&v| v > 3.0).count();
    let positive = table.observed().iter().filter(|x| x.rating == 1).count();
    let shape = (table.n_users(), table.n_items(), table.observed().len());
    let pass = shape == (290, 300, 6960) && positive == expected_positive;
    report(11, pass, &format!("users/items/rows {shape:?}, positives {positive} (expected {expected_positive})"));
    assert!(pass);
}
