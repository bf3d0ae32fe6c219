use minimax_debias::debiased::CrossfitConfig;
use minimax_debias::dgp::{pl_sample, PlDgpConfig, PlNonlinearity};
use minimax_debias::minimax::{project_values, PenaltyConfig};
use minimax_debias::partially_linear::{
    chen_alternative_xi, check_q_moments, pl_crossfit, pl_estimate_debias, pl_estimate_h, PLDataset,
};
use minimax_debias::spaces::{FittedFunction, FunctionClassSpec, Sieve};
use nalgebra::DVector;

fn cubic() -> FunctionClassSpec {
    FunctionClassSpec::linear(3, true)
}

fn instrument_class() -> FunctionClassSpec {
    FunctionClassSpec::LinearSieve {
        degree: 3,
        intercept: true,
        cross_terms: true,
    }
}

fn sieve_config(seed: u64) -> CrossfitConfig {
    CrossfitConfig {
        seed,
        h_class: cubic(),
        xi_class: cubic(),
        q_class: instrument_class(),
        q_tilde_class: instrument_class(),
        ..CrossfitConfig::default()
    }
}

fn rms_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

/// `q₀(Z) = Z_a / π` as a linear function of `[Z_a | X_b]`.
fn analytic_q0(cfg: &PlDgpConfig, scale: f64) -> Vec<FittedFunction> {
    let d_a = cfg.d_a();
    (0..d_a)
        .map(|i| FittedFunction::Features {
            sieve: Sieve {
                degree: 1,
                intercept: false,
                cross_terms: false,
                input_dim: d_a + 1,
            },
            weights: DVector::from_fn(d_a + 1, |j, _| if j == i { scale / cfg.instrument_strength } else { 0.0 }),
        })
        .collect()
}

#[test]
fn preliminary_coefficient_is_consistent() {
    let seeds = 20;
    let mean = (0..seeds)
        .map(|seed| {
            let d = pl_sample(&PlDgpConfig::new(2000, seed, vec![1.0], 0.8)).unwrap();
            let pen = PenaltyConfig::default_for_n(d.n);
            pl_estimate_h(&d, &cubic(), &instrument_class(), &pen).unwrap().0[0]
        })
        .sum::<f64>()
        / seeds as f64;
    assert!((mean - 1.0).abs() < 0.1, "{mean}");
}

#[test]
fn fitted_q_inverts_the_instrumented_design() {
    let cfg = PlDgpConfig::new(3000, 21, vec![1.0, -0.5], 0.8);
    let d = pl_sample(&cfg).unwrap();
    let pen = PenaltyConfig::default_for_n(d.n);
    let (q_hat, _) = pl_estimate_debias(&d, &cubic(), &instrument_class(), &instrument_class(), &pen).unwrap();
    for (i, q) in q_hat.iter().enumerate() {
        let qv = q.evaluate(&d.z).unwrap();
        for j in 0..2 {
            let cross = qv.dot(&d.x_a.column(j)) / d.n as f64;
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((cross - target).abs() < 0.1, "({i},{j}): {cross}");
        }
    }
}

/// In sample the unpenalized coefficient block always reaches `E_n[q̂ X_a] = 1`;
/// without a relevant instrument it does so by blowing up `q̂`, and the
/// cross moment collapses on fresh data.
#[test]
fn irrelevant_block_gives_vanishing_cross_moment() {
    let noise = pl_sample(&PlDgpConfig::new(4000, 23, vec![1.0], 0.8)).unwrap();
    let strong = pl_sample(&PlDgpConfig::new(2000, 22, vec![1.0], 0.8)).unwrap();
    let mut weak = strong.clone();
    weak.x_a.set_column(0, &noise.x_b.rows(0, 2000).column(0));
    let mut holdout = pl_sample(&PlDgpConfig::new(2000, 24, vec![1.0], 0.8)).unwrap();
    holdout.x_a.set_column(0, &noise.x_b.rows(2000, 2000).column(0));

    let pen = PenaltyConfig::default_for_n(2000);
    let q_rms = |d: &PLDataset| {
        let (q_hat, _) = pl_estimate_debias(d, &cubic(), &instrument_class(), &instrument_class(), &pen).unwrap();
        let qv = q_hat[0].evaluate(&d.z).unwrap();
        (q_hat, qv.norm() / (d.n as f64).sqrt())
    };
    let (q_weak, weak_rms) = q_rms(&weak);
    let (_, strong_rms) = q_rms(&strong);
    assert!(weak_rms > 10.0 * strong_rms, "{weak_rms} vs {strong_rms}");

    let qh = q_weak[0].evaluate(&holdout.z).unwrap();
    let cross = qh.dot(&holdout.x_a.column(0)) / holdout.n as f64;
    assert!(cross.abs() < 0.1, "{cross}");
}

#[test]
fn oracle_q_passes_moment_diagnostics() {
    let cfg = PlDgpConfig {
        nonlinearity: PlNonlinearity::Linear,
        ..PlDgpConfig::new(5000, 24, vec![1.0], 0.8)
    };
    let d = pl_sample(&cfg).unwrap();
    let diag = check_q_moments(&analytic_q0(&cfg, 1.0), &d, &cubic()).unwrap();
    assert!(diag.zero_given_xb < 0.05, "{diag:?}");
    assert!(diag.identity_gap < 0.05, "{diag:?}");

    let doubled = check_q_moments(&analytic_q0(&cfg, 2.0), &d, &cubic()).unwrap();
    assert!((doubled.identity_gap - 1.0).abs() < 0.1, "{doubled:?}");
}

#[test]
fn alternative_direction_projects_to_the_same_q() {
    let d = pl_sample(&PlDgpConfig::new(2000, 25, vec![1.0], 0.8)).unwrap();
    let pen = PenaltyConfig::default_for_n(d.n);
    let (q_hat, _) = pl_estimate_debias(&d, &cubic(), &instrument_class(), &instrument_class(), &pen).unwrap();
    let chen = chen_alternative_xi(&d, &cubic(), &instrument_class(), &pen).unwrap();
    let chen_q = project_values(
        &chen.xi_tilde[0].evaluate(&d.x()).unwrap(),
        &d.z,
        &instrument_class(),
        pen.tilde_gamma_q,
        pen.jitter_scale,
    )
    .unwrap();
    let gap = rms_gap(&chen_q.evaluate(&d.z).unwrap(), &q_hat[0].evaluate(&d.z).unwrap());
    assert!(gap < 0.1, "{gap}");
}

fn shifted(d: &PLDataset, c: &[f64]) -> PLDataset {
    let shift = &d.x_a * DVector::from_row_slice(c);
    PLDataset::new(d.x_a.clone(), d.x_b.clone(), d.z.clone(), &d.y + shift).unwrap()
}

#[test]
fn adding_a_linear_term_shifts_the_estimate() {
    let d = pl_sample(&PlDgpConfig::new(600, 26, vec![1.0, -0.5], 0.8)).unwrap();
    let c = [0.7, -1.3];
    let moved = shifted(&d, &c);
    let base_pen = PenaltyConfig::default_for_n(480);

    let exact = CrossfitConfig {
        penalties: Some(PenaltyConfig { mu_n: 0.0, ..base_pen }),
        ..sieve_config(4)
    };
    let a = pl_crossfit(&d, &exact).unwrap();
    let b = pl_crossfit(&moved, &exact).unwrap();
    for i in 0..2 {
        assert!((b.theta[i] - a.theta[i] - c[i]).abs() < 1e-6, "coord {i}");
    }

    let penalized = CrossfitConfig {
        penalties: Some(base_pen),
        ..sieve_config(4)
    };
    let a = pl_crossfit(&d, &penalized).unwrap();
    let b = pl_crossfit(&moved, &penalized).unwrap();
    let scale = 1.0 + d.y.amax();
    for i in 0..2 {
        assert!((b.theta[i] - a.theta[i] - c[i]).abs() < 10.0 * base_pen.mu_n * scale, "coord {i}");
    }
}

#[test]
fn crossfit_interval_contains_estimate() {
    let d = pl_sample(&PlDgpConfig::new(800, 27, vec![1.0], 0.8)).unwrap();
    let est = pl_crossfit(&d, &sieve_config(1)).unwrap();
    let (lo, hi) = est.ci[0];
    assert!(lo < est.theta[0] && est.theta[0] < hi);
    assert_eq!(est.n, 800);
    assert_eq!(est.nuisances.len(), 5);
}
