use minimax_debias::oracle::{identity_suite, DiscreteProblem};
use minimax_debias::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// A random problem with `m_t ≤ m_s`, so `h₀` exists, and `α` placed in the
/// range of `P*` so the target is identified.
fn random_problem(ms: usize, mt: usize, raw: &[f64], g1: &[f64], g2: &[f64], q_target: &[f64]) -> DiscreteProblem {
    let pmf = DMatrix::from_row_slice(ms, mt, &raw[..ms * mt]);
    let pmf = &pmf / pmf.sum();
    let mut dp = DiscreteProblem {
        s_support: (0..ms).map(|i| i as f64).collect(),
        t_support: (0..mt).map(|i| i as f64).collect(),
        pmf,
        g1_table: DMatrix::from_row_slice(ms, mt, &g1[..ms * mt]),
        g2_table: DMatrix::from_row_slice(ms, mt, &g2[..ms * mt]),
        m_weights: DVector::zeros(ms),
    };
    let alpha = dp.p_adjoint() * DVector::from_column_slice(&q_target[..mt]);
    dp.m_weights = alpha.component_mul(&dp.marg_s());
    dp
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn identities_hold_on_random_problems(
        ms in 2usize..6,
        mt_gap in 0usize..3,
        raw in prop::collection::vec(0.1f64..1.0, 25),
        g1 in prop::collection::vec(0.5f64..1.5, 25),
        g2 in prop::collection::vec(-2.0f64..2.0, 25),
        q_target in prop::collection::vec(-2.0f64..2.0, 5),
        seed in 0u64..1000,
    ) {
        let mt = ms.saturating_sub(mt_gap).max(1);
        let dp = random_problem(ms, mt, &raw, &g1, &g2, &q_target);
        for check in identity_suite(&dp, seed).unwrap() {
            prop_assert!(check.passed(), "{} {:.3e} > {:.0e}", check.name, check.max_error, check.tolerance);
        }
    }
}

#[test]
fn json_problem_matches_builtin() {
    let dp = DiscreteProblem::rank_deficient_4x3();
    let text = serde_json::to_string(&dp).unwrap();
    let back = DiscreteProblem::from_json_str(&text).unwrap();
    assert_eq!(back, dp);
    assert!(identity_suite(&back, 1).unwrap().iter().all(|c| c.passed()));
}

#[test]
fn target_outside_range_is_not_identified() {
    // `g1 ≡ 1` and independent S, T: P maps everything to constants, so a
    // centered representer is orthogonal to the range of P*.
    let mut dp = DiscreteProblem {
        s_support: vec![-1.0, 1.0],
        t_support: vec![0.0, 1.0],
        pmf: DMatrix::from_element(2, 2, 0.25),
        g1_table: DMatrix::from_element(2, 2, 1.0),
        g2_table: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
        m_weights: DVector::from_vec(vec![-0.5, 0.5]),
    };
    dp.validate().unwrap();
    let err = identity_suite(&dp, 0).unwrap_err();
    assert!(matches!(err, Error::Identification(_)), "{err}");

    dp.m_weights = DVector::from_vec(vec![0.5, 0.5]);
    assert!(identity_suite(&dp, 0).unwrap().iter().all(|c| c.passed()));
}
