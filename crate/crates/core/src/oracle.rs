//! Exact population calculations for problems with finite support.
//!
//! Functions of `S` and `T` are vectors on the supports; inner products are
//! weighted by the true marginals. With these, `P`, its adjoint, the Riesz
//! representer and the debiasing nuisances are dense linear algebra, and the
//! identification identities can be checked to machine precision.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_norm_solve, null_space};
use crate::problem::Dataset;
use crate::serde_helpers;

/// Relative singular-value cutoff that defines range membership.
pub const RANGE_CUTOFF: f64 = 1e-10;
/// Residual below which a weighted least-squares solution counts as exact.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// A joint pmf of `(S, T)` on finite supports, with `g1`, `g2` tabulated on
/// the support and `m(W; h) = Σ_s m_weights(s) h(s)` in expectation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteProblem {
    pub s_support: Vec<f64>,
    pub t_support: Vec<f64>,
    /// `m_s × m_t` joint probabilities.
    #[serde(with = "serde_helpers::rows")]
    pub pmf: DMatrix<f64>,
    #[serde(with = "serde_helpers::rows")]
    pub g1_table: DMatrix<f64>,
    #[serde(with = "serde_helpers::rows")]
    pub g2_table: DMatrix<f64>,
    #[serde(with = "serde_helpers::vector")]
    pub m_weights: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct XiSolution {
    /// Minimum-norm least-squares solution of `P*P ξ = α`.
    pub xi: DVector<f64>,
    pub residual: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug)]
pub struct ThetaStar {
    /// `Σ_s m_weights(s) h₀(s)`.
    pub theta: f64,
    /// The same value through `E[q†(T) g2(W)]`, when `ξ₀` exists.
    pub via_q: Option<f64>,
    pub h0: DVector<f64>,
}

impl DiscreteProblem {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let dp: Self = serde_json::from_str(s)?;
        dp.validate()?;
        Ok(dp)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn m_s(&self) -> usize {
        self.s_support.len()
    }

    pub fn m_t(&self) -> usize {
        self.t_support.len()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = (self.m_s(), self.m_t());
        for (name, table) in [("pmf", &self.pmf), ("g1_table", &self.g1_table), ("g2_table", &self.g2_table)] {
            if table.shape() != shape {
                return Err(Error::InvalidData(format!(
                    "{name} has shape {:?}, supports give {shape:?}",
                    table.shape()
                )));
            }
            if table.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("{name} has non-finite entries")));
            }
        }
        if self.m_weights.len() != self.m_s() {
            return Err(Error::DimensionMismatch {
                context: "m_weights",
                expected: self.m_s(),
                actual: self.m_weights.len(),
            });
        }
        if self.pmf.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidData("negative probability".into()));
        }
        if (self.pmf.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidData(format!("pmf sums to {}", self.pmf.sum())));
        }
        if self.marg_s().iter().chain(self.marg_t().iter()).any(|&p| p <= 0.0) {
            return Err(Error::InvalidData("zero-probability support point".into()));
        }
        Ok(())
    }

    pub fn marg_s(&self) -> DVector<f64> {
        self.pmf.column_sum()
    }

    pub fn marg_t(&self) -> DVector<f64> {
        self.pmf.row_sum().transpose()
    }

    /// `⟨a, b⟩` under the S-marginal.
    pub fn inner_s(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.marg_s().component_mul(a).dot(b)
    }

    /// `⟨a, b⟩` under the T-marginal.
    pub fn inner_t(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.marg_t().component_mul(a).dot(b)
    }

    /// `m_t × m_s` matrix of `[Ph](t) = E[g1 h(S) | T = t]`.
    pub fn p_matrix(&self) -> DMatrix<f64> {
        let mt = self.marg_t();
        DMatrix::from_fn(self.m_t(), self.m_s(), |t, s| {
            self.g1_table[(s, t)] * self.pmf[(s, t)] / mt[t]
        })
    }

    /// `m_s × m_t` matrix of `[P*q](s) = E[g1 q(T) | S = s]`.
    pub fn p_adjoint(&self) -> DMatrix<f64> {
        let ms = self.marg_s();
        DMatrix::from_fn(self.m_s(), self.m_t(), |s, t| {
            self.g1_table[(s, t)] * self.pmf[(s, t)] / ms[s]
        })
    }

    /// `α(s) = m_weights(s) / P(S = s)`.
    pub fn riesz_alpha(&self) -> DVector<f64> {
        self.m_weights.component_div(&self.marg_s())
    }

    /// `r₀(t) = E[g2 | T = t]`.
    pub fn r0(&self) -> DVector<f64> {
        let mt = self.marg_t();
        DVector::from_fn(self.m_t(), |t, _| {
            (0..self.m_s())
                .map(|s| self.pmf[(s, t)] * self.g2_table[(s, t)])
                .sum::<f64>()
                / mt[t]
        })
    }

    /// `P*P ξ = α`, minimum norm under the S-marginal.
    pub fn solve_xi0(&self) -> XiSolution {
        let a = self.p_adjoint() * self.p_matrix();
        let alpha = self.riesz_alpha();
        let ms = self.marg_s();
        let xi = weighted_min_norm(&a, &ms, &ms, &alpha);
        let residual = weighted_norm(&(&a * &xi - &alpha), &ms);
        XiSolution {
            xi,
            residual,
            feasible: residual < FEASIBILITY_TOL,
        }
    }

    /// `q† = P ξ₀`.
    pub fn q_dagger(&self, xi0: &XiSolution) -> Result<DVector<f64>> {
        if !xi0.feasible {
            return Err(Error::Identification(format!(
                "Riesz representer outside the range of P*P (residual {:.3e})",
                xi0.residual
            )));
        }
        Ok(self.p_matrix() * &xi0.xi)
    }

    /// Minimum-norm `h₀` with `P h₀ = r₀`.
    pub fn solve_h0(&self) -> Result<DVector<f64>> {
        let p = self.p_matrix();
        let r0 = self.r0();
        let h0 = weighted_min_norm(&p, &self.marg_t(), &self.marg_s(), &r0);
        let residual = weighted_norm(&(&p * &h0 - &r0), &self.marg_t());
        if residual >= FEASIBILITY_TOL {
            return Err(Error::Identification(format!(
                "moment equation has no solution (residual {residual:.3e})"
            )));
        }
        Ok(h0)
    }

    pub fn theta_star(&self) -> Result<ThetaStar> {
        let h0 = self.solve_h0()?;
        let theta = self.m_weights.dot(&h0);
        let xi0 = self.solve_xi0();
        let via_q = if xi0.feasible {
            let q = self.q_dagger(&xi0)?;
            Some(self.inner_t(&q, &self.r0()))
        } else {
            None
        };
        if let Some(v) = via_q {
            let scale = 1.0 + theta.abs();
            if (v - theta).abs() > 1e-10 * scale {
                return Err(Error::Identification(format!(
                    "identification formulas disagree: {theta} vs {v}"
                )));
            }
        }
        Ok(ThetaStar { theta, via_q, h0 })
    }

    /// Population `E[ψ(W; h, q)] = Σ m_weights h + ⟨q, r₀ − P h⟩_T`.
    pub fn expected_psi(&self, h: &DVector<f64>, q: &DVector<f64>) -> f64 {
        let gap = self.r0() - self.p_matrix() * h;
        self.m_weights.dot(h) + self.inner_t(q, &gap)
    }

    /// `(E[ψ(W; h, Pξ)] − θ*, −⟨P(h − h₀), P(ξ − ξ₀)⟩_T)`.
    pub fn verify_mixed_bias(&self, h: &DVector<f64>, xi: &DVector<f64>) -> Result<(f64, f64)> {
        let star = self.theta_star()?;
        let xi0 = self.solve_xi0();
        if !xi0.feasible {
            return Err(Error::Identification("no debiasing solution".into()));
        }
        let p = self.p_matrix();
        let lhs = self.expected_psi(h, &(&p * xi)) - star.theta;
        let rhs = -self.inner_t(&(&p * (h - &star.h0)), &(&p * (xi - &xi0.xi)));
        Ok((lhs, rhs))
    }

    /// `n` i.i.d. draws of `(S, T)` with `g1`, `g2` read from the tables.
    pub fn sample_from(&self, n: usize, seed: u64) -> Result<Dataset> {
        let (ms, mt) = (self.m_s(), self.m_t());
        let cells = WeightedIndex::new(self.pmf.transpose().iter().copied())
            .map_err(|e| Error::InvalidData(format!("pmf: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = DMatrix::zeros(n, 1);
        let mut t = DMatrix::zeros(n, 1);
        let mut g1 = DVector::zeros(n);
        let mut g2 = DVector::zeros(n);
        for i in 0..n {
            // Row-major over (s, t) after the transpose above.
            let k = cells.sample(&mut rng);
            let (si, ti) = (k / mt, k % mt);
            debug_assert!(si < ms);
            s[(i, 0)] = self.s_support[si];
            t[(i, 0)] = self.t_support[ti];
            g1[i] = self.g1_table[(si, ti)];
            g2[i] = self.g2_table[(si, ti)];
        }
        Ok(Dataset::new(s, t, g1, g2))
    }

    /// `S = T` on `m` equally likely points, `m` = mean functional.
    pub fn identity(m: usize) -> Self {
        let support: Vec<f64> = (0..m).map(|i| i as f64).collect();
        let pmf = DMatrix::from_fn(m, m, |s, t| if s == t { 1.0 / m as f64 } else { 0.0 });
        let g2_table = DMatrix::from_fn(m, m, |s, _| (s as f64 * 0.7).sin() + 0.5);
        Self {
            s_support: support.clone(),
            t_support: support,
            m_weights: pmf.column_sum(),
            pmf,
            g1_table: DMatrix::from_element(m, m, 1.0),
            g2_table,
        }
    }

    /// `S, T ∈ {−1, 1}` with pmf `[[0.4, 0.1], [0.1, 0.4]]`, `g1 ≡ 1`,
    /// `g2(s, t) = s` and Riesz representer `α(s) = s`.
    pub fn correlated_2x2() -> Self {
        let pmf = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.4]);
        let support = vec![-1.0, 1.0];
        let ms = pmf.column_sum();
        Self {
            m_weights: DVector::from_fn(2, |s, _| ms[s] * support[s]),
            s_support: support.clone(),
            t_support: support,
            pmf,
            g1_table: DMatrix::from_element(2, 2, 1.0),
            g2_table: DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 1.0]),
        }
    }

    /// Four `S` points, three `T` points and a non-constant `g1`, so `P` has a
    /// one-dimensional null space. `α` is placed in the range of `P*`.
    pub fn rank_deficient_4x3() -> Self {
        let raw = DMatrix::from_row_slice(
            4,
            3,
            &[
                0.20, 0.05, 0.02, //
                0.06, 0.15, 0.04, //
                0.03, 0.08, 0.12, //
                0.05, 0.07, 0.13,
            ],
        );
        let pmf = &raw / raw.sum();
        let s_support: Vec<f64> = vec![-1.5, -0.5, 0.5, 1.5];
        let t_support: Vec<f64> = vec![-1.0, 0.0, 1.0];
        let g1_table = DMatrix::from_fn(4, 3, |s, t| 1.0 + 0.3 * s_support[s] * t_support[t]);
        let g2_table = DMatrix::from_fn(4, 3, |s, t| {
            s_support[s].powi(2) - 0.4 * s_support[s] + 0.8 * t_support[t]
        });
        let mut dp = Self {
            s_support,
            t_support,
            pmf,
            g1_table,
            g2_table,
            m_weights: DVector::zeros(4),
        };
        let q_target = DVector::from_vec(vec![1.0, -0.5, 2.0]);
        let alpha = dp.p_adjoint() * q_target;
        dp.m_weights = alpha.component_mul(&dp.marg_s());
        dp
    }

    /// Three-point supports with `S` and `T` strongly dependent and the mean
    /// functional; suited to sampling.
    pub fn correlated_3x3() -> Self {
        let raw = DMatrix::from_row_slice(3, 3, &[6.0, 2.0, 1.0, 2.0, 5.0, 2.0, 1.0, 2.0, 6.0]);
        let pmf = &raw / raw.sum();
        let support = vec![-1.0, 0.0, 1.0];
        let g2_table = DMatrix::from_fn(3, 3, |s, t| {
            let (sv, tv) = (support[s], support[t]);
            sv * sv + 0.5 * sv + 0.3 * tv
        });
        Self {
            m_weights: pmf.column_sum(),
            s_support: support.clone(),
            t_support: support,
            pmf,
            g1_table: DMatrix::from_element(3, 3, 1.0),
            g2_table,
        }
    }

    /// The canonical problems exercised by [`identity_suite`].
    pub fn canonical() -> Vec<(&'static str, DiscreteProblem)> {
        vec![
            ("identity", Self::identity(3)),
            ("correlated_2x2", Self::correlated_2x2()),
            ("rank_deficient_4x3", Self::rank_deficient_4x3()),
        ]
    }
}

fn weighted_norm(v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    v.component_mul(v).dot(w).sqrt()
}

/// Least squares `a x ≈ b` in the `w_out` norm, minimum `w_in` norm.
fn weighted_min_norm(
    a: &DMatrix<f64>,
    w_out: &DVector<f64>,
    w_in: &DVector<f64>,
    b: &DVector<f64>,
) -> DVector<f64> {
    let so = w_out.map(f64::sqrt);
    let si = w_in.map(f64::sqrt);
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| so[i] * a[(i, j)] / si[j]);
    let y = min_norm_solve(&scaled, &b.component_mul(&so), RANGE_CUTOFF);
    y.component_div(&si)
}

#[derive(Clone, Debug)]
pub struct IdentityCheck {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn random_vec(rng: &mut impl Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0))
}

/// The population identities on one problem: adjointness, the equivalence
/// between minimizers and `P*Pξ = α`, minimum norm of `q†`, orthogonality of
/// `q†` to moment residuals, the mixed-bias product and Neyman orthogonality.
pub fn identity_suite(dp: &DiscreteProblem, seed: u64) -> Result<Vec<IdentityCheck>> {
    dp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ms, mt) = (dp.m_s(), dp.m_t());
    let p = dp.p_matrix();
    let p_adj = dp.p_adjoint();
    let alpha = dp.riesz_alpha();
    let star = dp.theta_star()?;
    let xi0 = dp.solve_xi0();
    let q_dag = dp.q_dagger(&xi0)?;
    let null_p = null_space(&p, RANGE_CUTOFF);
    let null_p_adj = null_space(&p_adj, RANGE_CUTOFF);
    let mut checks = Vec::new();

    let mut err = 0.0f64;
    for _ in 0..20 {
        let h = random_vec(&mut rng, ms);
        let q = random_vec(&mut rng, mt);
        err = err.max((dp.inner_t(&(&p * &h), &q) - dp.inner_s(&h, &(&p_adj * &q))).abs());
    }
    checks.push(IdentityCheck {
        name: "adjointness".into(),
        max_error: err,
        tolerance: 1e-12,
    });

    // ½‖Pξ‖² − ⟨α, ξ⟩ over ξ₀ + N(P) stays minimal and solves the normal equation.
    let objective = |xi: &DVector<f64>| {
        let pxi = &p * xi;
        0.5 * dp.inner_t(&pxi, &pxi) - dp.inner_s(&alpha, xi)
    };
    let j0 = objective(&xi0.xi);
    let mut err = 0.0f64;
    for _ in 0..20 {
        let shifted = &xi0.xi + &null_p * random_vec(&mut rng, null_p.ncols());
        let normal = weighted_norm(&(&p_adj * (&p * &shifted) - &alpha), &dp.marg_s());
        err = err.max(normal).max((objective(&shifted) - j0).abs());
        let other = random_vec(&mut rng, ms);
        err = err.max(j0 - objective(&other));
    }
    checks.push(IdentityCheck {
        name: "minimizers_solve_normal_equation".into(),
        max_error: err.max(xi0.residual),
        tolerance: 1e-10,
    });

    let q_norm = dp.inner_t(&q_dag, &q_dag).sqrt();
    let mut err = 0.0f64;
    for _ in 0..20 {
        let other = &q_dag + &null_p_adj * random_vec(&mut rng, null_p_adj.ncols());
        err = err.max(q_norm - dp.inner_t(&other, &other).sqrt());
        err = err.max(weighted_norm(&(&p_adj * &other - &alpha), &dp.marg_s()));
    }
    checks.push(IdentityCheck {
        name: "q_dagger_minimum_norm".into(),
        max_error: err,
        tolerance: 1e-10,
    });

    let r0 = dp.r0();
    let mut err = 0.0f64;
    for _ in 0..20 {
        let h = &star.h0 + &null_p * random_vec(&mut rng, null_p.ncols());
        err = err.max(dp.inner_t(&q_dag, &(&r0 - &p * &h)).abs());
    }
    checks.push(IdentityCheck {
        name: "orthogonality".into(),
        max_error: err,
        tolerance: 1e-12,
    });

    let mut err = 0.0f64;
    for _ in 0..50 {
        let h = random_vec(&mut rng, ms) * 2.0;
        let xi = random_vec(&mut rng, ms) * 2.0;
        let (lhs, rhs) = dp.verify_mixed_bias(&h, &xi)?;
        err = err.max((lhs - rhs).abs());
    }
    checks.push(IdentityCheck {
        name: "mixed_bias".into(),
        max_error: err,
        tolerance: 1e-10,
    });

    let step = 1e-5;
    let mut err = 0.0f64;
    for _ in 0..20 {
        let dh = random_vec(&mut rng, ms);
        let dq = random_vec(&mut rng, mt);
        let up = dp.expected_psi(&(&star.h0 + &dh * step), &(&q_dag + &dq * step));
        let down = dp.expected_psi(&(&star.h0 - &dh * step), &(&q_dag - &dq * step));
        err = err.max(((up - down) / (2.0 * step)).abs());
    }
    checks.push(IdentityCheck {
        name: "neyman_orthogonality".into(),
        max_error: err,
        tolerance: 1e-8,
    });

    checks.push(IdentityCheck {
        name: "theta_identification".into(),
        max_error: star.via_q.map_or(f64::INFINITY, |v| (v - star.theta).abs()),
        tolerance: 1e-10,
    });
    Ok(checks)
}
