//! Closed-form penalized minimax solvers.
//!
//! For a test class `Q` with data design on `T`, the inner problem
//!
//! ```text
//! sup_q  E_n[u·q] − ½ E_n[q²] − γ_q ‖q‖²_Q
//! ```
//!
//! has optimum `uᵀΩu / (2n)` where `Ω = K(K + 2nγ_q I)⁻¹` for the RKHS and
//! `Ω = Ψ(ΨᵀΨ + 2nγ_q I)⁻¹Ψᵀ` for a sieve. The outer problems over `h` and `ξ`
//! are then quadratics in the basis coefficients and reduce to one symmetric
//! linear solve each.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean, symmetrize, SymSolver};
use crate::problem::{Dataset, FunctionalSpec, MomentProblem};
use crate::spaces::{Basis, FittedFunction, FunctionClassSpec};

pub const DEFAULT_JITTER: f64 = 1e-10;

/// Regularization hyperparameters for the three penalized problems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Penalty on the empirical second moment of `h`.
    pub mu_n: f64,
    pub gamma_q: f64,
    pub gamma_h: f64,
    pub gamma_xi: f64,
    /// Ridge penalty of the `q̂` projection.
    pub tilde_gamma_q: f64,
    #[serde(default = "default_jitter")]
    pub jitter_scale: f64,
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

/// Penalties that shrink with the training size as `c·n^-rate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltySchedule {
    pub mu_const: f64,
    /// Shared constant for `γ_q`, `γ_h`, `γ_ξ` and `γ̃_q`.
    pub gamma_const: f64,
    pub rate: f64,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self {
            mu_const: 0.1,
            gamma_const: 0.01,
            rate: 0.9,
        }
    }
}

impl PenaltySchedule {
    pub fn at(&self, n: usize) -> PenaltyConfig {
        let r = (n.max(1) as f64).powf(-self.rate);
        let g = self.gamma_const * r;
        PenaltyConfig {
            mu_n: self.mu_const * r,
            gamma_q: g,
            gamma_h: g,
            gamma_xi: g,
            tilde_gamma_q: g,
            jitter_scale: DEFAULT_JITTER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.at(1).validate()?;
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("penalty rate must be non-negative, got {}", self.rate)));
        }
        Ok(())
    }
}

impl PenaltyConfig {
    /// `μ_n = 0.1·n^-0.9`; every class-norm penalty one order below.
    pub fn default_for_n(n: usize) -> Self {
        PenaltySchedule::default().at(n)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mu_n", self.mu_n),
            ("gamma_q", self.gamma_q),
            ("gamma_h", self.gamma_h),
            ("gamma_xi", self.gamma_xi),
            ("tilde_gamma_q", self.tilde_gamma_q),
            ("jitter_scale", self.jitter_scale),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

enum OperatorKind {
    Kernel { gram: DMatrix<f64> },
    Sieve { design: DMatrix<f64> },
}

/// The symmetric PSD map `Ω` of a test class on fixed `T` data.
pub struct TestOperator {
    basis: Basis,
    kind: OperatorKind,
    solver: SymSolver,
    n: usize,
}

/// Build `Ω` for `q_class` on the rows of `t_data`.
pub fn build_test_operator(
    q_class: &FunctionClassSpec,
    t_data: &DMatrix<f64>,
    gamma_q: f64,
    jitter_scale: f64,
) -> Result<TestOperator> {
    if !(gamma_q >= 0.0) {
        return Err(Error::InvalidConfig(format!("gamma_q must be nonnegative, got {gamma_q}")));
    }
    let n = t_data.nrows();
    if n == 0 {
        return Err(Error::InvalidData("test operator on empty data".into()));
    }
    let basis = q_class.basis_on(t_data)?;
    let ridge = 2.0 * n as f64 * gamma_q;
    let (kind, system) = match &basis {
        Basis::Kernel { .. } => {
            let gram = basis.design(t_data)?;
            let mut sys = gram.clone();
            for i in 0..n {
                sys[(i, i)] += ridge;
            }
            (OperatorKind::Kernel { gram }, sys)
        }
        Basis::Sieve(_) => {
            let design = basis.design(t_data)?;
            let mut sys = design.tr_mul(&design);
            for i in 0..sys.nrows() {
                sys[(i, i)] += ridge;
            }
            (OperatorKind::Sieve { design }, sys)
        }
        Basis::PartiallyLinear { .. } => {
            return Err(Error::InvalidConfig(
                "partially linear classes are not test classes".into(),
            ))
        }
    };
    let solver = SymSolver::new(system, jitter_scale, "test operator")?;
    Ok(TestOperator {
        basis,
        kind,
        solver,
        n,
    })
}

impl TestOperator {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `Ω X`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kind {
            OperatorKind::Kernel { gram } => gram * self.solver.solve(x),
            OperatorKind::Sieve { design } => design * self.solver.solve(&design.tr_mul(x)),
        }
    }

    pub fn apply_vec(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            OperatorKind::Kernel { gram } => gram * self.solver.solve_vec(u),
            OperatorKind::Sieve { design } => design * self.solver.solve_vec(&design.tr_mul(u)),
        }
    }

    /// Optimal inner value `uᵀΩu / (2n)`.
    pub fn value(&self, u: &DVector<f64>) -> f64 {
        u.dot(&self.apply_vec(u)) / (2.0 * self.n as f64)
    }

    /// Coefficients of the optimal test function for residual `u`.
    pub fn maximizer_coefficients(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            OperatorKind::Kernel { .. } => self.solver.solve_vec(u),
            OperatorKind::Sieve { design } => self.solver.solve_vec(&design.tr_mul(u)),
        }
    }

    pub fn maximizer(&self, u: &DVector<f64>) -> Result<FittedFunction> {
        self.basis.to_function(&self.maximizer_coefficients(u))
    }

    /// Dense `n × n` matrix of `Ω`.
    pub fn materialize(&self) -> DMatrix<f64> {
        let mut m = self.apply(&DMatrix::identity(self.n, self.n));
        symmetrize(&mut m);
        m
    }
}

/// A symmetric linear system `A c = b` from a first-order condition.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl LinearSystem {
    pub fn solve(&self, jitter_scale: f64, context: &'static str) -> Result<DVector<f64>> {
        let solver = SymSolver::new(self.matrix.clone(), jitter_scale, context)?;
        Ok(solver.solve_vec(&self.rhs))
    }

    /// `‖A c − b‖`.
    pub fn residual_norm(&self, c: &DVector<f64>) -> f64 {
        (&self.matrix * c - &self.rhs).norm()
    }
}

/// The parts of the outer quadratic that depend only on the `h` (or `ξ`)
/// basis, the data and the test operator. Shared between the `h`, `ξ` and
/// clever-instrument solves on one training sample.
pub struct OuterQuadratic {
    pub basis: Basis,
    /// `B`: basis evaluated on the training `S` rows.
    pub design: DMatrix<f64>,
    /// `Ω D B` with `D = diag(g1)`.
    pub omega_weighted: DMatrix<f64>,
    /// `BᵀDΩDB`.
    pub projected_gram: DMatrix<f64>,
    /// Class-norm Gram `N` in coefficient space.
    pub norm: DMatrix<f64>,
    /// Extra per-coefficient ridge (objective term `Σ r_j c_j²`).
    pub coefficient_ridge: Option<DVector<f64>>,
    n: usize,
}

impl OuterQuadratic {
    pub fn new(basis: Basis, d: &Dataset, omega: &TestOperator) -> Result<Self> {
        if omega.n() != d.n {
            return Err(Error::DimensionMismatch {
                context: "test operator rows",
                expected: d.n,
                actual: omega.n(),
            });
        }
        let design = basis.design(&d.s)?;
        let mut weighted = design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= d.g1[i];
        }
        let omega_weighted = omega.apply(&weighted);
        let mut projected_gram = weighted.tr_mul(&omega_weighted);
        symmetrize(&mut projected_gram);
        let norm = basis.norm_gram();
        Ok(Self {
            basis,
            design,
            omega_weighted,
            projected_gram,
            norm,
            coefficient_ridge: None,
            n: d.n,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn add_ridge(&self, a: &mut DMatrix<f64>) {
        if let Some(r) = &self.coefficient_ridge {
            let scale = 2.0 * self.n as f64;
            for (j, rj) in r.iter().enumerate() {
                a[(j, j)] += scale * rj;
            }
        }
    }

    /// `[BᵀDΩDB + 2μ BᵀB + 2nγ_h N] c = BᵀDΩ g2`.
    pub fn h_system(&self, g2: &DVector<f64>, pen: &PenaltyConfig) -> LinearSystem {
        let n = self.n as f64;
        let mut a = self.projected_gram.clone();
        if pen.mu_n > 0.0 {
            a += self.design.tr_mul(&self.design) * (2.0 * pen.mu_n);
        }
        if pen.gamma_h > 0.0 {
            a += &self.norm * (2.0 * n * pen.gamma_h);
        }
        self.add_ridge(&mut a);
        symmetrize(&mut a);
        LinearSystem {
            matrix: a,
            rhs: self.omega_weighted.tr_mul(g2),
        }
    }

    /// `[BᵀDΩDB + 2nγ_ξ N] c = n·m̄`.
    pub fn xi_system(&self, mbar: &DVector<f64>, pen: &PenaltyConfig) -> LinearSystem {
        let n = self.n as f64;
        let mut a = self.projected_gram.clone();
        if pen.gamma_xi > 0.0 {
            a += &self.norm * (2.0 * n * pen.gamma_xi);
        }
        self.add_ridge(&mut a);
        symmetrize(&mut a);
        LinearSystem {
            matrix: a,
            rhs: mbar * n,
        }
    }

    /// `m̄_j = E_n[m(W; basis_j)]`.
    pub fn functional_means(&self, functional: &FunctionalSpec, d: &Dataset) -> Result<DVector<f64>> {
        let per_obs = functional.apply(&self.basis, d)?;
        Ok(per_obs.row_mean().transpose())
    }

    pub fn fit_h(&self, g2: &DVector<f64>, pen: &PenaltyConfig) -> Result<FittedFunction> {
        let c = self.h_system(g2, pen).solve(pen.jitter_scale, "h first-order system")?;
        self.basis.to_function(&c)
    }

    pub fn fit_xi(
        &self,
        functional: &FunctionalSpec,
        d: &Dataset,
        pen: &PenaltyConfig,
    ) -> Result<FittedFunction> {
        let mbar = self.functional_means(functional, d)?;
        let c = self.xi_system(&mbar, pen).solve(pen.jitter_scale, "xi first-order system")?;
        self.basis.to_function(&c)
    }

    /// `h` solve subject to `E_n'[q†(T)(g2 − g1·h(S))] = 0` on `constraint_data`
    /// (one Lagrange multiplier).
    pub fn fit_h_clever(
        &self,
        g2: &DVector<f64>,
        pen: &PenaltyConfig,
        q_dagger: &FittedFunction,
        constraint_data: &Dataset,
    ) -> Result<FittedFunction> {
        let system = self.h_system(g2, pen);
        let solver = SymSolver::new(system.matrix.clone(), pen.jitter_scale, "clever h system")?;
        let c0 = solver.solve_vec(&system.rhs);

        let m = constraint_data.n as f64;
        let qd = q_dagger.evaluate(&constraint_data.t)?;
        let weights = qd.component_mul(&constraint_data.g1);
        let a = self.basis.design(&constraint_data.s)?.tr_mul(&weights) / m;
        let b = qd.dot(&constraint_data.g2) / m;
        let scale = 1.0 + crate::linalg::rms(&constraint_data.g2);

        if a.norm() == 0.0 {
            if b.abs() < 1e-12 * scale {
                return self.basis.to_function(&c0);
            }
            return Err(Error::Infeasible(
                "clever-instrument moment does not depend on h".into(),
            ));
        }
        let dir = solver.solve_vec(&a);
        let curvature = a.dot(&dir);
        if !(curvature.abs() > 1e-14 * a.norm() * dir.norm()) {
            return Err(Error::Infeasible(
                "clever-instrument constraint is degenerate within the class".into(),
            ));
        }
        let lambda = (a.dot(&c0) - b) / curvature;
        let c = c0 - dir * lambda;
        self.basis.to_function(&c)
    }

    /// Empirical objective at coefficients `c`:
    /// `uᵀΩu/(2n) + μ E_n[h²] + γ_h ‖h‖²` with `u = D B c − g2`.
    pub fn h_objective(
        &self,
        omega: &TestOperator,
        g1: &DVector<f64>,
        g2: &DVector<f64>,
        pen: &PenaltyConfig,
        c: &DVector<f64>,
    ) -> f64 {
        let hv = &self.design * c;
        let u = g1.component_mul(&hv) - g2;
        let mut obj = omega.value(&u) + pen.mu_n * mean(&hv.map(|v| v * v)) + pen.gamma_h * c.dot(&(&self.norm * c));
        if let Some(r) = &self.coefficient_ridge {
            obj += c.iter().zip(r.iter()).map(|(ci, ri)| ri * ci * ci).sum::<f64>();
        }
        obj
    }
}

/// Penalized minimax estimate of the primary nuisance `ĥ`.
pub fn estimate_h(
    p: &MomentProblem,
    h_class: &FunctionClassSpec,
    q_class: &FunctionClassSpec,
    pen: &PenaltyConfig,
) -> Result<FittedFunction> {
    pen.validate()?;
    let d = &p.dataset;
    d.ensure_valid()?;
    let omega = build_test_operator(q_class, &d.t, pen.gamma_q, pen.jitter_scale)?;
    let quad = OuterQuadratic::new(h_class.basis_on(&d.s)?, d, &omega)?;
    quad.fit_h(&d.g2, pen)
}

/// Penalized minimax estimate of the debiasing direction `ξ̂`.
pub fn estimate_xi(
    p: &MomentProblem,
    xi_class: &FunctionClassSpec,
    q_class: &FunctionClassSpec,
    pen: &PenaltyConfig,
) -> Result<FittedFunction> {
    pen.validate()?;
    let d = &p.dataset;
    d.ensure_valid()?;
    let omega = build_test_operator(q_class, &d.t, pen.gamma_q, pen.jitter_scale)?;
    let quad = OuterQuadratic::new(xi_class.basis_on(&d.s)?, d, &omega)?;
    quad.fit_xi(&p.functional, d, pen)
}

/// Ridge (or kernel ridge) regression of `values` on the rows of `t`.
pub fn project_values(
    values: &DVector<f64>,
    t: &DMatrix<f64>,
    q_class: &FunctionClassSpec,
    tilde_gamma_q: f64,
    jitter_scale: f64,
) -> Result<FittedFunction> {
    let n = t.nrows();
    if values.len() != n {
        return Err(Error::DimensionMismatch {
            context: "projection targets",
            expected: n,
            actual: values.len(),
        });
    }
    if !(tilde_gamma_q >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "tilde_gamma_q must be nonnegative, got {tilde_gamma_q}"
        )));
    }
    let basis = q_class.basis_on(t)?;
    let design = basis.design(t)?;
    let ridge = n as f64 * tilde_gamma_q;
    let coefficients = match &basis {
        Basis::Kernel { .. } => {
            let mut sys = design;
            for i in 0..n {
                sys[(i, i)] += ridge;
            }
            SymSolver::new(sys, jitter_scale, "q projection")?.solve_vec(values)
        }
        _ => {
            let mut sys = design.tr_mul(&design);
            for i in 0..sys.nrows() {
                sys[(i, i)] += ridge;
            }
            SymSolver::new(sys, jitter_scale, "q projection")?.solve_vec(&design.tr_mul(values))
        }
    };
    basis.to_function(&coefficients)
}

/// `q̂`: projection of `g1·ξ̂(S)` onto `T`.
pub fn project_q(
    p: &MomentProblem,
    xi_hat: &FittedFunction,
    q_class: &FunctionClassSpec,
    tilde_gamma_q: f64,
) -> Result<FittedFunction> {
    let d = &p.dataset;
    let v = xi_hat.evaluate(&d.s)?.component_mul(&d.g1);
    project_values(&v, &d.t, q_class, tilde_gamma_q, DEFAULT_JITTER)
}

/// `ĥ` with the clever-instrument constraint `E_n[q̂†(T)(g2 − g1·ĥ(S))] = 0`.
pub fn estimate_h_clever(
    p: &MomentProblem,
    h_class: &FunctionClassSpec,
    q_class: &FunctionClassSpec,
    pen: &PenaltyConfig,
    q_dagger: &FittedFunction,
) -> Result<FittedFunction> {
    pen.validate()?;
    let d = &p.dataset;
    d.ensure_valid()?;
    let omega = build_test_operator(q_class, &d.t, pen.gamma_q, pen.jitter_scale)?;
    let quad = OuterQuadratic::new(h_class.basis_on(&d.s)?, d, &omega)?;
    quad.fit_h_clever(&d.g2, pen, q_dagger, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn rkhs(bw: f64) -> FunctionClassSpec {
        FunctionClassSpec::GaussianRkhs { bandwidth: Some(bw) }
    }

    #[test]
    fn zero_residual_zero_value() {
        let t = col(&[0.0, 1.0, 2.5]);
        let op = build_test_operator(&rkhs(1.0), &t, 0.1, DEFAULT_JITTER).unwrap();
        let u = DVector::zeros(3);
        assert_eq!(op.value(&u), 0.0);
        assert_eq!(op.maximizer_coefficients(&u), DVector::zeros(3));
    }

    #[test]
    fn one_by_one_operator() {
        let t = col(&[0.7]);
        let op = build_test_operator(&rkhs(1.0), &t, 0.5, 0.0).unwrap();
        let u = DVector::from_vec(vec![2.0]);
        assert!((op.maximizer_coefficients(&u)[0] - 1.0).abs() < 1e-15);
        assert!((op.value(&u) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn value_bounds_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-2.0..2.0));
        for class in [rkhs(0.8), FunctionClassSpec::linear(2, true)] {
            let op = build_test_operator(&class, &t, 0.01, DEFAULT_JITTER).unwrap();
            let om = op.materialize();
            assert!((&om - om.transpose()).amax() < 1e-12);
            let eig = om.clone().symmetric_eigen().eigenvalues;
            assert!(eig.max() < 1.0);
            assert!(eig.min() > -1e-10);
            for _ in 0..10 {
                let u = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
                let v = op.value(&u);
                assert!(v >= 0.0 && v <= u.norm_squared() / 60.0);
            }
        }
    }

    #[test]
    fn sieve_value_matches_explicit_sup() {
        // Brute-force: maximize the penalized inner objective over b directly.
        let t = col(&[-1.0, 0.5, 2.0, 3.0]);
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.3]);
        let gamma = 0.05;
        let op = build_test_operator(&FunctionClassSpec::linear(1, true), &t, gamma, 0.0).unwrap();
        let b = op.maximizer_coefficients(&u);
        let psi = crate::spaces::features(&FunctionClassSpec::linear(1, true), &t).unwrap();
        let inner = |b: &DVector<f64>| {
            let q = &psi * b;
            (u.dot(&q) - 0.5 * q.norm_squared()) / 4.0 - gamma * b.norm_squared()
        };
        let best = inner(&b);
        assert!((best - op.value(&u)).abs() < 1e-12);
        for db in [[1e-3, 0.0], [0.0, 1e-3], [-1e-3, 1e-3]] {
            let pert = &b + DVector::from_row_slice(&db);
            assert!(inner(&pert) < best);
        }
    }

    #[test]
    fn penalty_defaults() {
        let p = PenaltyConfig::default_for_n(1000);
        assert!((p.mu_n - 0.1 * 1000f64.powf(-0.9)).abs() < 1e-15);
        assert!((p.gamma_q * 10.0 - p.mu_n).abs() < 1e-15);
        assert!(p.validate().is_ok());
        let bad = PenaltyConfig { mu_n: -1.0, ..p };
        assert!(bad.validate().is_err());
    }
}
