//! Partially linear IV: `h(X) = θᵀX_a + g(X_b)` with instruments `Z`, and
//! debiased inference on `θ`.
//!
//! The model is a special case of the moment restriction with `S = [X_a | X_b]`,
//! `T = Z`, `g1 ≡ 1`, `g2 = Y`; each `θ_i` is the linear functional
//! `m_i(W; h) = h(X + e_i) − h(X)`. One `(ξ_i, q_i)` pair is fit per coordinate.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debiased::{split_plan, variance_and_ci, CrossfitConfig};
use crate::error::{Error, Result};
use crate::linalg::{hstack, mean, rms, select_rows};
use crate::minimax::{build_test_operator, project_values, OuterQuadratic, PenaltyConfig, TestOperator};
use crate::problem::{ColumnRoles, Dataset, FunctionalSpec, MomentProblem};
use crate::spaces::{Basis, FittedFunction, FunctionClassSpec};

/// Ridge on the linear coefficients, for conditioning only.
pub const THETA_RIDGE: f64 = 1e-8;
/// Smallest eigenvalue of `Γ̂`, relative to the residual second moment of
/// `X_a − ρ̂(X_b)`, below which the instruments are deemed irrelevant.
pub const MIN_INSTRUMENT_SHARE: f64 = 5e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct PLDataset {
    pub n: usize,
    pub x_a: DMatrix<f64>,
    pub x_b: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// CSV sidecar for [`PLDataset`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlColumnRoles {
    pub a: Vec<String>,
    pub b: Vec<String>,
    pub z: Vec<String>,
    pub y: String,
}

impl PLDataset {
    pub fn new(x_a: DMatrix<f64>, x_b: DMatrix<f64>, z: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let n = y.len();
        for (name, rows) in [("x_a", x_a.nrows()), ("x_b", x_b.nrows()), ("z", z.nrows())] {
            if rows != n {
                return Err(Error::InvalidData(format!("length mismatch: {name} has {rows} rows, y has {n}")));
            }
        }
        if x_a.ncols() == 0 {
            return Err(Error::InvalidData("x_a needs at least one column".into()));
        }
        if z.ncols() == 0 {
            return Err(Error::InvalidData("z needs at least one column".into()));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&x_a) && finite(&x_b) && finite(&z) && y.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidData("non-finite entry in partially linear data".into()));
        }
        Ok(Self { n, x_a, x_b, z, y })
    }

    pub fn from_csv(path: impl AsRef<Path>, roles: &PlColumnRoles) -> Result<Self> {
        let generic = ColumnRoles {
            s: roles.a.iter().chain(&roles.b).cloned().collect(),
            t: roles.z.clone(),
            g2: roles.y.clone(),
            ..ColumnRoles::default()
        };
        let d = Dataset::from_csv(path, &generic)?;
        let d_a = roles.a.len();
        Self::new(
            d.s.columns(0, d_a).into_owned(),
            d.s.columns(d_a, roles.b.len()).into_owned(),
            d.t,
            d.g2,
        )
    }

    pub fn d_a(&self) -> usize {
        self.x_a.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> PLDataset {
        PLDataset {
            n: rows.len(),
            x_a: select_rows(&self.x_a, rows),
            x_b: select_rows(&self.x_b, rows),
            z: select_rows(&self.z, rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
        }
    }

    /// `[X_a | X_b]`.
    pub fn x(&self) -> DMatrix<f64> {
        hstack(&self.x_a, &self.x_b)
    }

    /// The generic moment problem targeting `θ_coord`.
    pub fn to_problem(&self, coord: usize) -> Result<MomentProblem> {
        let d = Dataset::new(self.x(), self.z.clone(), DVector::from_element(self.n, 1.0), self.y.clone());
        MomentProblem::new(d, FunctionalSpec::CoefficientSelector { coord })
    }
}

/// Nuisances fit on one training sample.
#[derive(Clone, Debug)]
pub struct PlNuisances {
    pub theta_tilde: DVector<f64>,
    pub g_hat: FittedFunction,
    pub q_hat: Vec<FittedFunction>,
    pub xi_hat: Vec<FittedFunction>,
}

#[derive(Clone, Debug)]
pub struct PLEstimate {
    pub theta: DVector<f64>,
    pub se: DVector<f64>,
    pub ci: Vec<(f64, f64)>,
    pub alpha: f64,
    pub n: usize,
    /// One entry per training split.
    pub nuisances: Vec<PlNuisances>,
}

impl PLEstimate {
    pub fn covers(&self, theta_star: &[f64]) -> Vec<bool> {
        self.ci
            .iter()
            .zip(theta_star)
            .map(|(&(lo, hi), &t)| lo <= t && t <= hi)
            .collect()
    }
}

/// Test operator on `Z` and the outer quadratic over the partially linear
/// class, shared by the `h` and `ξ` solves.
struct PlSolver {
    quad: OuterQuadratic,
    data: Dataset,
    d_a: usize,
}

impl PlSolver {
    fn new(d: &PLDataset, g_class: &FunctionClassSpec, omega: &TestOperator) -> Result<Self> {
        let basis = Basis::PartiallyLinear {
            d_a: d.d_a(),
            g: Box::new(g_class.basis_on(&d.x_b)?),
        };
        let data = d.to_problem(0)?.dataset;
        let mut quad = OuterQuadratic::new(basis, &data, omega)?;
        let mut ridge = DVector::zeros(quad.basis.len());
        ridge.rows_mut(0, d.d_a()).fill(THETA_RIDGE);
        quad.coefficient_ridge = Some(ridge);
        Ok(Self {
            quad,
            data,
            d_a: d.d_a(),
        })
    }

    fn fit_h(&self, pen: &PenaltyConfig) -> Result<(DVector<f64>, FittedFunction)> {
        match self.quad.fit_h(&self.data.g2, pen)? {
            FittedFunction::PartiallyLinear { theta, g } => Ok((theta, *g)),
            _ => unreachable!("partially linear basis yields partially linear functions"),
        }
    }

    fn fit_xi(&self, coord: usize, pen: &PenaltyConfig) -> Result<FittedFunction> {
        self.quad
            .fit_xi(&FunctionalSpec::CoefficientSelector { coord }, &self.data, pen)
    }
}

fn operator(d: &PLDataset, q_class: &FunctionClassSpec, pen: &PenaltyConfig) -> Result<TestOperator> {
    pen.validate()?;
    build_test_operator(q_class, &d.z, pen.gamma_q, pen.jitter_scale)
}

/// Minimax fit of `(θ̃, ĝ)`; `γ_h` penalizes only the `g` block.
pub fn pl_estimate_h(
    d: &PLDataset,
    g_class: &FunctionClassSpec,
    q_class: &FunctionClassSpec,
    pen: &PenaltyConfig,
) -> Result<(DVector<f64>, FittedFunction)> {
    let omega = operator(d, q_class, pen)?;
    PlSolver::new(d, g_class, &omega)?.fit_h(pen)
}

/// Per coordinate: `ξ̂_i` for the coefficient selector, then `q̂_i` by
/// projecting `ξ̂_i(X)` onto `Z`. Returns `(q̂, ξ̂)`.
pub fn pl_estimate_debias(
    d: &PLDataset,
    xi_class: &FunctionClassSpec,
    q_class: &FunctionClassSpec,
    q_tilde_class: &FunctionClassSpec,
    pen: &PenaltyConfig,
) -> Result<(Vec<FittedFunction>, Vec<FittedFunction>)> {
    let omega = operator(d, q_class, pen)?;
    let solver = PlSolver::new(d, xi_class, &omega)?;
    debias_with(&solver, d, q_tilde_class, pen)
}

fn debias_with(
    solver: &PlSolver,
    d: &PLDataset,
    q_tilde_class: &FunctionClassSpec,
    pen: &PenaltyConfig,
) -> Result<(Vec<FittedFunction>, Vec<FittedFunction>)> {
    let x = d.x();
    let mut qs = Vec::with_capacity(solver.d_a);
    let mut xis = Vec::with_capacity(solver.d_a);
    for coord in 0..solver.d_a {
        let xi = solver.fit_xi(coord, pen)?;
        let q = project_values(&xi.evaluate(&x)?, &d.z, q_tilde_class, pen.tilde_gamma_q, pen.jitter_scale)?;
        qs.push(q);
        xis.push(xi);
    }
    Ok((qs, xis))
}

fn pl_residual(d: &PLDataset, theta_tilde: &DVector<f64>, g_hat: &FittedFunction) -> Result<DVector<f64>> {
    if theta_tilde.len() != d.d_a() {
        return Err(Error::DimensionMismatch {
            context: "theta",
            expected: d.d_a(),
            actual: theta_tilde.len(),
        });
    }
    Ok(&d.y - &d.x_a * theta_tilde - g_hat.evaluate(&d.x_b)?)
}

/// `ψ_i = θ̃_i + (Y − θ̃ᵀX_a − ĝ(X_b)) q̂_i(Z)` on `d`, one column per coordinate.
fn pl_psi(
    d: &PLDataset,
    theta_tilde: &DVector<f64>,
    g_hat: &FittedFunction,
    q_hat: &[FittedFunction],
) -> Result<DMatrix<f64>> {
    if q_hat.len() != d.d_a() {
        return Err(Error::DimensionMismatch {
            context: "q functions",
            expected: d.d_a(),
            actual: q_hat.len(),
        });
    }
    let r = pl_residual(d, theta_tilde, g_hat)?;
    let mut psi = DMatrix::zeros(d.n, d.d_a());
    for (i, q) in q_hat.iter().enumerate() {
        let col = q.evaluate(&d.z)?.component_mul(&r).add_scalar(theta_tilde[i]);
        psi.set_column(i, &col);
    }
    Ok(psi)
}

/// `θ̂ = θ̃ + E_n[(Y − θ̃ᵀX_a − ĝ(X_b)) q̂(Z)]` on evaluation rows `d`.
pub fn pl_debiased_theta(
    d: &PLDataset,
    theta_tilde: &DVector<f64>,
    g_hat: &FittedFunction,
    q_hat: &[FittedFunction],
    alpha: f64,
) -> Result<PLEstimate> {
    let psi = pl_psi(d, theta_tilde, g_hat, q_hat)?;
    summarize(&[psi], alpha, Vec::new())
}

fn summarize(psi_by_fold: &[DMatrix<f64>], alpha: f64, nuisances: Vec<PlNuisances>) -> Result<PLEstimate> {
    let d_a = psi_by_fold.first().map_or(0, |p| p.ncols());
    let n: usize = psi_by_fold.iter().map(|p| p.nrows()).sum();
    let mut theta = DVector::zeros(d_a);
    let mut se = DVector::zeros(d_a);
    let mut ci = Vec::with_capacity(d_a);
    for i in 0..d_a {
        let cols: Vec<DVector<f64>> = psi_by_fold.iter().map(|p| p.column(i).into_owned()).collect();
        let t = cols.iter().map(|c| c.sum()).sum::<f64>() / n as f64;
        let (s, interval) = variance_and_ci(&cols, t, alpha, n)?;
        theta[i] = t;
        se[i] = s;
        ci.push(interval);
    }
    Ok(PLEstimate {
        theta,
        se,
        ci,
        alpha,
        n,
        nuisances,
    })
}

/// Cross-fitted (or simple-split) debiased `θ̂`. `cfg.h_class` and
/// `cfg.xi_class` are the classes of the nonparametric block on `X_b`.
pub fn pl_crossfit(d: &PLDataset, cfg: &CrossfitConfig) -> Result<PLEstimate> {
    cfg.validate(d.n)?;
    let plan = split_plan(d.n, cfg);
    let folds: Vec<(DMatrix<f64>, PlNuisances)> = plan
        .par_iter()
        .enumerate()
        .map(|(fold, (train_rows, eval_rows))| {
            let inner = || -> Result<(DMatrix<f64>, PlNuisances)> {
                let train = d.subset(train_rows);
                let eval = d.subset(eval_rows);
                let pen = cfg.penalties_for(train.n);
                let omega = operator(&train, &cfg.q_class, &pen)?;
                let h_solver = PlSolver::new(&train, &cfg.h_class, &omega)?;
                let (theta_tilde, g_hat) = h_solver.fit_h(&pen)?;
                let (q_hat, xi_hat) = if cfg.xi_class == cfg.h_class {
                    debias_with(&h_solver, &train, &cfg.q_tilde_class, &pen)?
                } else {
                    let xi_solver = PlSolver::new(&train, &cfg.xi_class, &omega)?;
                    debias_with(&xi_solver, &train, &cfg.q_tilde_class, &pen)?
                };
                let psi = pl_psi(&eval, &theta_tilde, &g_hat, &q_hat)?;
                Ok((
                    psi,
                    PlNuisances {
                        theta_tilde,
                        g_hat,
                        q_hat,
                        xi_hat,
                    },
                ))
            };
            inner().map_err(|e| e.in_fold(fold))
        })
        .collect::<Result<_>>()?;
    let (psi, nuisances): (Vec<_>, Vec<_>) = folds.into_iter().unzip();
    summarize(&psi, cfg.alpha, nuisances)
}

#[derive(Clone, Debug)]
pub struct ChenXi {
    /// `ξ̃_i = [Γ̂⁻¹(X_a − ρ̂(X_b))]_i` as partially linear functions of `[X_a | X_b]`.
    pub xi_tilde: Vec<FittedFunction>,
    pub gamma: DMatrix<f64>,
    /// `ρ̂_i` on `X_b`.
    pub rho_hat: Vec<FittedFunction>,
}

/// Alternative debiasing direction from `ρ₀` (the instrumented projection of
/// `X_a` on `X_b`) and `Γ = E[q̄ q̄ᵀ]`, `q̄ = E[X_a − ρ₀(X_b) | Z]`.
pub fn chen_alternative_xi(
    d: &PLDataset,
    rho_class: &FunctionClassSpec,
    q_class: &FunctionClassSpec,
    pen: &PenaltyConfig,
) -> Result<ChenXi> {
    let pen_rho = PenaltyConfig { mu_n: 0.0, ..*pen };
    let omega = operator(d, q_class, &pen_rho)?;
    let d_a = d.d_a();
    let data = Dataset::new(
        d.x_b.clone(),
        d.z.clone(),
        DVector::from_element(d.n, 1.0),
        DVector::zeros(d.n),
    );
    let quad = OuterQuadratic::new(rho_class.basis_on(&d.x_b)?, &data, &omega)?;
    let mut rho_hat = Vec::with_capacity(d_a);
    let mut q_bar = DMatrix::zeros(d.n, d_a);
    let mut resid_sq = 0.0;
    for i in 0..d_a {
        let xa = d.x_a.column(i).into_owned();
        let rho = quad.fit_h(&xa, &pen_rho)?;
        let resid = &xa - rho.evaluate(&d.x_b)?;
        resid_sq += rms(&resid).powi(2);
        let fitted = project_values(&resid, &d.z, q_class, pen.tilde_gamma_q, pen.jitter_scale)?.evaluate(&d.z)?;
        q_bar.set_column(i, &fitted);
        rho_hat.push(rho);
    }
    let gamma = q_bar.tr_mul(&q_bar) / d.n as f64;
    let eig = gamma.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0 && lo > hi * 1e-8 && lo > MIN_INSTRUMENT_SHARE * resid_sq / d_a as f64) {
        return Err(Error::Identification(format!(
            "instrumented second-moment matrix is near singular (eigenvalues {lo:.3e}..{hi:.3e})"
        )));
    }
    let gamma_inv = gamma
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("instrumented second-moment matrix"))?;
    let mut xi_tilde = Vec::with_capacity(d_a);
    for i in 0..d_a {
        let mut g = rho_hat[0].scaled(-gamma_inv[(i, 0)]);
        for (j, rho) in rho_hat.iter().enumerate().skip(1) {
            g = g.add_scaled(rho, -gamma_inv[(i, j)])?;
        }
        xi_tilde.push(FittedFunction::PartiallyLinear {
            theta: gamma_inv.row(i).transpose(),
            g: Box::new(g),
        });
    }
    Ok(ChenXi {
        xi_tilde,
        gamma,
        rho_hat,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QDiagnostics {
    /// RMS of the regression of `q̂_i(Z)` on `X_b`; zero for a valid `q`.
    pub zero_given_xb: f64,
    /// `‖E_n[q̂(Z) X_aᵀ] − I‖_F`.
    pub identity_gap: f64,
}

/// Sample analogues of `E[q(Z) | X_b] = 0` and `E[q(Z) X_aᵀ] = I`.
pub fn check_q_moments(q_hat: &[FittedFunction], d: &PLDataset, b_class: &FunctionClassSpec) -> Result<QDiagnostics> {
    let d_a = d.d_a();
    if q_hat.len() != d_a {
        return Err(Error::DimensionMismatch {
            context: "q functions",
            expected: d_a,
            actual: q_hat.len(),
        });
    }
    let mut cross = DMatrix::zeros(d_a, d_a);
    let mut fitted_sq = 0.0;
    for (i, q) in q_hat.iter().enumerate() {
        let qv = q.evaluate(&d.z)?;
        let fit = project_values(&qv, &d.x_b, b_class, 1e-8, crate::minimax::DEFAULT_JITTER)?;
        fitted_sq += rms(&fit.evaluate(&d.x_b)?).powi(2);
        for j in 0..d_a {
            cross[(i, j)] = mean(&qv.component_mul(&d.x_a.column(j)));
        }
    }
    let gap = cross - DMatrix::identity(d_a, d_a);
    Ok(QDiagnostics {
        zero_given_xb: (fitted_sq / d_a as f64).sqrt(),
        identity_gap: gap.norm(),
    })
}
