//! Doubly robust estimation of `θ = E[m(W; h)]` with cross-fitted nuisances.
//!
//! The estimating function is `ψ(W; h, q) = m(W; h) + q(T)(g2 − g1·h(S))`.
//! Four estimators are produced from the same fitted nuisances: `dr` (mean of
//! `ψ`), `tmle` (plug-in after a one-dimensional fluctuation `h + ε ξ`),
//! `ipw` (`E_n[q̂(T) g2]`) and `direct` (`E_n[m(W; ĥ)]`).

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DVector;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{mean, rms};
use crate::minimax::{build_test_operator, project_q, OuterQuadratic, PenaltyConfig, PenaltySchedule};
use crate::problem::{residual, MomentProblem};
use crate::spaces::{FittedFunction, FunctionClassSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dr,
    Tmle,
    Ipw,
    Direct,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dr, Method::Tmle, Method::Ipw, Method::Direct];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dr => "dr",
            Method::Tmle => "tmle",
            Method::Ipw => "ipw",
            Method::Direct => "direct",
        }
    }

    /// Methods with a plug-in standard error.
    pub fn has_se(self) -> bool {
        matches!(self, Method::Dr | Method::Tmle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dr" => Ok(Method::Dr),
            "tmle" => Ok(Method::Tmle),
            "ipw" => Ok(Method::Ipw),
            "direct" => Ok(Method::Direct),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

/// Nuisances fitted on one training split.
#[derive(Clone, Debug)]
pub struct FoldArtifacts {
    pub fold: usize,
    pub h: FittedFunction,
    pub xi: FittedFunction,
    pub q: FittedFunction,
    /// TMLE fluctuation, when the tmle step ran.
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub method: Method,
    pub theta: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub alpha: f64,
    pub n: usize,
    pub k_folds: usize,
    pub seed: u64,
    #[serde(skip)]
    pub fold_artifacts: Vec<FoldArtifacts>,
}

impl ThetaEstimate {
    pub fn covers(&self, value: f64) -> Option<bool> {
        self.ci.map(|(lo, hi)| lo <= value && value <= hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// K-fold cross-fitting: every observation is evaluated once.
    Crossfit,
    /// Nuisances fit on one random half, `ψ` averaged on the other.
    SimpleSplit,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossfit" => Ok(SplitMode::Crossfit),
            "simple" | "simple_split" => Ok(SplitMode::SimpleSplit),
            other => Err(Error::InvalidConfig(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossfitConfig {
    pub k_folds: usize,
    pub split_mode: SplitMode,
    pub seed: u64,
    /// Fixed penalties; `None` evaluates `schedule` at each training size.
    pub penalties: Option<PenaltyConfig>,
    pub schedule: PenaltySchedule,
    pub h_class: FunctionClassSpec,
    pub xi_class: FunctionClassSpec,
    pub q_class: FunctionClassSpec,
    /// Class of the `q̂` projection.
    pub q_tilde_class: FunctionClassSpec,
    pub clever_instrument: bool,
    pub alpha: f64,
}

impl Default for CrossfitConfig {
    fn default() -> Self {
        Self {
            k_folds: 5,
            split_mode: SplitMode::Crossfit,
            seed: 0,
            penalties: None,
            schedule: PenaltySchedule::default(),
            h_class: FunctionClassSpec::rkhs_median(),
            xi_class: FunctionClassSpec::rkhs_median(),
            q_class: FunctionClassSpec::rkhs_median(),
            q_tilde_class: FunctionClassSpec::rkhs_median(),
            clever_instrument: false,
            alpha: 0.05,
        }
    }
}

impl CrossfitConfig {
    /// Same class for every nuisance.
    pub fn with_classes(mut self, class: FunctionClassSpec) -> Self {
        self.h_class = class.clone();
        self.xi_class = class.clone();
        self.q_class = class.clone();
        self.q_tilde_class = class;
        self
    }

    pub fn simple_split(mut self) -> Self {
        self.split_mode = SplitMode::SimpleSplit;
        self.k_folds = 2;
        self
    }

    pub fn effective_folds(&self) -> usize {
        match self.split_mode {
            SplitMode::Crossfit => self.k_folds,
            SplitMode::SimpleSplit => 2,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let k = self.effective_folds();
        if k < 2 {
            return Err(Error::InvalidConfig(format!("k_folds must be at least 2, got {k}")));
        }
        if n < 2 * k {
            return Err(Error::InvalidConfig(format!(
                "{k} folds need at least {} observations, got {n}",
                2 * k
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if let Some(p) = &self.penalties {
            p.validate()?;
        }
        self.schedule.validate()?;
        for c in [&self.h_class, &self.xi_class, &self.q_class, &self.q_tilde_class] {
            c.validate()?;
        }
        Ok(())
    }

    pub fn penalties_for(&self, n_train: usize) -> PenaltyConfig {
        self.penalties.unwrap_or_else(|| self.schedule.at(n_train))
    }
}

/// Random partition of `0..n` into `k` folds of near-equal size.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += len;
    }
    out
}

/// `ψ_i = m(W_i; h) + q(T_i)(g2_i − g1_i·h(S_i))` on `rows`.
pub fn psi_values(
    h: &FittedFunction,
    q: &FittedFunction,
    p: &MomentProblem,
    rows: &[usize],
) -> Result<DVector<f64>> {
    let sub = p.subset(rows);
    psi_all(h, q, &sub)
}

fn psi_all(h: &FittedFunction, q: &FittedFunction, p: &MomentProblem) -> Result<DVector<f64>> {
    let d = &p.dataset;
    let direct = p.functional.values(h, d)?;
    let qt = q.evaluate(&d.t)?;
    Ok(direct + qt.component_mul(&residual(h, d)?))
}

/// Standard normal quantile `z_{1−α/2}`.
pub fn normal_quantile(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

/// Cross-fitted variance `σ̂² = (1/K) Σ_k E_{n,k}[(θ̂ − ψ)²]`, `se = σ̂/√n` and
/// the Wald interval `θ̂ ± z·se`.
pub fn variance_and_ci(
    psi_by_fold: &[DVector<f64>],
    theta: f64,
    alpha: f64,
    n: usize,
) -> Result<(f64, (f64, f64))> {
    if n == 0 {
        return Err(Error::InvalidData("variance over zero observations".into()));
    }
    let folds: Vec<&DVector<f64>> = psi_by_fold.iter().filter(|f| !f.is_empty()).collect();
    if folds.is_empty() {
        return Err(Error::InvalidData("no influence values".into()));
    }
    if folds.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidData("non-finite influence values".into()));
    }
    let sigma_sq = folds
        .iter()
        .map(|f| mean(&f.map(|v| (theta - v) * (theta - v))))
        .sum::<f64>()
        / folds.len() as f64;
    let se = (sigma_sq / n as f64).sqrt();
    let z = normal_quantile(alpha);
    Ok((se, (theta - z * se, theta + z * se)))
}

/// One-dimensional targeted fluctuation `h1 = h0 + ε ξ` with `ε` solving
/// `E_n[q(T)(g2 − g1(h0 + ε ξ)(S))] = 0` on `rows`.
pub fn tmle_step(
    h0: &FittedFunction,
    xi: &FittedFunction,
    q: &FittedFunction,
    p: &MomentProblem,
    rows: &[usize],
) -> Result<(f64, FittedFunction)> {
    let sub = p.subset(rows);
    tmle_all(h0, xi, q, &sub)
}

fn tmle_all(
    h0: &FittedFunction,
    xi: &FittedFunction,
    q: &FittedFunction,
    p: &MomentProblem,
) -> Result<(f64, FittedFunction)> {
    let d = &p.dataset;
    let qt = q.evaluate(&d.t)?;
    let g1xi = xi.evaluate(&d.s)?.component_mul(&d.g1);
    let numerator = mean(&qt.component_mul(&residual(h0, d)?));
    let denominator = mean(&qt.component_mul(&g1xi));
    let threshold = 1e-12 * rms(&qt) * rms(&g1xi);
    if !(denominator.abs() > threshold) {
        return Err(Error::IllDefinedCorrection {
            denominator,
            threshold,
        });
    }
    let epsilon = numerator / denominator;
    if epsilon == 0.0 {
        return Ok((0.0, h0.clone()));
    }
    Ok((epsilon, h0.add_scaled(xi, epsilon)?))
}

/// Nuisances fitted on `train`; the clever-instrument constraint (if enabled)
/// is imposed on `eval`.
fn fit_fold(
    train: &MomentProblem,
    eval: &MomentProblem,
    cfg: &CrossfitConfig,
    fold: usize,
) -> Result<FoldArtifacts> {
    let d = &train.dataset;
    let pen = cfg.penalties_for(d.n);
    let omega = build_test_operator(&cfg.q_class, &d.t, pen.gamma_q, pen.jitter_scale)?;
    let quad_h = OuterQuadratic::new(cfg.h_class.basis_on(&d.s)?, d, &omega)?;
    let xi = if cfg.xi_class == cfg.h_class {
        quad_h.fit_xi(&train.functional, d, &pen)?
    } else {
        OuterQuadratic::new(cfg.xi_class.basis_on(&d.s)?, d, &omega)?.fit_xi(&train.functional, d, &pen)?
    };
    let q = project_q(train, &xi, &cfg.q_tilde_class, pen.tilde_gamma_q)?;
    let h = if cfg.clever_instrument {
        quad_h.fit_h_clever(&d.g2, &pen, &q, &eval.dataset)?
    } else {
        quad_h.fit_h(&d.g2, &pen)?
    };
    Ok(FoldArtifacts {
        fold,
        h,
        xi,
        q,
        epsilon: None,
    })
}

/// Per-fold evaluation-sample quantities for every method.
struct FoldValues {
    n: usize,
    psi_dr: DVector<f64>,
    psi_tmle: DVector<f64>,
    tmle_direct: DVector<f64>,
    ipw: DVector<f64>,
    direct: DVector<f64>,
    artifacts: FoldArtifacts,
}

pub(crate) fn split_plan(n: usize, cfg: &CrossfitConfig) -> Vec<(Vec<usize>, Vec<usize>)> {
    let k = cfg.effective_folds();
    let folds = make_folds(n, k, cfg.seed);
    match cfg.split_mode {
        SplitMode::SimpleSplit => vec![(folds[0].clone(), folds[1].clone())],
        SplitMode::Crossfit => (0..k)
            .map(|f| {
                let train: Vec<usize> = folds
                    .iter()
                    .enumerate()
                    .filter(|(g, _)| *g != f)
                    .flat_map(|(_, rows)| rows.iter().copied())
                    .collect();
                let mut train = train;
                train.sort_unstable();
                (train, folds[f].clone())
            })
            .collect(),
    }
}

fn run_folds(p: &MomentProblem, cfg: &CrossfitConfig, with_tmle: bool) -> Result<Vec<FoldValues>> {
    p.dataset.ensure_valid()?;
    cfg.validate(p.n())?;
    let plan = split_plan(p.n(), cfg);
    plan.par_iter()
        .enumerate()
        .map(|(fold, (train_rows, eval_rows))| {
            let train = p.subset(train_rows);
            let eval = p.subset(eval_rows);
            let inner = || -> Result<FoldValues> {
                let mut artifacts = fit_fold(&train, &eval, cfg, fold)?;
                let d = &eval.dataset;
                let direct = eval.functional.values(&artifacts.h, d)?;
                let qt = artifacts.q.evaluate(&d.t)?;
                let psi_dr = &direct + qt.component_mul(&residual(&artifacts.h, d)?);
                let ipw = qt.component_mul(&d.g2);
                let (psi_tmle, tmle_direct) = if with_tmle {
                    let (eps, h1) = tmle_all(&artifacts.h, &artifacts.xi, &artifacts.q, &eval)?;
                    artifacts.epsilon = Some(eps);
                    let m1 = eval.functional.values(&h1, d)?;
                    (&m1 + qt.component_mul(&residual(&h1, d)?), m1)
                } else {
                    (DVector::zeros(0), DVector::zeros(0))
                };
                Ok(FoldValues {
                    n: d.n,
                    psi_dr,
                    psi_tmle,
                    tmle_direct,
                    ipw,
                    direct,
                    artifacts,
                })
            };
            inner().map_err(|e| e.in_fold(fold))
        })
        .collect()
}

fn pooled_mean(parts: &[&DVector<f64>]) -> f64 {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    parts.iter().map(|p| p.sum()).sum::<f64>() / total as f64
}

fn build_estimate(
    method: Method,
    point_parts: &[&DVector<f64>],
    psi_parts: Option<&[&DVector<f64>]>,
    cfg: &CrossfitConfig,
    folds: &[FoldValues],
) -> Result<ThetaEstimate> {
    let theta = pooled_mean(point_parts);
    let n: usize = folds.iter().map(|f| f.n).sum();
    let (se, ci) = match psi_parts {
        Some(parts) => {
            let owned: Vec<DVector<f64>> = parts.iter().map(|p| (*p).clone()).collect();
            let (se, ci) = variance_and_ci(&owned, theta, cfg.alpha, n)?;
            (Some(se), Some(ci))
        }
        None => (None, None),
    };
    Ok(ThetaEstimate {
        method,
        theta,
        se,
        ci,
        alpha: cfg.alpha,
        n,
        k_folds: cfg.effective_folds(),
        seed: cfg.seed,
        fold_artifacts: folds.iter().map(|f| f.artifacts.clone()).collect(),
    })
}

/// Cross-fitted doubly robust estimate.
pub fn crossfit_estimate(p: &MomentProblem, cfg: &CrossfitConfig) -> Result<ThetaEstimate> {
    let folds = run_folds(p, cfg, false)?;
    let psi: Vec<&DVector<f64>> = folds.iter().map(|f| &f.psi_dr).collect();
    build_estimate(Method::Dr, &psi, Some(&psi), cfg, &folds)
}

/// `dr`, `tmle`, `ipw` and `direct` from one set of fitted nuisances.
pub fn estimate_all_methods(
    p: &MomentProblem,
    cfg: &CrossfitConfig,
) -> Result<BTreeMap<Method, ThetaEstimate>> {
    let folds = run_folds(p, cfg, true)?;
    let collect = |f: fn(&FoldValues) -> &DVector<f64>| -> Vec<&DVector<f64>> {
        folds.iter().map(f).collect()
    };
    let dr = collect(|f| &f.psi_dr);
    let tmle_psi = collect(|f| &f.psi_tmle);
    let tmle_point = collect(|f| &f.tmle_direct);
    let ipw = collect(|f| &f.ipw);
    let direct = collect(|f| &f.direct);
    let mut out = BTreeMap::new();
    out.insert(Method::Dr, build_estimate(Method::Dr, &dr, Some(&dr), cfg, &folds)?);
    out.insert(
        Method::Tmle,
        build_estimate(Method::Tmle, &tmle_point, Some(&tmle_psi), cfg, &folds)?,
    );
    out.insert(Method::Ipw, build_estimate(Method::Ipw, &ipw, None, cfg, &folds)?);
    out.insert(Method::Direct, build_estimate(Method::Direct, &direct, None, cfg, &folds)?);
    Ok(out)
}
