//! Simulation designs with known ground truth.
//!
//! The NPIV design draws `T ~ N(0, σ_T²)`, `U ~ N(0, σ_U²)`,
//! `S = ρT + (1 − ρ)U + ζ` and `y = h0(S) + U + ν`. `T` is the instrument, `U`
//! confounds `S` and `y`. The target is the average finite difference
//! `E[(h0(S + ε) − h0(S − ε)) / (2ε)]`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::IdentityCheck;
use crate::partially_linear::PLDataset;
use crate::problem::{Dataset, FunctionalSpec, MomentProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum H0Kind {
    #[serde(rename = "abs")]
    Abs,
    #[serde(rename = "2dpoly", alias = "twodpoly")]
    TwoDPoly,
    #[serde(rename = "sigmoid")]
    Sigmoid,
    #[serde(rename = "sin")]
    Sin,
    /// `h0(s) = s`; the target is exactly 1.
    #[serde(rename = "linear")]
    Linear,
}

impl H0Kind {
    pub fn name(self) -> &'static str {
        match self {
            H0Kind::Abs => "abs",
            H0Kind::TwoDPoly => "2dpoly",
            H0Kind::Sigmoid => "sigmoid",
            H0Kind::Sin => "sin",
            H0Kind::Linear => "linear",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            H0Kind::Abs => "|s|",
            H0Kind::TwoDPoly => "-1.5*s + 0.9*s^2",
            H0Kind::Sigmoid => "2/(1+exp(-2*s))",
            H0Kind::Sin => "sin(s)",
            H0Kind::Linear => "s",
        }
    }
}

impl fmt::Display for H0Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for H0Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "abs" => H0Kind::Abs,
            "2dpoly" | "twodpoly" => H0Kind::TwoDPoly,
            "sigmoid" => H0Kind::Sigmoid,
            "sin" => H0Kind::Sin,
            "linear" => H0Kind::Linear,
            other => return Err(Error::InvalidConfig(format!("unknown h0 kind `{other}`"))),
        })
    }
}

pub fn h0_eval(kind: H0Kind, s: f64) -> f64 {
    match kind {
        H0Kind::Abs => s.abs(),
        H0Kind::TwoDPoly => -1.5 * s + 0.9 * s * s,
        H0Kind::Sigmoid => 2.0 / (1.0 + (-2.0 * s).exp()),
        H0Kind::Sin => s.sin(),
        H0Kind::Linear => s,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub rho: f64,
    pub sigma_t: f64,
    pub sigma_u: f64,
    pub zeta_sd: f64,
    pub nu_sd: f64,
    pub h0_kind: H0Kind,
    pub eps: f64,
    pub n: usize,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(h0_kind: H0Kind, n: usize, rho: f64, seed: u64) -> Self {
        Self {
            rho,
            sigma_t: 2.0,
            sigma_u: 2.0,
            zeta_sd: 0.1,
            nu_sd: 0.1,
            h0_kind,
            eps: 0.1,
            n,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        for (name, v) in [
            ("sigma_t", self.sigma_t),
            ("sigma_u", self.sigma_u),
            ("zeta_sd", self.zeta_sd),
            ("nu_sd", self.nu_sd),
            ("eps", self.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn var_s(&self) -> f64 {
        let r = self.rho;
        r * r * self.sigma_t.powi(2) + (1.0 - r).powi(2) * self.sigma_u.powi(2) + self.zeta_sd.powi(2)
    }

    pub fn functional(&self) -> FunctionalSpec {
        FunctionalSpec::average_finite_difference(self.eps)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One draw of the design: `s = S`, `t = T`, `g1 ≡ 1`, `g2 = y`.
pub fn sample(cfg: &DgpConfig) -> Result<MomentProblem> {
    cfg.validate()?;
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = DMatrix::zeros(n, 1);
    let mut t = DMatrix::zeros(n, 1);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let ti = cfg.sigma_t * normal(&mut rng);
        let ui = cfg.sigma_u * normal(&mut rng);
        let si = cfg.rho * ti + (1.0 - cfg.rho) * ui + cfg.zeta_sd * normal(&mut rng);
        s[(i, 0)] = si;
        t[(i, 0)] = ti;
        y[i] = h0_eval(cfg.h0_kind, si) + ui + cfg.nu_sd * normal(&mut rng);
    }
    MomentProblem::new(Dataset::new(s, t, DVector::from_element(n, 1.0), y), cfg.functional())
}

/// Exogenous variant: `T = S` with the same marginal for `S`.
pub fn sample_exogenous(cfg: &DgpConfig) -> Result<MomentProblem> {
    let mut p = sample(cfg)?;
    p.dataset.t = p.dataset.s.clone();
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTheta {
    pub value: f64,
    pub mc_se: f64,
}

/// Monte Carlo value of the target over `n_mc` fresh draws of `S`.
pub fn oracle_theta(cfg: &DgpConfig, n_mc: usize, seed: u64) -> Result<OracleTheta> {
    cfg.validate()?;
    if n_mc == 0 {
        return Err(Error::InvalidConfig("n_mc must be positive".into()));
    }
    let sd = cfg.var_s().sqrt();
    let eps = cfg.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_mc {
        let s = sd * normal(&mut rng);
        let v = (h0_eval(cfg.h0_kind, s + eps) - h0_eval(cfg.h0_kind, s - eps)) / (2.0 * eps);
        sum += v;
        sum_sq += v * v;
    }
    let m = n_mc as f64;
    let mean = sum / m;
    let var = (sum_sq / m - mean * mean).max(0.0);
    Ok(OracleTheta {
        value: mean,
        mc_se: (var / m).sqrt(),
    })
}

/// Closed-form slopes of the nuisances in the design.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleNuisances {
    /// Riesz representer `a₀(s) = s / Var(S)`.
    pub a0_slope: f64,
    /// `q₀(t) = t / (ρ σ_T²)`.
    pub q0_slope: f64,
    /// `ξ₀(s) = s / (ρ² σ_T²)`.
    pub xi0_slope: f64,
    pub var_s: f64,
}

pub fn oracle_nuisances(cfg: &DgpConfig) -> Result<OracleNuisances> {
    cfg.validate()?;
    let st2 = cfg.sigma_t * cfg.sigma_t;
    let var_s = cfg.var_s();
    Ok(OracleNuisances {
        a0_slope: 1.0 / var_s,
        q0_slope: 1.0 / (cfg.rho * st2),
        xi0_slope: 1.0 / (cfg.rho * cfg.rho * st2),
        var_s,
    })
}

/// Just-identified IV slope `Σ T y / Σ T S` (no intercept).
pub fn tsls(d: &Dataset) -> Result<f64> {
    let t = d.t.column(0);
    let den = t.dot(&d.s.column(0));
    if den == 0.0 {
        return Err(Error::Singular("instrument orthogonal to regressor"));
    }
    Ok(t.dot(&d.g2) / den)
}

/// Empirical checks that the closed-form slopes solve their defining moment
/// conditions: `E[S/Var(S) − q₀(T) | S] = 0` and `E[q₀(T) − ξ₀(S) | T] = 0`,
/// each measured as a least-squares slope on one large draw per `ρ`.
pub fn oracle_slope_checks(n: usize, seed: u64) -> Result<Vec<IdentityCheck>> {
    let mut out = Vec::new();
    for rho in [0.5, 0.7] {
        let cfg = DgpConfig::new(H0Kind::Sin, n, rho, seed);
        let o = oracle_nuisances(&cfg)?;
        let d = sample(&cfg)?.dataset;
        let s = d.s.column(0);
        let t = d.t.column(0);
        let u = s / o.var_s - t * o.q0_slope;
        out.push(IdentityCheck {
            name: format!("riesz_q0_moment_rho{rho}"),
            max_error: (u.dot(&s) / s.dot(&s)).abs(),
            tolerance: 0.01,
        });
        let v = t * o.q0_slope - s * o.xi0_slope;
        out.push(IdentityCheck {
            name: format!("q0_xi0_moment_rho{rho}"),
            max_error: (v.dot(&t) / t.dot(&t)).abs(),
            tolerance: 0.01,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlNonlinearity {
    Zero,
    Linear,
    Sin,
}

impl PlNonlinearity {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            PlNonlinearity::Zero => 0.0,
            PlNonlinearity::Linear => 0.8 * x,
            PlNonlinearity::Sin => x.sin(),
        }
    }
}

/// Gaussian partially linear IV design with one nonparametric coordinate.
///
/// `X_b ~ N(0,1)`, `Z_a ~ N(0, I)`, confounder `C ~ N(0,1)`,
/// `X_a,j = π Z_a,j + 0.5 X_b + κ C + 0.5 e_j`, instruments `Z = [Z_a | X_b]`,
/// `Y = θ*ᵀX_a + g*(X_b) + C + σ_y ν`. Then `E[X_a | Z] = π Z_a + 0.5 X_b`,
/// `ρ₀(X_b) = 0.5 X_b`, `Γ = π² I` and `q₀(Z) = Z_a / π`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlDgpConfig {
    pub n: usize,
    pub seed: u64,
    pub theta_star: Vec<f64>,
    pub instrument_strength: f64,
    pub confounding: f64,
    pub nonlinearity: PlNonlinearity,
    pub noise_sd: f64,
}

impl PlDgpConfig {
    pub fn new(n: usize, seed: u64, theta_star: Vec<f64>, instrument_strength: f64) -> Self {
        Self {
            n,
            seed,
            theta_star,
            instrument_strength,
            confounding: 0.5,
            nonlinearity: PlNonlinearity::Sin,
            noise_sd: 0.5,
        }
    }

    pub fn d_a(&self) -> usize {
        self.theta_star.len()
    }

    /// `Γ = Var(E[X_a − ρ₀(X_b) | Z]) = π² I`.
    pub fn analytic_gamma(&self) -> DMatrix<f64> {
        DMatrix::identity(self.d_a(), self.d_a()) * self.instrument_strength.powi(2)
    }

    /// `q₀(Z)` evaluated on instrument rows `[Z_a | X_b]`.
    pub fn analytic_q0(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        z.columns(0, self.d_a()).into_owned() / self.instrument_strength
    }
}

pub fn pl_sample(cfg: &PlDgpConfig) -> Result<PLDataset> {
    let d_a = cfg.d_a();
    if d_a == 0 {
        return Err(Error::InvalidConfig("theta_star must be nonempty".into()));
    }
    if !(cfg.instrument_strength > 0.0 && cfg.instrument_strength <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "instrument_strength must be in (0, 1], got {}",
            cfg.instrument_strength
        )));
    }
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x_a = DMatrix::zeros(n, d_a);
    let mut x_b = DMatrix::zeros(n, 1);
    let mut z = DMatrix::zeros(n, d_a + 1);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let xb = normal(&mut rng);
        let c = normal(&mut rng);
        x_b[(i, 0)] = xb;
        z[(i, d_a)] = xb;
        let mut yi = cfg.nonlinearity.eval(xb) + c + cfg.noise_sd * normal(&mut rng);
        for j in 0..d_a {
            let za = normal(&mut rng);
            let xa = cfg.instrument_strength * za + 0.5 * xb + cfg.confounding * c + 0.5 * normal(&mut rng);
            z[(i, j)] = za;
            x_a[(i, j)] = xa;
            yi += cfg.theta_star[j] * xa;
        }
        y[i] = yi;
    }
    PLDataset::new(x_a, x_b, z, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mean;

    #[test]
    fn h0_examples() {
        assert_eq!(h0_eval(H0Kind::Abs, -3.0), 3.0);
        assert_eq!(h0_eval(H0Kind::Sin, 0.0), 0.0);
        assert!((h0_eval(H0Kind::TwoDPoly, 1.0) + 0.6).abs() < 1e-15);
        assert_eq!(h0_eval(H0Kind::Sigmoid, 0.0), 1.0);
        for k in [H0Kind::Abs, H0Kind::TwoDPoly, H0Kind::Sigmoid, H0Kind::Sin, H0Kind::Linear] {
            assert_eq!(k.name().parse::<H0Kind>().unwrap(), k);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = DgpConfig::new(H0Kind::Sin, 100, 0.5, 9);
        assert_eq!(sample(&cfg).unwrap().dataset, sample(&cfg).unwrap().dataset);
    }

    #[test]
    fn sample_moments() {
        let cfg = DgpConfig::new(H0Kind::Sin, 1_000_000, 0.5, 1);
        let d = sample(&cfg).unwrap().dataset;
        let s = d.s.column(0).into_owned();
        let t = d.t.column(0).into_owned();
        let var_s = s.map(|v| v * v).mean() - s.mean().powi(2);
        assert!((var_s / 2.01 - 1.0).abs() < 0.01);
        let var_t = t.map(|v| v * v).mean() - t.mean().powi(2);
        assert!((var_t / 4.0 - 1.0).abs() < 0.01);
        let cov = s.dot(&t) / s.len() as f64 - s.mean() * t.mean();
        assert!((cov / var_t / 0.5 - 1.0).abs() < 0.01);
    }

    #[test]
    fn nuisance_slopes() {
        let o = oracle_nuisances(&DgpConfig::new(H0Kind::Sin, 10, 0.5, 0)).unwrap();
        assert!((o.q0_slope - 0.5).abs() < 1e-15);
        assert!((o.xi0_slope - 1.0).abs() < 1e-15);
        assert!((o.var_s - 2.01).abs() < 1e-12);
        assert!((o.a0_slope - 0.49751).abs() < 1e-5);
        let o = oracle_nuisances(&DgpConfig::new(H0Kind::Sin, 10, 0.7, 0)).unwrap();
        assert!((o.q0_slope - 0.35714).abs() < 1e-5);
        assert!((o.xi0_slope - 0.51020).abs() < 1e-5);
    }

    #[test]
    fn oracle_theta_linear_and_sin() {
        let cfg = DgpConfig::new(H0Kind::Linear, 10, 0.5, 0);
        let th = oracle_theta(&cfg, 10_000, 1).unwrap();
        assert!((th.value - 1.0).abs() < 1e-12);

        let cfg = DgpConfig::new(H0Kind::Sin, 10, 0.5, 0);
        let th = oracle_theta(&cfg, 1_000_000, 2).unwrap();
        let exact = (-cfg.var_s() / 2.0).exp() * cfg.eps.sin() / cfg.eps;
        assert!((th.value - exact).abs() < 3.0 * th.mc_se, "{} vs {exact}", th.value);
    }

    #[test]
    fn oracle_theta_abs_self_consistent() {
        let cfg = DgpConfig::new(H0Kind::Abs, 10, 0.7, 0);
        let small = oracle_theta(&cfg, 200_000, 3).unwrap();
        let large = oracle_theta(&cfg, 2_000_000, 4).unwrap();
        let se = (small.mc_se.powi(2) + large.mc_se.powi(2)).sqrt();
        assert!((small.value - large.value).abs() < 3.0 * se);
        // The finite difference of |s| is odd in s.
        assert!(large.value.abs() < 3.0 * large.mc_se);
    }

    #[test]
    fn tsls_examples() {
        let s = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let t = DMatrix::from_column_slice(3, 1, &[0.3, -1.0, 2.0]);
        let y = s.column(0) * 2.0;
        let d = Dataset::new(s, t, DVector::from_element(3, 1.0), y);
        assert!((tsls(&d).unwrap() - 2.0).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200_000;
        let t = DMatrix::from_fn(n, 1, |_, _| normal(&mut rng));
        let s = DMatrix::from_fn(n, 1, |i, _| t[(i, 0)] + normal(&mut rng));
        let y = DVector::from_fn(n, |_, _| normal(&mut rng));
        let d = Dataset::new(s, t, DVector::from_element(n, 1.0), y);
        assert!(tsls(&d).unwrap().abs() < 0.02);
    }

    #[test]
    fn moment_conditions_of_oracle_slopes() {
        for check in oracle_slope_checks(1_000_000, 5).unwrap() {
            assert!(check.passed(), "{}: {}", check.name, check.max_error);
        }
    }

    #[test]
    fn pl_sample_structure() {
        let cfg = PlDgpConfig {
            nonlinearity: PlNonlinearity::Linear,
            ..PlDgpConfig::new(1_000_000, 3, vec![1.0], 0.8)
        };
        let d = pl_sample(&cfg).unwrap();
        assert_eq!(d, pl_sample(&cfg).unwrap());
        // E[X_a − ρ₀(X_b) | Z] = π Z_a, so Γ̂ = E_n[(π Z_a)²].
        let za = d.z.column(0);
        let fitted = za * cfg.instrument_strength;
        let gamma_hat = mean(&fitted.component_mul(&fitted));
        assert!((gamma_hat / cfg.analytic_gamma()[(0, 0)] - 1.0).abs() < 0.01);
        // Prop-2 moments of the analytic q₀.
        let q0 = cfg.analytic_q0(&d.z);
        let qx = q0.column(0).dot(&d.x_a.column(0)) / d.n as f64;
        assert!((qx - 1.0).abs() < 0.01);
        let qb = q0.column(0).dot(&d.x_b.column(0)) / d.n as f64;
        assert!(qb.abs() < 0.01);
    }
}
