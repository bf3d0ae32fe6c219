//! Function classes used by the minimax solvers: polynomial sieves and the
//! Gaussian RKHS.
//!
//! A [`FunctionClassSpec`] is the user-facing description of a class. Fitting
//! code resolves it against data into a [`Basis`] (a finite design whose
//! columns span the searched subspace), and solutions come back as a
//! [`FittedFunction`], which can be evaluated anywhere and carries its class
//! norm.

use nalgebra::{DMatrix, DVector};
use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_helpers;

/// Largest sieve degree accepted; higher powers make Vandermonde blocks useless.
pub const MAX_SIEVE_DEGREE: u32 = 10;

/// Row cap for the median heuristic; larger inputs are subsampled.
pub const MEDIAN_SUBSAMPLE: usize = 2000;
const MEDIAN_SEED: u64 = 0x6d65_6469_616e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionClassSpec {
    LinearSieve {
        degree: u32,
        #[serde(default)]
        intercept: bool,
        #[serde(default)]
        cross_terms: bool,
    },
    GaussianRkhs {
        /// Fixed bandwidth; `None` selects the median heuristic on the fit data.
        #[serde(default)]
        bandwidth: Option<f64>,
    },
}

impl FunctionClassSpec {
    pub fn linear(degree: u32, intercept: bool) -> Self {
        FunctionClassSpec::LinearSieve {
            degree,
            intercept,
            cross_terms: false,
        }
    }

    pub fn rkhs_median() -> Self {
        FunctionClassSpec::GaussianRkhs { bandwidth: None }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            FunctionClassSpec::LinearSieve {
                degree, intercept, ..
            } => {
                if degree > MAX_SIEVE_DEGREE {
                    return Err(Error::InvalidConfig(format!(
                        "sieve degree {degree} exceeds {MAX_SIEVE_DEGREE}"
                    )));
                }
                if degree == 0 && !intercept {
                    return Err(Error::InvalidConfig("empty sieve basis".into()));
                }
                Ok(())
            }
            FunctionClassSpec::GaussianRkhs { bandwidth } => match bandwidth {
                Some(b) if !(b > 0.0 && b.is_finite()) => Err(Error::InvalidConfig(format!(
                    "bandwidth must be positive, got {b}"
                ))),
                _ => Ok(()),
            },
        }
    }

    /// Resolve the class against fit data `x` (rows are observations).
    ///
    /// For the RKHS the anchors are the rows of `x` and a missing bandwidth is
    /// set by the median heuristic on `x`.
    pub fn basis_on(&self, x: &DMatrix<f64>) -> Result<Basis> {
        self.validate()?;
        match *self {
            FunctionClassSpec::LinearSieve {
                degree,
                intercept,
                cross_terms,
            } => Ok(Basis::Sieve(Sieve {
                degree,
                intercept,
                cross_terms,
                input_dim: x.ncols(),
            })),
            FunctionClassSpec::GaussianRkhs { bandwidth } => {
                let bandwidth = match bandwidth {
                    Some(b) => b,
                    None => median_bandwidth(x)?,
                };
                Ok(Basis::Kernel {
                    anchors: x.clone(),
                    bandwidth,
                })
            }
        }
    }
}

/// A resolved polynomial sieve on a fixed input dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sieve {
    pub degree: u32,
    pub intercept: bool,
    #[serde(default)]
    pub cross_terms: bool,
    pub input_dim: usize,
}

impl Sieve {
    /// Exponent vectors of the non-constant monomials, in column order.
    fn exponents(&self) -> Vec<Vec<u32>> {
        let d = self.input_dim;
        let mut out = Vec::new();
        if self.cross_terms {
            for total in 1..=self.degree {
                let mut current = vec![0u32; d];
                push_compositions(total, 0, &mut current, &mut out);
            }
        } else {
            for power in 1..=self.degree {
                for j in 0..d {
                    let mut e = vec![0u32; d];
                    e[j] = power;
                    out.push(e);
                }
            }
        }
        out
    }

    pub fn n_features(&self) -> usize {
        self.exponents().len() + usize::from(self.intercept)
    }

    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if self.degree > MAX_SIEVE_DEGREE {
            return Err(Error::InvalidConfig(format!(
                "sieve degree {} exceeds {MAX_SIEVE_DEGREE}",
                self.degree
            )));
        }
        check_dim("sieve features", self.input_dim, x.ncols())?;
        let exps = self.exponents();
        let offset = usize::from(self.intercept);
        let mut out = DMatrix::zeros(x.nrows(), exps.len() + offset);
        for i in 0..x.nrows() {
            if self.intercept {
                out[(i, 0)] = 1.0;
            }
            for (k, e) in exps.iter().enumerate() {
                let mut v = 1.0;
                for (j, &p) in e.iter().enumerate() {
                    if p > 0 {
                        v *= x[(i, j)].powi(p as i32);
                    }
                }
                out[(i, k + offset)] = v;
            }
        }
        Ok(out)
    }
}

// Enumerate exponent vectors with the given total degree, lexicographically
// from the first coordinate.
fn push_compositions(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    let d = current.len();
    if pos == d - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for p in (0..=remaining).rev() {
        current[pos] = p;
        push_compositions(remaining - p, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// Sieve features for a class spec that must be a `LinearSieve`.
pub fn features(spec: &FunctionClassSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match spec.basis_on(x)? {
        Basis::Sieve(s) => s.features(x),
        _ => Err(Error::InvalidConfig(
            "features() requires a linear sieve class".into(),
        )),
    }
}

pub fn gaussian_gram(x: &DMatrix<f64>, y: &DMatrix<f64>, bandwidth: f64) -> DMatrix<f64> {
    debug_assert_eq!(x.ncols(), y.ncols());
    let scale = -0.5 / (bandwidth * bandwidth);
    let d = x.ncols();
    // Column-major fill; the inner loop walks x rows.
    DMatrix::from_fn(x.nrows(), y.nrows(), |i, j| {
        let mut sq = 0.0;
        for k in 0..d {
            let diff = x[(i, k)] - y[(j, k)];
            sq += diff * diff;
        }
        (scale * sq).exp()
    })
}

/// Gram matrix of a Gaussian RKHS class between `x` and `x2`, resolving a
/// median-heuristic bandwidth on `x`.
pub fn gram(spec: &FunctionClassSpec, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_dim("gram", x.ncols(), x2.ncols())?;
    match *spec {
        FunctionClassSpec::GaussianRkhs { bandwidth } => {
            let bw = match bandwidth {
                Some(b) => b,
                None => median_bandwidth(x)?,
            };
            Ok(gaussian_gram(x, x2, bw))
        }
        _ => Err(Error::InvalidConfig("gram() requires a Gaussian RKHS class".into())),
    }
}

/// Median pairwise Euclidean distance over rows (`i < j`), falling back to 1.0
/// when the median is zero. Inputs above [`MEDIAN_SUBSAMPLE`] rows are
/// subsampled with a fixed seed.
pub fn median_bandwidth(x: &DMatrix<f64>) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "median heuristic needs at least 2 rows, got {n}"
        )));
    }
    let rows: Vec<usize> = if n > MEDIAN_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(MEDIAN_SEED);
        let mut idx = sample(&mut rng, n, MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let m = rows.len();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for a in 0..m {
        for b in (a + 1)..m {
            let (ra, rb) = (rows[a], rows[b]);
            let mut sq = 0.0;
            for k in 0..x.ncols() {
                let diff = x[(ra, k)] - x[(rb, k)];
                sq += diff * diff;
            }
            dists.push(sq.sqrt());
        }
    }
    dists.sort_unstable_by(f64::total_cmp);
    let len = dists.len();
    let median = if len % 2 == 1 {
        dists[len / 2]
    } else {
        0.5 * (dists[len / 2 - 1] + dists[len / 2])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// A finite design spanning the searched subspace of a class.
#[derive(Clone, Debug)]
pub enum Basis {
    Sieve(Sieve),
    Kernel {
        anchors: DMatrix<f64>,
        bandwidth: f64,
    },
    /// Partially linear design on inputs `[x_a | x_b]`: the first `d_a` inputs
    /// enter linearly, `g` acts on the remaining ones.
    PartiallyLinear { d_a: usize, g: Box<Basis> },
}

impl Basis {
    pub fn input_dim(&self) -> usize {
        match self {
            Basis::Sieve(s) => s.input_dim,
            Basis::Kernel { anchors, .. } => anchors.ncols(),
            Basis::PartiallyLinear { d_a, g } => d_a + g.input_dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Basis::Sieve(s) => s.n_features(),
            Basis::Kernel { anchors, .. } => anchors.nrows(),
            Basis::PartiallyLinear { d_a, g } => d_a + g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Design matrix: entry `(i, j)` is basis function `j` at row `i` of `x`.
    pub fn design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("basis design", self.input_dim(), x.ncols())?;
        match self {
            Basis::Sieve(s) => s.features(x),
            Basis::Kernel { anchors, bandwidth } => Ok(gaussian_gram(x, anchors, *bandwidth)),
            Basis::PartiallyLinear { d_a, g } => {
                let xa = x.columns(0, *d_a).into_owned();
                let xb = x.columns(*d_a, x.ncols() - d_a).into_owned();
                Ok(crate::linalg::hstack(&xa, &g.design(&xb)?))
            }
        }
    }

    /// Gram matrix of the class norm in coefficient space.
    ///
    /// The linear block of a partially linear basis is left unpenalized (zero).
    pub fn norm_gram(&self) -> DMatrix<f64> {
        match self {
            Basis::Sieve(s) => DMatrix::identity(s.n_features(), s.n_features()),
            Basis::Kernel { anchors, bandwidth } => gaussian_gram(anchors, anchors, *bandwidth),
            Basis::PartiallyLinear { d_a, g } => {
                let p = self.len();
                let mut out = DMatrix::zeros(p, p);
                let inner = g.norm_gram();
                out.view_mut((*d_a, *d_a), inner.shape()).copy_from(&inner);
                out
            }
        }
    }

    pub fn to_function(&self, coefficients: &DVector<f64>) -> Result<FittedFunction> {
        check_dim("basis coefficients", self.len(), coefficients.len())?;
        Ok(match self {
            Basis::Sieve(s) => FittedFunction::Features {
                sieve: s.clone(),
                weights: coefficients.clone(),
            },
            Basis::Kernel { anchors, bandwidth } => FittedFunction::KernelExpansion {
                bandwidth: *bandwidth,
                anchors: anchors.clone(),
                coefficients: coefficients.clone(),
            },
            Basis::PartiallyLinear { d_a, g } => FittedFunction::PartiallyLinear {
                theta: coefficients.rows(0, *d_a).into_owned(),
                g: Box::new(g.to_function(&coefficients.rows(*d_a, g.len()).into_owned())?),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumTerm {
    pub weight: f64,
    pub function: FittedFunction,
}

/// A fitted element of a function class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedFunction {
    Features {
        sieve: Sieve,
        #[serde(with = "serde_helpers::vector")]
        weights: DVector<f64>,
    },
    KernelExpansion {
        bandwidth: f64,
        #[serde(with = "serde_helpers::rows")]
        anchors: DMatrix<f64>,
        #[serde(with = "serde_helpers::vector")]
        coefficients: DVector<f64>,
    },
    /// `θᵀx_a + g(x_b)` on inputs `[x_a | x_b]`.
    PartiallyLinear {
        #[serde(with = "serde_helpers::vector")]
        theta: DVector<f64>,
        g: Box<FittedFunction>,
    },
    /// Weighted sum of functions that could not be merged into one class.
    Sum { terms: Vec<SumTerm> },
}

impl FittedFunction {
    /// The zero function on `input_dim` inputs.
    pub fn zero(input_dim: usize) -> Self {
        FittedFunction::Features {
            sieve: Sieve {
                degree: 0,
                intercept: true,
                cross_terms: false,
                input_dim,
            },
            weights: DVector::zeros(1),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FittedFunction::Features { sieve, .. } => sieve.input_dim,
            FittedFunction::KernelExpansion { anchors, .. } => anchors.ncols(),
            FittedFunction::PartiallyLinear { theta, g } => theta.len() + g.input_dim(),
            FittedFunction::Sum { terms } => terms.first().map_or(0, |t| t.function.input_dim()),
        }
    }

    pub fn evaluate(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_dim("evaluate", self.input_dim(), x.ncols())?;
        match self {
            FittedFunction::Features { sieve, weights } => Ok(sieve.features(x)? * weights),
            FittedFunction::KernelExpansion {
                bandwidth,
                anchors,
                coefficients,
            } => Ok(gaussian_gram(x, anchors, *bandwidth) * coefficients),
            FittedFunction::PartiallyLinear { theta, g } => {
                let d_a = theta.len();
                let xa = x.columns(0, d_a);
                let xb = x.columns(d_a, x.ncols() - d_a).into_owned();
                Ok(xa * theta + g.evaluate(&xb)?)
            }
            FittedFunction::Sum { terms } => {
                let mut out = DVector::zeros(x.nrows());
                for t in terms {
                    out += t.function.evaluate(x)? * t.weight;
                }
                Ok(out)
            }
        }
    }

    /// Squared class norm. Sums use the direct-sum norm `Σ w²‖f‖²`.
    pub fn class_norm_sq(&self) -> f64 {
        match self {
            FittedFunction::Features { weights, .. } => weights.norm_squared(),
            FittedFunction::KernelExpansion {
                bandwidth,
                anchors,
                coefficients,
            } => {
                let k = gaussian_gram(anchors, anchors, *bandwidth);
                coefficients.dot(&(k * coefficients)).max(0.0)
            }
            FittedFunction::PartiallyLinear { theta, g } => theta.norm_squared() + g.class_norm_sq(),
            FittedFunction::Sum { terms } => terms
                .iter()
                .map(|t| t.weight * t.weight * t.function.class_norm_sq())
                .sum(),
        }
    }

    pub fn scaled(&self, c: f64) -> FittedFunction {
        match self {
            FittedFunction::Features { sieve, weights } => FittedFunction::Features {
                sieve: sieve.clone(),
                weights: weights * c,
            },
            FittedFunction::KernelExpansion {
                bandwidth,
                anchors,
                coefficients,
            } => FittedFunction::KernelExpansion {
                bandwidth: *bandwidth,
                anchors: anchors.clone(),
                coefficients: coefficients * c,
            },
            FittedFunction::PartiallyLinear { theta, g } => FittedFunction::PartiallyLinear {
                theta: theta * c,
                g: Box::new(g.scaled(c)),
            },
            FittedFunction::Sum { terms } => FittedFunction::Sum {
                terms: terms
                    .iter()
                    .map(|t| SumTerm {
                        weight: t.weight * c,
                        function: t.function.clone(),
                    })
                    .collect(),
            },
        }
    }

    /// `self + c·other`, staying inside one class whenever the representations
    /// are compatible.
    pub fn add_scaled(&self, other: &FittedFunction, c: f64) -> Result<FittedFunction> {
        check_dim("add_scaled", self.input_dim(), other.input_dim())?;
        use FittedFunction::*;
        Ok(match (self, other) {
            (
                Features { sieve, weights },
                Features {
                    sieve: s2,
                    weights: w2,
                },
            ) if sieve == s2 => Features {
                sieve: sieve.clone(),
                weights: weights + w2 * c,
            },
            (
                KernelExpansion {
                    bandwidth,
                    anchors,
                    coefficients,
                },
                KernelExpansion {
                    bandwidth: b2,
                    anchors: a2,
                    coefficients: c2,
                },
            ) if bandwidth == b2 => {
                if anchors == a2 {
                    KernelExpansion {
                        bandwidth: *bandwidth,
                        anchors: anchors.clone(),
                        coefficients: coefficients + c2 * c,
                    }
                } else {
                    let mut merged = DMatrix::zeros(anchors.nrows() + a2.nrows(), anchors.ncols());
                    merged.rows_mut(0, anchors.nrows()).copy_from(anchors);
                    merged.rows_mut(anchors.nrows(), a2.nrows()).copy_from(a2);
                    let mut coef = DVector::zeros(coefficients.len() + c2.len());
                    coef.rows_mut(0, coefficients.len()).copy_from(coefficients);
                    coef.rows_mut(coefficients.len(), c2.len()).copy_from(&(c2 * c));
                    KernelExpansion {
                        bandwidth: *bandwidth,
                        anchors: merged,
                        coefficients: coef,
                    }
                }
            }
            (PartiallyLinear { theta, g }, PartiallyLinear { theta: t2, g: g2 })
                if theta.len() == t2.len() =>
            {
                PartiallyLinear {
                    theta: theta + t2 * c,
                    g: Box::new(g.add_scaled(g2, c)?),
                }
            }
            _ => {
                let mut terms = match self {
                    Sum { terms } => terms.clone(),
                    f => vec![SumTerm {
                        weight: 1.0,
                        function: f.clone(),
                    }],
                };
                terms.push(SumTerm {
                    weight: c,
                    function: other.clone(),
                });
                Sum { terms }
            }
        })
    }

    pub fn coefficients_finite(&self) -> bool {
        match self {
            FittedFunction::Features { weights, .. } => weights.iter().all(|v| v.is_finite()),
            FittedFunction::KernelExpansion {
                coefficients,
                anchors,
                bandwidth,
            } => {
                bandwidth.is_finite()
                    && coefficients.iter().all(|v| v.is_finite())
                    && anchors.iter().all(|v| v.is_finite())
            }
            FittedFunction::PartiallyLinear { theta, g } => {
                theta.iter().all(|v| v.is_finite()) && g.coefficients_finite()
            }
            FittedFunction::Sum { terms } => terms
                .iter()
                .all(|t| t.weight.is_finite() && t.function.coefficients_finite()),
        }
    }
}

/// Anything that maps a block of input points to one or more output columns.
///
/// Linear functionals act on this interface, so they can be applied to a
/// single fitted function or to a whole basis at once.
pub trait PointEval {
    fn input_dim(&self) -> usize;
    /// `(points × outputs)` matrix of values.
    fn eval_points(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

impl PointEval for FittedFunction {
    fn input_dim(&self) -> usize {
        FittedFunction::input_dim(self)
    }

    fn eval_points(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let v = self.evaluate(x)?;
        Ok(DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
    }
}

impl PointEval for Basis {
    fn input_dim(&self) -> usize {
        Basis::input_dim(self)
    }

    fn eval_points(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.design(x)
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn sieve_monomials() {
        let f = features(&FunctionClassSpec::linear(2, true), &col(&[2.0])).unwrap();
        assert_eq!(f.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 4.0]);

        let x = DMatrix::from_row_slice(1, 2, &[3.0, -1.0]);
        let f = features(&FunctionClassSpec::linear(1, false), &x).unwrap();
        assert_eq!(f.row(0).iter().copied().collect::<Vec<_>>(), vec![3.0, -1.0]);

        let f = features(&FunctionClassSpec::linear(0, true), &col(&[1.0, 5.0, -2.0])).unwrap();
        assert_eq!(f.ncols(), 1);
        assert!(f.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sieve_degree_guard() {
        let err = features(&FunctionClassSpec::linear(11, true), &col(&[1.0]));
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn sieve_cross_terms_count() {
        let spec = FunctionClassSpec::LinearSieve {
            degree: 2,
            intercept: true,
            cross_terms: true,
        };
        let x = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let f = features(&spec, &x).unwrap();
        // 1, x, y, x², xy, y²
        assert_eq!(f.ncols(), 6);
        let mut vals: Vec<f64> = f.row(0).iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn gram_examples() {
        let spec = FunctionClassSpec::GaussianRkhs { bandwidth: Some(0.7) };
        let x = col(&[0.3]);
        let g = gram(&spec, &x, &x).unwrap();
        assert_eq!(g[(0, 0)], 1.0);

        let bw = 0.7;
        let x = col(&[0.0, bw * 2f64.sqrt()]);
        let g = gram(&spec, &x, &x).unwrap();
        assert!((g[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert!((g[(0, 1)] - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_bandwidth(&col(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(median_bandwidth(&col(&[0.0, 1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(median_bandwidth(&col(&[0.0, 0.0, 0.0])).unwrap(), 1.0);
        assert!(median_bandwidth(&col(&[0.0])).is_err());
    }

    #[test]
    fn median_subsample_is_reproducible() {
        let x = DMatrix::from_fn(2500, 1, |i, _| ((i * 7919) % 2503) as f64 / 100.0);
        let a = median_bandwidth(&x).unwrap();
        let b = median_bandwidth(&x).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn evaluate_examples() {
        let basis = FunctionClassSpec::linear(1, true).basis_on(&col(&[0.0])).unwrap();
        let zero = basis.to_function(&DVector::zeros(2)).unwrap();
        assert_eq!(zero.evaluate(&col(&[1.0, 2.0])).unwrap(), DVector::zeros(2));

        let f = basis.to_function(&DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(f.evaluate(&col(&[5.0])).unwrap()[0], 5.0);

        let k = FittedFunction::KernelExpansion {
            bandwidth: 1.3,
            anchors: col(&[0.4]),
            coefficients: DVector::from_vec(vec![2.5]),
        };
        assert!((k.evaluate(&col(&[0.4])).unwrap()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn evaluate_dimension_mismatch() {
        let f = FittedFunction::zero(2);
        assert!(matches!(
            f.evaluate(&col(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn class_norm_examples() {
        let sieve = Sieve {
            degree: 1,
            intercept: true,
            cross_terms: false,
            input_dim: 1,
        };
        let f = FittedFunction::Features {
            sieve: sieve.clone(),
            weights: DVector::from_vec(vec![3.0, 4.0]),
        };
        assert_eq!(f.class_norm_sq(), 25.0);
        let z = FittedFunction::Features {
            sieve,
            weights: DVector::zeros(2),
        };
        assert_eq!(z.class_norm_sq(), 0.0);
        let k = FittedFunction::KernelExpansion {
            bandwidth: 1.0,
            anchors: col(&[0.0]),
            coefficients: DVector::from_vec(vec![2.0]),
        };
        assert_eq!(k.class_norm_sq(), 4.0);
    }

    #[test]
    fn add_scaled_merges_kernels_with_distinct_anchors() {
        let a = FittedFunction::KernelExpansion {
            bandwidth: 1.0,
            anchors: col(&[0.0]),
            coefficients: DVector::from_vec(vec![1.0]),
        };
        let b = FittedFunction::KernelExpansion {
            bandwidth: 1.0,
            anchors: col(&[1.0]),
            coefficients: DVector::from_vec(vec![2.0]),
        };
        let s = a.add_scaled(&b, 0.5).unwrap();
        assert!(matches!(s, FittedFunction::KernelExpansion { .. }));
        let x = col(&[0.3, -0.2]);
        let want = a.evaluate(&x).unwrap() + b.evaluate(&x).unwrap() * 0.5;
        assert!((s.evaluate(&x).unwrap() - want).norm() < 1e-14);
    }

    #[test]
    fn add_scaled_mixed_classes_falls_back_to_sum() {
        let a = FittedFunction::zero(1);
        let b = FittedFunction::KernelExpansion {
            bandwidth: 1.0,
            anchors: col(&[1.0]),
            coefficients: DVector::from_vec(vec![2.0]),
        };
        let s = a.add_scaled(&b, -1.0).unwrap();
        assert!(matches!(s, FittedFunction::Sum { .. }));
        let x = col(&[1.0]);
        assert!((s.evaluate(&x).unwrap()[0] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn json_roundtrip_kernel_expansion() {
        let k = FittedFunction::KernelExpansion {
            bandwidth: 0.9,
            anchors: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 3.0]),
            coefficients: DVector::from_vec(vec![1.5, -0.5]),
        };
        let json = serde_json::to_string(&k).unwrap();
        assert!(json.contains("\"kind\":\"kernel_expansion\""));
        let back: FittedFunction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, k);
    }
}
