//! The estimation problem: data blocks, the conditional moment restriction
//! `E[g1(W) h(S) | T] = E[g2(W) | T]`, and the target linear functional
//! `θ = E[m(W; h)]`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean, select_entries, select_rows};
use crate::spaces::{FittedFunction, PointEval};

/// Observations of `W` split into the blocks the moment restriction uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    /// `n × d_s` realizations of `S`.
    pub s: DMatrix<f64>,
    /// `n × d_t` realizations of `T`.
    pub t: DMatrix<f64>,
    pub g1: DVector<f64>,
    pub g2: DVector<f64>,
    /// Extra columns only the functional needs.
    pub aux: BTreeMap<String, DVector<f64>>,
}

impl Dataset {
    /// Builds a dataset with `n` taken from `s`. Use [`validate_dataset`] to
    /// check the remaining blocks.
    pub fn new(s: DMatrix<f64>, t: DMatrix<f64>, g1: DVector<f64>, g2: DVector<f64>) -> Self {
        Self {
            n: s.nrows(),
            s,
            t,
            g1,
            g2,
            aux: BTreeMap::new(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            n: rows.len(),
            s: select_rows(&self.s, rows),
            t: select_rows(&self.t, rows),
            g1: select_entries(&self.g1, rows),
            g2: select_entries(&self.g2, rows),
            aux: self
                .aux
                .iter()
                .map(|(k, v)| (k.clone(), select_entries(v, rows)))
                .collect(),
        }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = validate_dataset(self);
        if violations.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
            Err(Error::InvalidData(msgs.join("; ")))
        }
    }

    /// Load from a headed CSV file using a column-role mapping.
    pub fn from_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let index_of = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::InvalidData(format!("column `{name}` not found in CSV header")))
        };
        let s_idx: Vec<usize> = roles.s.iter().map(|c| index_of(c)).collect::<Result<_>>()?;
        let t_idx: Vec<usize> = roles.t.iter().map(|c| index_of(c)).collect::<Result<_>>()?;
        let g1_idx = roles.g1.as_deref().map(index_of).transpose()?;
        let g2_idx = index_of(&roles.g2)?;
        let aux_idx: Vec<usize> = roles.aux.iter().map(|c| index_of(c)).collect::<Result<_>>()?;

        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let parsed = record
                .iter()
                .map(|field| {
                    field.trim().parse::<f64>().map_err(|_| {
                        Error::InvalidData(format!(
                            "row {}: `{field}` is not a decimal number",
                            line + 1
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(parsed);
        }
        let n = rows.len();
        let block = |idx: &[usize]| DMatrix::from_fn(n, idx.len(), |i, j| rows[i][idx[j]]);
        let column = |j: usize| DVector::from_fn(n, |i, _| rows[i][j]);
        let mut d = Dataset::new(
            block(&s_idx),
            block(&t_idx),
            g1_idx.map_or_else(|| DVector::from_element(n, 1.0), column),
            column(g2_idx),
        );
        for (name, &j) in roles.aux.iter().zip(&aux_idx) {
            d.aux.insert(name.clone(), column(j));
        }
        Ok(d)
    }
}

/// Sidecar mapping from CSV columns to dataset roles. A missing `g1` means
/// `g1 ≡ 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub s: Vec<String>,
    pub t: Vec<String>,
    #[serde(default)]
    pub g1: Option<String>,
    pub g2: String,
    #[serde(default)]
    pub aux: Vec<String>,
    /// Functional to estimate; the CLI defaults to the average finite difference.
    #[serde(default)]
    pub functional: Option<FunctionalSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    LengthMismatch {
        block: String,
        expected: usize,
        actual: usize,
    },
    NonFinite {
        block: String,
        count: usize,
        first_row: usize,
    },
    TooFewObservations(usize),
    EmptyBlock(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch {
                block,
                expected,
                actual,
            } => write!(f, "length mismatch: {block} has {actual} rows, expected {expected}"),
            Violation::NonFinite {
                block,
                count,
                first_row,
            } => write!(
                f,
                "non-finite entry: {block} has {count} non-finite value(s), first at row {first_row}"
            ),
            Violation::TooFewObservations(n) => write!(f, "need at least 2 observations, got {n}"),
            Violation::EmptyBlock(b) => write!(f, "block {b} has no columns"),
        }
    }
}

/// Every invariant violation of `d`; empty iff the dataset is valid.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if d.n < 2 {
        out.push(Violation::TooFewObservations(d.n));
    }
    if d.s.ncols() == 0 {
        out.push(Violation::EmptyBlock("s"));
    }
    if d.t.ncols() == 0 {
        out.push(Violation::EmptyBlock("t"));
    }
    let mut blocks: Vec<(String, usize, Vec<(usize, f64)>)> = vec![
        ("s".into(), d.s.nrows(), row_major_values(&d.s)),
        ("t".into(), d.t.nrows(), row_major_values(&d.t)),
        ("g1".into(), d.g1.len(), d.g1.iter().copied().enumerate().collect()),
        ("g2".into(), d.g2.len(), d.g2.iter().copied().enumerate().collect()),
    ];
    for (name, col) in &d.aux {
        blocks.push((
            format!("aux.{name}"),
            col.len(),
            col.iter().copied().enumerate().collect(),
        ));
    }
    for (block, rows, values) in blocks {
        if rows != d.n {
            out.push(Violation::LengthMismatch {
                block: block.clone(),
                expected: d.n,
                actual: rows,
            });
        }
        let bad: Vec<usize> = values
            .iter()
            .filter(|(_, v)| !v.is_finite())
            .map(|(r, _)| *r)
            .collect();
        if let Some(&first_row) = bad.first() {
            out.push(Violation::NonFinite {
                block,
                count: bad.len(),
                first_row,
            });
        }
    }
    out
}

fn row_major_values(m: &DMatrix<f64>) -> Vec<(usize, f64)> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push((i, m[(i, j)]));
        }
    }
    v
}

/// A linear functional `f ↦ m(W; f)`, evaluated per observation by calling
/// the function (or every column of a basis) at transformed points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalSpec {
    /// `(f(S + ε e_c) − f(S − ε e_c)) / (2ε)`.
    AverageFiniteDifference {
        eps: f64,
        #[serde(default)]
        coord: usize,
    },
    /// `f(S)`.
    Mean,
    /// `f(S + e_c) − f(S)`, which reads off the coefficient of a coordinate
    /// that enters linearly (the partially linear `θ_c`).
    CoefficientSelector { coord: usize },
}

impl FunctionalSpec {
    pub fn average_finite_difference(eps: f64) -> Self {
        FunctionalSpec::AverageFiniteDifference { eps, coord: 0 }
    }

    /// `(n × outputs)` matrix of `m(W_i; f_j)` for each output `f_j` of `f`.
    pub fn apply(&self, f: &dyn PointEval, d: &Dataset) -> Result<DMatrix<f64>> {
        let shifted = |coord: usize, delta: f64| -> Result<DMatrix<f64>> {
            if coord >= d.s.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "functional coordinate",
                    expected: d.s.ncols(),
                    actual: coord,
                });
            }
            let mut x = d.s.clone();
            x.column_mut(coord).add_scalar_mut(delta);
            Ok(x)
        };
        match *self {
            FunctionalSpec::AverageFiniteDifference { eps, coord } => {
                if !(eps > 0.0) {
                    return Err(Error::InvalidConfig(format!("finite difference step {eps}")));
                }
                let up = f.eval_points(&shifted(coord, eps)?)?;
                let down = f.eval_points(&shifted(coord, -eps)?)?;
                Ok((up - down) / (2.0 * eps))
            }
            FunctionalSpec::Mean => f.eval_points(&d.s),
            FunctionalSpec::CoefficientSelector { coord } => {
                let up = f.eval_points(&shifted(coord, 1.0)?)?;
                Ok(up - f.eval_points(&d.s)?)
            }
        }
    }

    /// Per-observation `m(W_i; f)`.
    pub fn values(&self, f: &FittedFunction, d: &Dataset) -> Result<DVector<f64>> {
        Ok(self.apply(f, d)?.column(0).into_owned())
    }
}

/// A dataset paired with the functional of interest.
#[derive(Clone, Debug)]
pub struct MomentProblem {
    pub dataset: Dataset,
    pub functional: FunctionalSpec,
}

impl MomentProblem {
    pub fn new(dataset: Dataset, functional: FunctionalSpec) -> Result<Self> {
        dataset.ensure_valid()?;
        Ok(Self {
            dataset,
            functional,
        })
    }

    pub fn n(&self) -> usize {
        self.dataset.n
    }

    pub fn subset(&self, rows: &[usize]) -> MomentProblem {
        MomentProblem {
            dataset: self.dataset.subset(rows),
            functional: self.functional.clone(),
        }
    }
}

/// Per-observation moment slack `g2_i − g1_i·h(S_i)`.
pub fn residual(h: &FittedFunction, d: &Dataset) -> Result<DVector<f64>> {
    let hs = h.evaluate(&d.s)?;
    Ok(&d.g2 - d.g1.component_mul(&hs))
}

/// Empirical `E_n[m(W; h)]`.
pub fn functional_mean(m: &FunctionalSpec, h: &FittedFunction, d: &Dataset) -> Result<f64> {
    Ok(mean(&m.values(h, d)?))
}
