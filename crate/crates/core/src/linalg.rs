//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

/// Jitter added to a symmetric system: `scale * trace(A) / dim`.
pub fn jitter_for(a: &DMatrix<f64>, scale: f64) -> f64 {
    let dim = a.nrows().max(1) as f64;
    let avg_diag = a.trace().abs() / dim;
    scale * if avg_diag > 0.0 { avg_diag } else { 1.0 }
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

enum Factor {
    Cholesky(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

/// Factorization of a symmetric (numerically PSD) matrix plus jitter.
///
/// Cholesky is attempted first; a failed Cholesky falls back to partial-pivot LU.
pub struct SymSolver {
    factor: Factor,
    dim: usize,
    pub jitter: f64,
}

impl SymSolver {
    pub fn new(mut a: DMatrix<f64>, jitter_scale: f64, context: &'static str) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch {
                context,
                expected: a.nrows(),
                actual: a.ncols(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular(context));
        }
        symmetrize(&mut a);
        let jitter = jitter_for(&a, jitter_scale);
        let dim = a.nrows();
        for i in 0..dim {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = a.clone().cholesky() {
            return Ok(Self {
                factor: Factor::Cholesky(chol),
                dim,
                jitter,
            });
        }
        let lu = a.lu();
        let (_, u) = (lu.l(), lu.u());
        let max_diag = u.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min_diag = u.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if !(max_diag > 0.0) || min_diag <= max_diag * 1e-15 {
            return Err(Error::Singular(context));
        }
        Ok(Self {
            factor: Factor::Lu(lu),
            dim,
            jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            Factor::Cholesky(c) => c.solve(b),
            Factor::Lu(lu) => lu.solve(b).expect("LU checked nonsingular at construction"),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Cholesky(c) => c.solve(b),
            Factor::Lu(lu) => lu.solve(b).expect("LU checked nonsingular at construction"),
        }
    }
}

/// Minimum-norm least-squares solution of `a x = b` via SVD, zeroing singular
/// values below `rel_cutoff * sigma_max`.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_cutoff: f64) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let cutoff = rel_cutoff * smax;
    let utb = u.transpose() * b;
    let mut coeffs = DVector::zeros(svd.singular_values.len());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            coeffs[i] = utb[i] / s;
        }
    }
    v_t.transpose() * coeffs
}

/// Orthonormal basis (columns) of the null space of `a`, with the same cutoff rule.
pub fn null_space(a: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let cols = a.ncols();
    // Pad to a square matrix so the SVD returns a full set of right singular vectors.
    let rows = a.nrows().max(cols);
    let mut padded = DMatrix::zeros(rows, cols);
    padded.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max();
    let cutoff = rel_cutoff * smax.max(f64::MIN_POSITIVE);
    let null: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= cutoff)
        .map(|(i, _)| i)
        .collect();
    let mut out = DMatrix::zeros(cols, null.len());
    for (k, &i) in null.iter().enumerate() {
        out.set_column(k, &v_t.row(i).transpose());
    }
    out
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

pub fn mean(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.sum() / v.len() as f64
    }
}

/// Root mean square, `‖v‖_n`.
pub fn rms(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.norm_squared() / v.len() as f64).sqrt()
    }
}

/// Horizontal concatenation of two blocks with equal row counts.
pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}
