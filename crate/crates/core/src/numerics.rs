//! Dense linear algebra and sampling primitives.
//!
//! Everything here is deliberately small: row-major `f64` matrices, a
//! Cholesky factorization with triangular solves, a cyclic Jacobi
//! eigensolver for the symmetric matrices the PCA baseline needs, an
//! order-statistic quantile and the seeded generator used across the crate.

use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The generator behind every stochastic operation (ChaCha with 8 rounds).
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a per-stage seed as `seed + fnv1a64(stage)` (wrapping).
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in stage.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed.wrapping_add(hash)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Error::check_dim(rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn add_diagonal(&mut self, lambda: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self[(i, i)] += lambda;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.rows, other.rows)?;
        Error::check_dim(self.cols, other.cols)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular factor with a strictly positive diagonal.
///
/// Entries above the diagonal are stored (row-major, full square) but are
/// always exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    /// Takes the lower triangle of `m` (the upper part must be zero) and
    /// validates the diagonal.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                expected: m.rows(),
                got: m.cols(),
            });
        }
        let dim = m.rows();
        for i in 0..dim {
            for j in i + 1..dim {
                if m[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i}, {j}) above the diagonal is nonzero"
                    )));
                }
            }
            if !(m[(i, i)] > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "diagonal entry {i} is not positive"
                )));
            }
        }
        Ok(Self {
            dim,
            data: m.as_slice().to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Mutable access restricted to the lower triangle.
    ///
    /// Panics if `j > i`.
    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        assert!(
            j <= i,
            "upper triangle of a LowerTriangular is structural zero"
        );
        &mut self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    /// `L · Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let k_max = j;
                let mut s = 0.0;
                for k in 0..=k_max {
                    s += self.get(i, k) * self.get(j, k);
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    /// `ln det(L Lᵀ)`.
    pub fn log_det_product(&self) -> f64 {
        2.0 * (0..self.dim).map(|i| self.get(i, i).ln()).sum::<f64>()
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim, b.len())?;
        let n = self.dim;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = &self.data[i * n..i * n + i];
            let s = b[i] - dot(row, &y[..i]);
            y[i] = s / self.get(i, i);
        }
        Ok(y)
    }

    /// Solves `Lᵀ z = y` by back substitution.
    pub fn solve_upper_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim, y.len())?;
        let n = self.dim;
        let mut z = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.get(k, i) * z[k];
            }
            z[i] = s / self.get(i, i);
        }
        Ok(z)
    }

    /// Clamps every diagonal entry to at least `floor`.
    pub fn clamp_diagonal(&mut self, floor: f64) {
        for i in 0..self.dim {
            let d = &mut self.data[i * self.dim + i];
            if *d < floor {
                *d = floor;
            }
        }
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Only the lower triangle of `a` is read.
pub fn cholesky(a: &Matrix) -> Result<LowerTriangular> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            got: a.cols(),
        });
    }
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[j * n + k] * l[j * n + k];
        }
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { row: j, pivot });
        }
        let d = pivot.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(LowerTriangular { dim: n, data: l })
}

/// Cholesky with the single-retry jitter policy.
///
/// On failure, `λI` with `λ = 1e-6 · trace(a) / dim` is added and the
/// factorization retried once. `λ` is floored at `1e-10` so an all-zero
/// matrix still factors. Returns the factor and the jitter applied (0 when
/// none was needed).
pub fn cholesky_with_jitter(a: &Matrix) -> Result<(LowerTriangular, f64)> {
    match cholesky(a) {
        Ok(l) => Ok((l, 0.0)),
        Err(Error::NotPositiveDefinite { .. }) => {
            let dim = a.rows().max(1) as f64;
            let lambda = (1e-6 * a.trace() / dim).max(1e-10);
            let mut jittered = a.clone();
            jittered.add_diagonal(lambda);
            cholesky(&jittered).map(|l| (l, lambda))
        }
        Err(e) => Err(e),
    }
}

/// Solves `(L Lᵀ) z = b` with two triangular solves.
pub fn solve_spd(l: &LowerTriangular, b: &[f64]) -> Result<Vec<f64>> {
    let y = l.solve_lower(b)?;
    l.solve_upper_transposed(&y)
}

/// Order statistic at 1-indexed rank `⌈q·N⌉` of the sorted values.
///
/// At most a `1 − q` fraction of the values lies strictly above the result.
pub fn empirical_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile level {q} outside (0, 1)"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard against q·N landing a hair above an integer through rounding.
    let raw = q * n as f64;
    let rank = if (raw - raw.round()).abs() < 1e-9 {
        raw.round() as usize
    } else {
        raw.ceil() as usize
    };
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted in descending order and the matching unit
/// eigenvectors as the rows of a matrix. Iterates until the off-diagonal
/// Frobenius norm is at most `1e-10 ·` the matrix norm, or 200 sweeps.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.rows(),
            got: a.cols(),
        });
    }
    let n = a.rows();
    let mut m = a.clone();
    // Columns of `v` accumulate the rotations; stored transposed (rows) so
    // that each rotation touches two contiguous rows.
    let mut vt = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let tol = 1e-10 * scale;

    for _sweep in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= tol || scale == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vpk = vt[(p, k)];
                    let vqk = vt[(q, k)];
                    vt[(p, k)] = c * vpk - s * vqk;
                    vt[(q, k)] = s * vpk + c * vqk;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(dst, k)] = vt[(src, k)];
        }
    }
    Ok((values, vectors))
}
