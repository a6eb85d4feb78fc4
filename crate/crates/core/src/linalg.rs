//! Minimal dense linear algebra for the small, structured systems this crate
//! solves: drift matrices up to a few hundred banks, regression normal
//! equations, and tridiagonal sweeps. Row-major storage throughout.

use crate::error::Error;
use crate::scalar::Scalar;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<S>>) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        debug_assert!(rows.iter().all(|row| row.len() == c));
        Mat {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat<S> {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self[(i, k)];
                if aik == S::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + aik * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .map(|(&a, &x)| a * x)
                    .fold(S::zero(), |acc, t| acc + t)
            })
            .collect()
    }

    pub fn add(&self, other: &Mat<S>) -> Mat<S> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, s: S) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn trace(&self) -> S {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .fold(S::zero(), |acc, t| acc + t)
    }

    /// (A + Aᵀ)/2; keeps symmetric ODE states symmetric under roundoff.
    pub fn symmetrize(&self) -> Mat<S> {
        let half = S::of(0.5);
        Mat::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)]) * half
        })
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, &a| acc.max(a.abs()))
    }

    /// Cholesky factor of a symmetric matrix; `None` when a pivot is not
    /// strictly positive, which doubles as the positive-definiteness test.
    pub fn cholesky(&self) -> Option<Mat<S>> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self[(i, j)];
                for k in 0..j {
                    sum = sum - l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if sum <= S::zero() {
                        return None;
                    }
                    l[(i, i)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Some(l)
    }

    /// Solve A x = b for symmetric positive definite A via the Cholesky factor.
    pub fn cholesky_solve(l: &Mat<S>, b: &[S]) -> Vec<S> {
        let n = l.rows;
        assert_eq!(b.len(), n);
        let mut y = vec![S::zero(); n];
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum = sum - l[(i, k)] * y[k];
            }
            y[i] = sum / l[(i, i)];
        }
        let mut x = vec![S::zero(); n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum = sum - l[(k, i)] * x[k];
            }
            x[i] = sum / l[(i, i)];
        }
        x
    }

    /// Solve A x = b by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &[S]) -> Result<Vec<S>> {
        assert_eq!(self.rows, self.cols);
        assert_eq!(b.len(), self.rows);
        let n = self.rows;
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[col * n + col].abs();
            for r in col + 1..n {
                let v = a[r * n + col].abs();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best == S::zero() || !best.is_finite() {
                return Err(Error::numerical("singular matrix in linear solve"));
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
                x.swap(col, pivot);
            }
            let d = a[col * n + col];
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                if f == S::zero() {
                    continue;
                }
                for j in col..n {
                    a[r * n + j] = a[r * n + j] - f * a[col * n + j];
                }
                x[r] = x[r] - f * x[col];
            }
        }
        for i in (0..n).rev() {
            let mut sum = x[i];
            for j in i + 1..n {
                sum = sum - a[i * n + j] * x[j];
            }
            x[i] = sum / a[i * n + i];
        }
        Ok(x)
    }
}

impl<S: Scalar> std::ops::Index<(usize, usize)> for Mat<S> {
    type Output = S;
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S: Scalar> std::ops::IndexMut<(usize, usize)> for Mat<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// Solve a tridiagonal system by the Thomas algorithm.
///
/// `lower`, `diag`, `upper` are the three bands; `lower[0]` and
/// `upper[n-1]` are ignored.
pub fn solve_tridiagonal<S: Scalar>(
    lower: &[S],
    diag: &[S],
    upper: &[S],
    rhs: &[S],
) -> Result<Vec<S>> {
    let n = diag.len();
    assert!(lower.len() == n && upper.len() == n && rhs.len() == n);
    let mut c = vec![S::zero(); n];
    let mut d = vec![S::zero(); n];
    let mut denom = diag[0];
    if denom == S::zero() {
        return Err(Error::numerical("tridiagonal solve: zero pivot"));
    }
    c[0] = upper[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom == S::zero() || !denom.is_finite() {
            return Err(Error::numerical("tridiagonal solve: zero pivot"));
        }
        if i + 1 < n {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        let next = x[i + 1];
        x[i] = x[i] - c[i] * next;
    }
    Ok(x)
}
