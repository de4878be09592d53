//! Dense linear algebra over any [`Scalar`], plus f64-only spectral helpers.
//!
//! Everything is stored dense and row-major. Matrices stay small in this
//! model family (inducing sets of a few dozen points, state dimensions in
//! single digits), so clarity and differentiability win over blocking or
//! sparsity.

use crate::ad::Scalar;
use crate::error::LinalgError;

/// Relative tolerance for symmetry checks.
pub const SYM_TOL: f64 = 1e-12;

/// Jitter ladder: start at `1e-8 * scale`, escalate by 10 up to `1e-2 * scale`.
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::konst(1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat {
            rows: r,
            cols: c,
            data: rows.concat(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn transpose(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shape");
        (0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// Maps the primal values into a plain f64 matrix.
    pub fn to_f64(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |r, c| self[(r, c)].value())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.value().abs())
            .fold(0.0, f64::max)
    }

    fn mean_diag(&self) -> f64 {
        let n = self.rows.min(self.cols);
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|i| self[(i, i)].value()).sum::<f64>() / n as f64
    }
}

impl<T> std::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Mat<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    T::dot(a, b)
}

/// Verifies `a` is square and symmetric within [`SYM_TOL`] relative to its
/// largest entry.
pub fn check_symmetric<T: Scalar>(a: &Mat<T>) -> Result<(), LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "check_symmetric",
            expected: a.rows(),
            got: a.cols(),
        });
    }
    let scale = a.max_abs().max(1.0);
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            let delta = (a[(i, j)].value() - a[(j, i)].value()).abs();
            if delta > SYM_TOL * scale {
                return Err(LinalgError::NotSymmetric {
                    row: i,
                    col: j,
                    delta,
                });
            }
        }
    }
    Ok(())
}

/// Strict Cholesky: `a = L Lᵀ` with positive pivots, no jitter. On failure
/// returns the 1-based order of the offending leading minor.
fn cholesky_raw<T: Scalar>(a: &Mat<T>, jitter: f64) -> Result<Mat<T>, usize> {
    let n = a.rows();
    let mut l = Mat::<T>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d = d - l[(j, k)].sq();
        }
        let dv = d.value();
        if !(dv > 0.0) || !dv.is_finite() {
            return Err(j + 1);
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Cholesky factorization with the escalating jitter ladder.
///
/// Tries the matrix as-is, then adds `10^k * 1e-8 * mean(diag)` to the
/// diagonal for k = 0.. until `1e-2 * mean(diag)`. Returns the factor and the
/// jitter that was actually applied (`l lᵀ = a + jitter I`). For an
/// all-zero diagonal the jitter scale falls back to 1.0 so degenerate
/// covariances still factor as a tiny multiple of the identity.
pub fn cholesky<T: Scalar>(a: &Mat<T>) -> Result<(Mat<T>, f64), LinalgError> {
    let mut scale = a.mean_diag();
    if !(scale > 0.0) {
        scale = 1.0;
    }
    let mut failed_minor = 0;
    match cholesky_raw(a, 0.0) {
        Ok(l) => return Ok((l, 0.0)),
        Err(minor) => failed_minor = failed_minor.max(minor),
    }
    let mut jitter = JITTER_START * scale;
    let max_jitter = JITTER_MAX * scale;
    while jitter <= max_jitter * (1.0 + 1e-12) {
        match cholesky_raw(a, jitter) {
            Ok(l) => return Ok((l, jitter)),
            Err(minor) => failed_minor = failed_minor.max(minor),
        }
        jitter *= 10.0;
    }
    Err(LinalgError::FactorizationFailed {
        minor: failed_minor,
        max_jitter,
    })
}

/// Solves `L x = b` for lower-triangular `L` by forward substitution.
pub fn solve_lower<T: Scalar>(l: &Mat<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = b[i];
        let row = l.row(i);
        for (&lik, &xk) in row[..i].iter().zip(x.iter()) {
            s = s - lik * xk;
        }
        x.push(s / row[i]);
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L` by backward substitution.
pub fn solve_lower_transpose<T: Scalar>(l: &Mat<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s = s - l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `A X = B` for symmetric positive-definite `A` through a Cholesky
/// factorization (never an explicit inverse), jitter ladder included.
pub fn cholesky_solve<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>, LinalgError> {
    check_symmetric(a)?;
    if b.rows() != a.rows() {
        return Err(LinalgError::DimensionMismatch {
            op: "cholesky_solve",
            expected: a.rows(),
            got: b.rows(),
        });
    }
    let (l, _) = cholesky(a)?;
    let mut out = Mat::zeros(b.rows(), b.cols());
    let mut col = vec![T::zero(); b.rows()];
    for j in 0..b.cols() {
        for i in 0..b.rows() {
            col[i] = b[(i, j)];
        }
        let y = solve_lower(&l, &col);
        let x = solve_lower_transpose(&l, &y);
        for i in 0..b.rows() {
            out[(i, j)] = x[i];
        }
    }
    Ok(out)
}

/// Solves `A x = b` for a vector right-hand side. See [`cholesky_solve`].
pub fn cholesky_solve_vec<T: Scalar>(a: &Mat<T>, b: &[T]) -> Result<Vec<T>, LinalgError> {
    let bm = Mat::from_fn(b.len(), 1, |r, _| b[r]);
    let x = cholesky_solve(a, &bm)?;
    Ok((0..b.len()).map(|i| x[(i, 0)]).collect())
}

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi
/// rotations. Returns `(values, vectors)` with `a = V diag(values) Vᵀ`;
/// eigenvectors are the columns of `V`. Values are unsorted.
pub fn jacobi_eigen(a: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>), LinalgError> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Mat::<f64>::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        let scale = (0..n).map(|i| m[(i, i)].abs()).fold(1e-300, f64::max);
        if off.sqrt() <= 1e-14 * scale * n as f64 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
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
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[(i, i)]).collect();
    Ok((values, v))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &Mat<f64>) -> Result<Vec<f64>, LinalgError> {
    let (mut values, _) = jacobi_eigen(a)?;
    values.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(values)
}

/// A factor `M` with `M Mᵀ = a` for symmetric positive *semi*-definite `a`;
/// eigenvalues in `[-1e-10, 0)` clamp to zero. Suited to sampling from
/// degenerate covariances (an all-zero matrix yields an all-zero factor).
pub fn psd_sqrt(a: &Mat<f64>) -> Result<Mat<f64>, LinalgError> {
    let (values, vectors) = jacobi_eigen(a)?;
    let n = a.rows();
    Ok(Mat::from_fn(n, n, |r, c| {
        vectors[(r, c)] * values[c].max(0.0).sqrt()
    }))
}

/// Singular values of a rectangular matrix, descending, via the symmetric
/// eigenproblem on the smaller Gram matrix.
pub fn singular_values(a: &Mat<f64>) -> Vec<f64> {
    let gram = if a.rows() >= a.cols() {
        a.transpose().matmul(a)
    } else {
        a.matmul(&a.transpose())
    };
    let mut vals: Vec<f64> = symmetric_eigenvalues(&gram)
        .expect("gram matrix is symmetric by construction")
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
    vals
}
