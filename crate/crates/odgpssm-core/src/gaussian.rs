//! Gaussian beliefs: the `N(m, S)` objects threaded through the whole model,
//! with a lazily cached Cholesky factor and the closed-form operations on
//! them (KL divergence, reparameterized sampling).

use std::sync::OnceLock;

use crate::ad::Scalar;
use crate::error::{LinalgError, ModelError};
use crate::linalg::{check_symmetric, cholesky, solve_lower, Mat};

/// A multivariate Gaussian `N(mean, cov)` with a cached lower-triangular
/// factor of `cov + jitter I`.
///
/// Immutable after construction; the factor is computed at most once even
/// under concurrent readers.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    mean: Vec<f64>,
    cov: Mat<f64>,
    chol: OnceLock<Result<(Mat<f64>, f64), LinalgError>>,
}

impl GaussianBelief {
    /// Builds a belief, checking that `cov` is square, matches the mean
    /// dimension, and is symmetric within tolerance.
    pub fn new(mean: Vec<f64>, cov: Mat<f64>) -> Result<Self, ModelError> {
        if cov.rows() != mean.len() || cov.cols() != mean.len() {
            return Err(ModelError::contract(format!(
                "covariance is {}x{} but mean has dimension {}",
                cov.rows(),
                cov.cols(),
                mean.len()
            )));
        }
        check_symmetric(&cov)?;
        Ok(GaussianBelief {
            mean,
            cov,
            chol: OnceLock::new(),
        })
    }

    /// An isotropic Gaussian `N(mean, scale I)`.
    pub fn isotropic(mean: Vec<f64>, scale: f64) -> Self {
        let n = mean.len();
        let cov = Mat::from_fn(n, n, |r, c| if r == c { scale } else { 0.0 });
        GaussianBelief {
            mean,
            cov,
            chol: OnceLock::new(),
        }
    }

    pub fn standard(dim: usize) -> Self {
        GaussianBelief::isotropic(vec![0.0; dim], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Mat<f64> {
        &self.cov
    }

    /// The cached factor `L` with `L Lᵀ = cov + jitter I`.
    pub fn chol(&self) -> Result<&Mat<f64>, LinalgError> {
        self.chol
            .get_or_init(|| cholesky(&self.cov))
            .as_ref()
            .map(|(l, _)| l)
            .map_err(|e| e.clone())
    }

    /// Jitter that was added to make the covariance factor (0 when clean).
    pub fn applied_jitter(&self) -> Result<f64, LinalgError> {
        self.chol
            .get_or_init(|| cholesky(&self.cov))
            .as_ref()
            .map(|(_, j)| *j)
            .map_err(|e| e.clone())
    }
}

/// Closed-form `KL(q || p)` between multivariate Gaussians.
pub fn kl_gaussian(q: &GaussianBelief, p: &GaussianBelief) -> Result<f64, ModelError> {
    if q.dim() != p.dim() {
        return Err(ModelError::contract(format!(
            "kl_gaussian dimension mismatch: q is {}, p is {}",
            q.dim(),
            p.dim()
        )));
    }
    let lq = q.chol()?;
    let lp = p.chol()?;
    Ok(kl_gaussian_factors(q.mean(), lq, p.mean(), lp))
}

/// `KL(N(m_q, L_q L_qᵀ) || N(m_p, L_p L_pᵀ))` from Cholesky factors.
///
/// Generic so the training objective can run it on the tape with the same
/// arithmetic the plain evaluation uses.
pub fn kl_gaussian_factors<T: Scalar>(m_q: &[T], l_q: &Mat<T>, m_p: &[T], l_p: &Mat<T>) -> T {
    let n = m_q.len();
    debug_assert_eq!(m_p.len(), n);
    debug_assert_eq!(l_q.rows(), n);
    debug_assert_eq!(l_p.rows(), n);

    // trace(S_p^{-1} S_q) = ||L_p^{-1} L_q||_F^2, column by column.
    let mut trace = T::zero();
    let mut col = vec![T::zero(); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = l_q[(i, j)];
        }
        let w = solve_lower(l_p, &col);
        for &wi in &w {
            trace = trace + wi.sq();
        }
    }

    // (m_p - m_q)ᵀ S_p^{-1} (m_p - m_q) = ||L_p^{-1} (m_p - m_q)||^2.
    let diff: Vec<T> = m_p.iter().zip(m_q).map(|(&a, &b)| a - b).collect();
    let v = solve_lower(l_p, &diff);
    let mut quad = T::zero();
    for &vi in &v {
        quad = quad + vi.sq();
    }

    // log det S_p - log det S_q = 2 sum ln L_p,ii - 2 sum ln L_q,ii.
    let mut logdet = T::zero();
    for i in 0..n {
        logdet = logdet + l_p[(i, i)].ln() - l_q[(i, i)].ln();
    }

    (trace + quad - n as f64) * 0.5 + logdet
}

/// Reparameterized draw `mean + L eps` from a belief. The noise `eps` is
/// supplied by the caller, never drawn internally, so the result is a
/// deterministic (and differentiable) function of the belief's parameters.
pub fn sample_gaussian(g: &GaussianBelief, eps: &[f64]) -> Result<Vec<f64>, ModelError> {
    if eps.len() != g.dim() {
        return Err(ModelError::contract(format!(
            "sample_gaussian: eps has dimension {}, belief has {}",
            eps.len(),
            g.dim()
        )));
    }
    let l = g.chol()?;
    Ok(sample_from_factor(g.mean(), l, eps))
}

/// `mean + L eps` for a lower-triangular factor, generic over the scalar.
pub fn sample_from_factor<T: Scalar>(mean: &[T], l: &Mat<T>, eps: &[f64]) -> Vec<T> {
    let n = mean.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = mean[i];
        for (j, &e) in eps.iter().enumerate().take(i + 1) {
            x = x + l[(i, j)] * e;
        }
        out.push(x);
    }
    out
}
