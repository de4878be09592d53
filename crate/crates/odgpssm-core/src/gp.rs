//! Squared-exponential kernels and the sparse variational GP predictive
//! shared by every latent process.
//!
//! Each latent GP keeps its own ARD kernel but all of them share one set of
//! inducing inputs `z`; the per-GP variational state is `N(m_q, S_q)` over
//! the inducing outputs, with `S_q` stored as a lower-triangular factor
//! whose diagonal stays positive under the training transform.

use crate::ad::Scalar;
use crate::error::ModelError;
use crate::linalg::{cholesky, dot, solve_lower, solve_lower_transpose, Mat};

/// ARD squared-exponential kernel hyperparameters for one latent GP.
#[derive(Debug, Clone)]
pub struct KernelParams<T = f64> {
    pub signal_variance: T,
    pub lengthscales: Vec<T>,
}

impl<T: Scalar> KernelParams<T> {
    pub fn new(signal_variance: T, lengthscales: Vec<T>) -> Result<Self, ModelError> {
        if !(signal_variance.value() > 0.0) {
            return Err(ModelError::contract("signal variance must be positive"));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(l.value() > 0.0)) {
            return Err(ModelError::contract(
                "lengthscales must be nonempty and strictly positive",
            ));
        }
        Ok(KernelParams {
            signal_variance,
            lengthscales,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Unit-variance, unit-lengthscale kernel on `d_in` inputs.
    pub fn default_for(d_in: usize) -> KernelParams<T> {
        KernelParams {
            signal_variance: T::konst(1.0),
            lengthscales: vec![T::konst(1.0); d_in],
        }
    }
}

/// Per-dimension exponent weights `-1/(2 l_i^2)`, hoisted so repeated
/// kernel rows reduce to one fused distance node each.
fn exponent_weights<T: Scalar>(p: &KernelParams<T>) -> Vec<T> {
    p.lengthscales
        .iter()
        .map(|&l| T::konst(-0.5) / l.sq())
        .collect()
}

fn kernel_eval_weighted<T: Scalar>(signal_variance: T, weights: &[T], x: &[T], x2: &[T]) -> T {
    let exponent = T::weighted_sqdist(x, x2, weights);
    // exp(-100) ~ 4e-44 is far below any variance scale here; flushing to
    // an exact zero keeps denormals out of the downstream products.
    if exponent.value() < -100.0 {
        return T::zero();
    }
    signal_variance * exponent.exp()
}

/// `k(x, x2) = sv * exp(-1/2 sum_i (x_i - x2_i)^2 / l_i^2)`.
pub fn kernel_eval<T: Scalar>(p: &KernelParams<T>, x: &[T], x2: &[T]) -> T {
    debug_assert_eq!(x.len(), p.lengthscales.len());
    debug_assert_eq!(x2.len(), p.lengthscales.len());
    kernel_eval_weighted(p.signal_variance, &exponent_weights(p), x, x2)
}

/// Gram matrix with entry `(i, j) = k(x_i, x2_j)`.
pub fn kernel_matrix<T: Scalar>(p: &KernelParams<T>, x: &Mat<T>, x2: &Mat<T>) -> Mat<T> {
    assert_eq!(x.cols(), p.lengthscales.len(), "kernel_matrix input dim");
    assert_eq!(x2.cols(), p.lengthscales.len(), "kernel_matrix input dim");
    let weights = exponent_weights(p);
    Mat::from_fn(x.rows(), x2.rows(), |i, j| {
        kernel_eval_weighted(p.signal_variance, &weights, x.row(i), x2.row(j))
    })
}

/// Variance clamping shared by every predictive path: tiny negatives are
/// roundoff and clamp to zero, anything below `-1e-6` is a bug surfaced as
/// an error.
pub fn clamp_variance<T: Scalar>(var: T) -> Result<T, ModelError> {
    let v = var.value();
    if v >= 0.0 {
        Ok(var)
    } else if v >= -1e-6 {
        Ok(T::zero())
    } else {
        Err(ModelError::NegativeVariance { value: v })
    }
}

/// Exact noise-free GP posterior at a single test input, zero prior mean:
/// mean `K_*X K_XX^{-1} f`, variance `k(x*,x*) - K_*X K_XX^{-1} K_*Xᵀ`.
pub fn exact_gp_posterior(
    p: &KernelParams<f64>,
    x: &Mat<f64>,
    targets: &[f64],
    xstar: &[f64],
) -> Result<(f64, f64), ModelError> {
    if x.rows() != targets.len() {
        return Err(ModelError::contract(format!(
            "exact_gp_posterior: {} training inputs vs {} targets",
            x.rows(),
            targets.len()
        )));
    }
    let kxx = kernel_matrix(p, x, x);
    let kstar: Vec<f64> = (0..x.rows())
        .map(|i| kernel_eval(p, xstar, x.row(i)))
        .collect();
    let alpha = crate::linalg::cholesky_solve_vec(&kxx, targets)?;
    let beta = crate::linalg::cholesky_solve_vec(&kxx, &kstar)?;
    let mean = dot(&kstar, &alpha);
    let var = kernel_eval(p, xstar, xstar) - dot(&kstar, &beta);
    Ok((mean, clamp_variance(var)?))
}

/// Log marginal likelihood of noisy observations under the kernel prior,
/// `y ~ N(0, K + noise_var I)`. Used to fit hyperparameters at
/// initialization time.
pub fn gp_log_marginal<T: Scalar>(
    p: &KernelParams<T>,
    x: &Mat<T>,
    targets: &[T],
    noise_var: f64,
) -> Result<T, ModelError> {
    let n = x.rows();
    let mut k = kernel_matrix(p, x, x);
    for i in 0..n {
        k[(i, i)] = k[(i, i)] + noise_var;
    }
    let (l, _) = cholesky(&k)?;
    let v = solve_lower(&l, targets);
    let mut quad = T::zero();
    let mut logdet = T::zero();
    for i in 0..n {
        quad = quad + v[i].sq();
        logdet = logdet + l[(i, i)].ln();
    }
    let half_n_ln_2pi = 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(quad * (-0.5) - logdet - half_n_ln_2pi)
}

/// Shared inducing inputs plus the per-GP variational state over inducing
/// outputs.
#[derive(Debug, Clone)]
pub struct InducingSet<T = f64> {
    /// Inducing inputs, one row per point, shared across all latent GPs.
    pub z: Mat<T>,
    /// Variational means `m_q`, one vector per latent GP.
    pub means: Vec<Vec<T>>,
    /// Lower-triangular factors of the variational covariances `S_q`,
    /// strictly positive diagonals.
    pub factors: Vec<Mat<T>>,
}

impl<T: Scalar> InducingSet<T> {
    pub fn num_points(&self) -> usize {
        self.z.rows()
    }

    pub fn num_gps(&self) -> usize {
        self.means.len()
    }

    pub fn input_dim(&self) -> usize {
        self.z.cols()
    }

    /// Reconstructs the dense variational covariance `S_q`.
    pub fn s_cov(&self, q: usize) -> Mat<T> {
        let f = &self.factors[q];
        f.matmul(&f.transpose())
    }

    /// Variational state at the prior: `m_q = 0`, `S_q = K_zz` per GP, which
    /// zeroes the inducing KL term.
    pub fn at_prior(kernels: &[KernelParams<T>], z: Mat<T>) -> Result<Self, ModelError> {
        let m = z.rows();
        let mut means = Vec::with_capacity(kernels.len());
        let mut factors = Vec::with_capacity(kernels.len());
        for kp in kernels {
            let kzz = kernel_matrix(kp, &z, &z);
            let (l, _) = cholesky(&kzz)?;
            means.push(vec![T::zero(); m]);
            factors.push(l);
        }
        let set = InducingSet { z, means, factors };
        set.validate()?;
        Ok(set)
    }

    /// Checks the structural invariants: consistent shapes, distinct
    /// inducing inputs, positive factor diagonals.
    pub fn validate(&self) -> Result<(), ModelError> {
        let m = self.num_points();
        for mean in &self.means {
            if mean.len() != m {
                return Err(ModelError::contract("variational mean length != m"));
            }
        }
        for f in &self.factors {
            if f.rows() != m || f.cols() != m {
                return Err(ModelError::contract("variational factor is not m x m"));
            }
            for i in 0..m {
                if !(f[(i, i)].value() > 0.0) {
                    return Err(ModelError::contract(
                        "variational factor diagonal must stay positive",
                    ));
                }
            }
        }
        for i in 0..m {
            for j in (i + 1)..m {
                let d2: f64 = (0..self.z.cols())
                    .map(|c| {
                        let d = self.z[(i, c)].value() - self.z[(j, c)].value();
                        d * d
                    })
                    .sum();
                if d2.sqrt() <= 1e-10 {
                    return Err(ModelError::contract(format!(
                        "inducing inputs {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sparse variational predictive for latent GP `q` at one test input:
/// mean `K_xz K_zz^{-1} m_q`, variance
/// `K_xx - K_xz K_zz^{-1} [K_zz - S_q] K_zz^{-1} K_xzᵀ`.
pub fn sparse_gp_predict<T: Scalar>(
    p: &KernelParams<T>,
    ind: &InducingSet<T>,
    q_index: usize,
    xstar: &[T],
) -> Result<(T, T), ModelError> {
    if q_index >= ind.num_gps() {
        return Err(ModelError::contract(format!(
            "latent GP index {q_index} out of range (Q = {})",
            ind.num_gps()
        )));
    }
    let kzz = kernel_matrix(p, &ind.z, &ind.z);
    let (l, _) = cholesky(&kzz)?;
    let kxz: Vec<T> = (0..ind.num_points())
        .map(|i| kernel_eval(p, xstar, ind.z.row(i)))
        .collect();

    // a = K_zz^{-1} K_xzᵀ through the factor.
    let v = solve_lower(&l, &kxz);
    let a = solve_lower_transpose(&l, &v);

    let mean = dot(&kxz, &solve_lower_transpose(&l, &solve_lower(&l, &ind.means[q_index])));

    // K_xz K_zz^{-1} [K_zz - S_q] K_zz^{-1} K_xzᵀ = ||v||^2 - ||F_qᵀ a||^2.
    let mut quad_prior = T::zero();
    for &vi in &v {
        quad_prior = quad_prior + vi.sq();
    }
    let f = &ind.factors[q_index];
    let mut quad_s = T::zero();
    for j in 0..ind.num_points() {
        let mut acc = T::zero();
        for i in j..ind.num_points() {
            acc = acc + f[(i, j)] * a[i];
        }
        quad_s = quad_s + acc.sq();
    }
    let var = kernel_eval(p, xstar, xstar) - quad_prior + quad_s;
    Ok((mean, clamp_variance(var)?))
}

/// Precomputed per-GP state for repeated sparse predictions with fixed
/// parameters: the prior factor, `alpha_q = K_zz^{-1} m_q`, and
/// `P_q = K_zz^{-1} (K_zz - S_q) K_zz^{-1}`, so each prediction costs one
/// kernel row plus an `m x m` quadratic form.
pub struct SparsePredictor<T = f64> {
    kernels: Vec<KernelParams<T>>,
    /// Hoisted per-GP exponent weights `-1/(2 l_i^2)`.
    weights: Vec<Vec<T>>,
    z: Mat<T>,
    prior_chols: Vec<Mat<T>>,
    alphas: Vec<Vec<T>>,
    p_mats: Vec<Mat<T>>,
}

impl<T: Scalar> SparsePredictor<T> {
    pub fn build(kernels: &[KernelParams<T>], ind: &InducingSet<T>) -> Result<Self, ModelError> {
        if kernels.len() != ind.num_gps() {
            return Err(ModelError::contract(
                "one kernel per latent GP is required",
            ));
        }
        let m = ind.num_points();
        let eye = Mat::<T>::identity(m);
        let mut prior_chols = Vec::with_capacity(kernels.len());
        let mut alphas = Vec::with_capacity(kernels.len());
        let mut p_mats = Vec::with_capacity(kernels.len());
        for (q, kp) in kernels.iter().enumerate() {
            let kzz = kernel_matrix(kp, &ind.z, &ind.z);
            let (l, _) = cholesky(&kzz)?;
            // W = K_zz^{-1}.
            let mut w = Mat::zeros(m, m);
            let mut col = vec![T::zero(); m];
            for j in 0..m {
                for i in 0..m {
                    col[i] = eye[(i, j)];
                }
                let y = solve_lower(&l, &col);
                let x = solve_lower_transpose(&l, &y);
                for i in 0..m {
                    w[(i, j)] = x[i];
                }
            }
            // P = W (K - S) W = W - (W F)(W F)ᵀ.
            let g = w.matmul(&ind.factors[q]);
            let mut p = w.clone();
            for i in 0..m {
                for j in 0..m {
                    p[(i, j)] = p[(i, j)] - dot(g.row(i), g.row(j));
                }
            }
            let alpha = w.matvec(&ind.means[q]);
            prior_chols.push(l);
            alphas.push(alpha);
            p_mats.push(p);
        }
        Ok(SparsePredictor {
            weights: kernels.iter().map(exponent_weights).collect(),
            kernels: kernels.to_vec(),
            z: ind.z.clone(),
            prior_chols,
            alphas,
            p_mats,
        })
    }

    pub fn num_gps(&self) -> usize {
        self.kernels.len()
    }

    /// Cholesky factor of the prior `K_zz` for GP `q` (feeds the KL term).
    pub fn prior_chol(&self, q: usize) -> &Mat<T> {
        &self.prior_chols[q]
    }

    /// Predictive mean and variance of latent GP `q` at `xstar`.
    pub fn predict(&self, q: usize, xstar: &[T]) -> Result<(T, T), ModelError> {
        let kp = &self.kernels[q];
        let w = &self.weights[q];
        let m = self.z.rows();
        let kxz: Vec<T> = (0..m)
            .map(|i| kernel_eval_weighted(kp.signal_variance, w, xstar, self.z.row(i)))
            .collect();
        let mean = dot(&kxz, &self.alphas[q]);
        let var = kp.signal_variance - T::quad_form(&self.p_mats[q], &kxz);
        Ok((mean, clamp_variance(var)?))
    }
}
