//! Linear model of coregionalization: mixes Q independent latent-GP
//! moments into d_x dependent transition outputs through `f = A h`, and the
//! identifiability diagnostics that come with that construction (the model
//! keeps a unique latent preimage exactly when `Q <= d_x` and `A` has full
//! column rank).

use serde::{Deserialize, Serialize};

use crate::ad::Scalar;
use crate::error::ModelError;
use crate::gp::{kernel_eval, KernelParams};
use crate::linalg::{cholesky_solve_vec, singular_values, Mat};
use crate::rng::NormalStream;

/// Relative threshold on singular values when counting numerical rank.
const RANK_TOL: f64 = 1e-8;

/// The `d_x x Q` mixing matrix whose rows adapt the shared latent GPs to
/// each output dimension.
#[derive(Debug, Clone)]
pub struct Coregionalization<T = f64> {
    a: Mat<T>,
}

/// Snapshot of the rank structure of the mixing matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IdentifiabilityReport {
    pub q: usize,
    pub d_x: usize,
    pub rank: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub identifiable: bool,
}

impl<T: Scalar> Coregionalization<T> {
    pub fn new(a: Mat<T>) -> Result<Self, ModelError> {
        if a.rows() == 0 || a.cols() == 0 {
            return Err(ModelError::contract(
                "coregionalization matrix must be nonempty",
            ));
        }
        Ok(Coregionalization { a })
    }

    pub fn matrix(&self) -> &Mat<T> {
        &self.a
    }

    pub fn num_outputs(&self) -> usize {
        self.a.rows()
    }

    pub fn num_latents(&self) -> usize {
        self.a.cols()
    }

    pub fn to_f64(&self) -> Coregionalization<f64> {
        Coregionalization {
            a: self.a.to_f64(),
        }
    }
}

impl Coregionalization<f64> {
    /// Identity mixing: `A = I_{d_x}`, `Q = d_x`. With per-dimension kernels
    /// this makes the whole model coincide with the output-independent
    /// baseline (each transition output driven by its own latent GP).
    pub fn independent_baseline(d_x: usize) -> Self {
        assert!(d_x >= 1);
        Coregionalization {
            a: Mat::identity(d_x),
        }
    }

    /// Training initialization: identity padded or truncated to
    /// `d_x x Q`, with a small entrywise `N(0, 0.01)` perturbation so
    /// gradients can discover output coupling from a known-good starting
    /// point.
    pub fn init_near_identity(d_x: usize, q: usize, seed: u64) -> Self {
        let mut stream = NormalStream::new(seed);
        let a = Mat::from_fn(d_x, q, |r, c| {
            let base = if r == c { 1.0 } else { 0.0 };
            base + 0.01 * stream.next()
        });
        Coregionalization { a }
    }
}

/// Mixes latent moments into output moments: `xi_f = A xi_h`,
/// `Xi_f = A diag(var_h) Aᵀ`. The latent covariance is diagonal because the
/// Q latent GPs are independent.
pub fn mix_moments<T: Scalar>(
    coreg: &Coregionalization<T>,
    xi_h: &[T],
    var_h: &[T],
) -> Result<(Vec<T>, Mat<T>), ModelError> {
    let q = coreg.num_latents();
    let d_x = coreg.num_outputs();
    if xi_h.len() != q || var_h.len() != q {
        return Err(ModelError::contract(format!(
            "mix_moments: latent moments have length {}/{}, expected Q = {q}",
            xi_h.len(),
            var_h.len()
        )));
    }
    if var_h.iter().any(|v| v.value() < 0.0) {
        return Err(ModelError::contract(
            "mix_moments: latent variances must be nonnegative",
        ));
    }
    let a = coreg.matrix();
    let xi_f = a.matvec(xi_h);
    let mut cov = Mat::zeros(d_x, d_x);
    for i in 0..d_x {
        for j in i..d_x {
            let mut acc = T::zero();
            for k in 0..q {
                acc = acc + a[(i, k)] * a[(j, k)] * var_h[k];
            }
            cov[(i, j)] = acc;
            cov[(j, i)] = acc;
        }
    }
    Ok((xi_f, cov))
}

/// Entry `(i, j)` of the induced multi-output kernel:
/// `sum_q a_iq a_jq k_q(x, x2)`.
pub fn multioutput_kernel_entry(
    coreg: &Coregionalization<f64>,
    kernels: &[KernelParams<f64>],
    i: usize,
    j: usize,
    x: &[f64],
    x2: &[f64],
) -> Result<f64, ModelError> {
    let d_x = coreg.num_outputs();
    if i >= d_x || j >= d_x {
        return Err(ModelError::contract(format!(
            "multioutput_kernel_entry: ({i}, {j}) out of range for d_x = {d_x}"
        )));
    }
    if kernels.len() != coreg.num_latents() {
        return Err(ModelError::contract(
            "multioutput_kernel_entry: one kernel per latent GP required",
        ));
    }
    let a = coreg.matrix();
    let mut acc = 0.0;
    for (q, kp) in kernels.iter().enumerate() {
        acc += a[(i, q)] * a[(j, q)] * kernel_eval(kp, x, x2);
    }
    Ok(acc)
}

/// Rank diagnostics for the mixing matrix.
pub fn check_identifiability(coreg: &Coregionalization<f64>) -> IdentifiabilityReport {
    let a = coreg.matrix();
    let sv = singular_values(a);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let sigma_min = sv.last().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * sigma_max).count();
    let q = coreg.num_latents();
    let d_x = coreg.num_outputs();
    IdentifiabilityReport {
        q,
        d_x,
        rank,
        sigma_min,
        sigma_max,
        identifiable: q <= d_x && rank == q,
    }
}

/// Least-squares recovery of the latent vector behind an output:
/// `h_hat = (AᵀA)^{-1} Aᵀ f`. Exact whenever `f = A h` and the model is in
/// its identifiable mode.
pub fn recover_latent(coreg: &Coregionalization<f64>, f: &[f64]) -> Result<Vec<f64>, ModelError> {
    let report = check_identifiability(coreg);
    if !report.identifiable {
        return Err(ModelError::NotIdentifiable {
            q: report.q,
            d_x: report.d_x,
            rank: report.rank,
        });
    }
    if f.len() != coreg.num_outputs() {
        return Err(ModelError::contract(format!(
            "recover_latent: output has length {}, expected d_x = {}",
            f.len(),
            coreg.num_outputs()
        )));
    }
    let a = coreg.matrix();
    let gram = a.transpose().matmul(a);
    let rhs = a.transpose().matvec(f);
    Ok(cholesky_solve_vec(&gram, &rhs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;

    #[test]
    fn identity_mixing_is_identity_on_moments() {
        let coreg = Coregionalization::independent_baseline(3);
        let xi = [0.5, -1.0, 2.0];
        let var = [1.0, 2.0, 0.5];
        let (xi_f, cov) = mix_moments(&coreg, &xi, &var).unwrap();
        assert_eq!(xi_f, xi.to_vec());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { var[i] } else { 0.0 };
                assert_eq!(cov[(i, j)], want);
            }
        }
    }

    #[test]
    fn mix_moments_hand_case() {
        // A = [[1,0],[1,1]], xi = [1,2], var = diag(1,4):
        // xi_f = [1,3], Xi_f = [[1,1],[1,5]].
        let coreg =
            Coregionalization::new(Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]])).unwrap();
        let (xi_f, cov) = mix_moments(&coreg, &[1.0, 2.0], &[1.0, 4.0]).unwrap();
        assert_eq!(xi_f, vec![1.0, 3.0]);
        assert_eq!(cov[(0, 0)], 1.0);
        assert_eq!(cov[(0, 1)], 1.0);
        assert_eq!(cov[(1, 0)], 1.0);
        assert_eq!(cov[(1, 1)], 5.0);
    }

    #[test]
    fn deterministic_latents_give_zero_covariance() {
        let coreg = Coregionalization::init_near_identity(4, 3, 7);
        let (_, cov) = mix_moments(&coreg, &[1.0, -2.0, 0.5], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cov.max_abs(), 0.0);
    }

    #[test]
    fn mixed_covariance_is_symmetric_and_psd() {
        let mut stream = NormalStream::new(33);
        for _ in 0..20 {
            let coreg = Coregionalization::new(Mat::from_fn(4, 3, |_, _| stream.next())).unwrap();
            let xi: Vec<f64> = (0..3).map(|_| stream.next()).collect();
            let var: Vec<f64> = (0..3).map(|_| stream.next().abs()).collect();
            let (_, cov) = mix_moments(&coreg, &xi, &var).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    assert!((cov[(i, j)] - cov[(j, i)]).abs() <= 1e-12);
                }
            }
            let eigs = symmetric_eigenvalues(&cov).unwrap();
            assert!(eigs[0] >= -1e-10, "min eig {}", eigs[0]);
        }
    }

    #[test]
    fn kernel_entry_identity_mixing() {
        let coreg = Coregionalization::independent_baseline(2);
        let kernels = vec![
            KernelParams::new(1.3, vec![1.0]).unwrap(),
            KernelParams::new(0.6, vec![2.0]).unwrap(),
        ];
        let (x, x2) = ([0.2], [1.0]);
        let off = multioutput_kernel_entry(&coreg, &kernels, 0, 1, &x, &x2).unwrap();
        assert_eq!(off, 0.0);
        let diag = multioutput_kernel_entry(&coreg, &kernels, 1, 1, &x, &x2).unwrap();
        assert_eq!(diag, kernel_eval(&kernels[1], &x, &x2));
    }

    #[test]
    fn kernel_entry_hand_cancellation() {
        // A = [[1,1],[1,-1]], equal unit kernels, x = x2:
        // entry (0,1) = 1*1*1 + 1*(-1)*1 = 0.
        let coreg =
            Coregionalization::new(Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]])).unwrap();
        let kernels = vec![
            KernelParams::default_for(1),
            KernelParams::default_for(1),
        ];
        let v = multioutput_kernel_entry(&coreg, &kernels, 0, 1, &[0.4], &[0.4]).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn kernel_entry_swap_symmetry() {
        let coreg = Coregionalization::init_near_identity(3, 2, 5);
        let kernels = vec![
            KernelParams::new(0.8, vec![1.0]).unwrap(),
            KernelParams::new(1.4, vec![0.7]).unwrap(),
        ];
        let (x, x2) = ([0.3], [-0.9]);
        let v1 = multioutput_kernel_entry(&coreg, &kernels, 0, 2, &x, &x2).unwrap();
        let v2 = multioutput_kernel_entry(&coreg, &kernels, 2, 0, &x2, &x).unwrap();
        assert!((v1 - v2).abs() < 1e-15);
    }

    #[test]
    fn identifiability_identity_four() {
        let coreg = Coregionalization::independent_baseline(4);
        let report = check_identifiability(&coreg);
        assert!(report.identifiable);
        assert_eq!(report.rank, 4);
        assert_eq!((report.q, report.d_x), (4, 4));
    }

    #[test]
    fn identifiability_duplicate_columns() {
        let a = Mat::from_fn(4, 2, |r, _| (r + 1) as f64);
        let report = check_identifiability(&Coregionalization::new(a).unwrap());
        assert!(!report.identifiable);
        assert_eq!(report.rank, 1);
    }

    #[test]
    fn identifiability_rejects_more_latents_than_outputs() {
        let mut stream = NormalStream::new(2);
        let a = Mat::from_fn(4, 5, |_, _| stream.next());
        let report = check_identifiability(&Coregionalization::new(a).unwrap());
        assert!(!report.identifiable);
    }

    #[test]
    fn recover_latent_identity() {
        let coreg = Coregionalization::independent_baseline(3);
        let f = [0.1, -0.2, 0.3];
        let h = recover_latent(&coreg, &f).unwrap();
        for i in 0..3 {
            assert!((h[i] - f[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn recover_latent_round_trip() {
        let mut stream = NormalStream::new(17);
        let a = Mat::from_fn(4, 3, |_, _| stream.next());
        let coreg = Coregionalization::new(a.clone()).unwrap();
        let h = vec![0.3, -0.7, 1.1];
        let f = a.matvec(&h);
        let recovered = recover_latent(&coreg, &f).unwrap();
        for i in 0..3 {
            assert!((recovered[i] - h[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn recover_latent_rank_deficient_is_error() {
        let a = Mat::from_fn(4, 2, |r, _| (r + 1) as f64);
        let coreg = Coregionalization::new(a).unwrap();
        assert!(matches!(
            recover_latent(&coreg, &[1.0, 2.0, 3.0, 4.0]),
            Err(ModelError::NotIdentifiable { .. })
        ));
    }

    #[test]
    fn baseline_shapes() {
        let one = Coregionalization::independent_baseline(1);
        assert_eq!(one.matrix()[(0, 0)], 1.0);
        let four = Coregionalization::independent_baseline(4);
        assert!(check_identifiability(&four).identifiable);
    }

    #[test]
    fn kernel_entry_consistent_with_mix_moments_at_equal_inputs() {
        // Building Xi_h from the Q prior kernel values k_q(x, x) and mixing
        // must agree with the multi-output kernel entries at (x, x).
        let mut stream = NormalStream::new(8);
        let coreg = Coregionalization::new(Mat::from_fn(3, 2, |_, _| stream.next())).unwrap();
        let kernels = vec![
            KernelParams::new(1.5, vec![0.9]).unwrap(),
            KernelParams::new(0.4, vec![1.3]).unwrap(),
        ];
        let x = [0.25];
        let prior_var: Vec<f64> = kernels.iter().map(|k| kernel_eval(k, &x, &x)).collect();
        let (_, cov) = mix_moments(&coreg, &[0.0, 0.0], &prior_var).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let entry = multioutput_kernel_entry(&coreg, &kernels, i, j, &x, &x).unwrap();
                assert!((cov[(i, j)] - entry).abs() < 1e-13);
            }
        }
    }
}
