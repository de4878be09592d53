//! Exact linear-Gaussian machinery: trajectory simulation, Kalman filter,
//! and RTS smoother. These are the ground-truth oracles the learned models
//! are judged against, so they share no code with the GP predictive path.

use crate::error::ModelError;
use crate::gaussian::GaussianBelief;
use crate::linalg::{cholesky, cholesky_solve, psd_sqrt, solve_lower, Mat};
use crate::model::Trajectory;
use crate::rng::NormalStream;

/// A linear-Gaussian state-space model
/// `x_t = F x_{t-1} + v_t`, `y_t = C x_t + e_t` with `v ~ N(0, Q)`,
/// `e ~ N(0, R)` and initial belief `x_0 ~ N(x0, x0_cov)`.
#[derive(Debug, Clone)]
pub struct LgssmSpec {
    pub f: Mat<f64>,
    pub c: Mat<f64>,
    pub q_cov: Mat<f64>,
    pub r_cov: Mat<f64>,
    pub x0: Vec<f64>,
    pub x0_cov: Mat<f64>,
}

impl LgssmSpec {
    pub fn d_x(&self) -> usize {
        self.f.rows()
    }

    pub fn d_y(&self) -> usize {
        self.c.rows()
    }
}

/// The 2-D car-tracking system: positions integrate velocities, velocities
/// random-walk, and only the positions are observed.
///
/// ```text
/// F = [ I2  I2 ]    C = [ I2  0 ]    x0 = [0, 0, 1, -1]
///     [ 0   I2 ]
/// ```
///
/// Noise levels are supplied by the experiment configuration rather than
/// baked in here.
pub fn car_tracking_spec(q_diag: &[f64; 4], r_diag: &[f64; 2]) -> LgssmSpec {
    let mut f = Mat::identity(4);
    f[(0, 2)] = 1.0;
    f[(1, 3)] = 1.0;
    let c = Mat::from_fn(2, 4, |r, c_| if r == c_ { 1.0 } else { 0.0 });
    LgssmSpec {
        f,
        c,
        q_cov: Mat::from_fn(4, 4, |r, c_| if r == c_ { q_diag[r] } else { 0.0 }),
        r_cov: Mat::from_fn(2, 2, |r, c_| if r == c_ { r_diag[r] } else { 0.0 }),
        x0: vec![0.0, 0.0, 1.0, -1.0],
        x0_cov: Mat::zeros(4, 4),
    }
}

/// Simulates `T` steps, recording both the latent states `x_{0:T}` and the
/// observations `y_{1:T}`. The initial state is the spec's `x0` point.
pub fn lgssm_generate(spec: &LgssmSpec, t_len: usize, seed: u64) -> Result<Trajectory, ModelError> {
    assert!(t_len >= 1, "need at least one step");
    let d_x = spec.d_x();
    let d_y = spec.d_y();
    let lq = psd_sqrt(&spec.q_cov)?;
    let lr = psd_sqrt(&spec.r_cov)?;
    let mut stream = NormalStream::new(seed);

    let mut states = Mat::zeros(t_len + 1, d_x);
    let mut obs = Mat::zeros(t_len, d_y);
    let mut x = spec.x0.clone();
    for (i, v) in x.iter().enumerate() {
        states[(0, i)] = *v;
    }
    let mut eps_x = vec![0.0; d_x];
    let mut eps_y = vec![0.0; d_y];
    for t in 1..=t_len {
        stream.fill(&mut eps_x);
        let noise = lq.matvec(&eps_x);
        let fx = spec.f.matvec(&x);
        for i in 0..d_x {
            x[i] = fx[i] + noise[i];
            states[(t, i)] = x[i];
        }
        stream.fill(&mut eps_y);
        let obs_noise = lr.matvec(&eps_y);
        let cx = spec.c.matvec(&x);
        for i in 0..d_y {
            obs[(t - 1, i)] = cx[i] + obs_noise[i];
        }
    }
    Trajectory::new(obs, None, Some(states))
}

/// Forward-pass output: beliefs over `x_0..x_T` given the data seen so far,
/// the one-step predictive beliefs, and the total data log-likelihood.
#[derive(Debug, Clone)]
pub struct KalmanOutput {
    /// `filtered[t] = p(x_t | y_{1:t})`; index 0 is the initial belief.
    pub filtered: Vec<GaussianBelief>,
    /// `predicted[t] = p(x_{t+1} | y_{1:t})` for `t = 0..T-1`.
    pub predicted: Vec<GaussianBelief>,
    /// `log p(y_{1:T})` accumulated from the innovation densities.
    pub loglik: f64,
}

/// Standard Kalman predict/update recursion over the observation rows.
pub fn kalman_filter(spec: &LgssmSpec, y: &Mat<f64>) -> Result<KalmanOutput, ModelError> {
    let d_x = spec.d_x();
    let d_y = spec.d_y();
    if y.cols() != d_y {
        return Err(ModelError::contract(format!(
            "kalman_filter: observations have {} columns, spec emits {}",
            y.cols(),
            d_y
        )));
    }
    let t_len = y.rows();
    let mut filtered = Vec::with_capacity(t_len + 1);
    let mut predicted = Vec::with_capacity(t_len);
    let mut loglik = 0.0;

    let mut mean = spec.x0.clone();
    let mut cov = spec.x0_cov.clone();
    filtered.push(GaussianBelief::new(mean.clone(), cov.clone())?);

    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    for t in 0..t_len {
        // Predict.
        let mean_pred = spec.f.matvec(&mean);
        let mut cov_pred = spec.f.matmul(&cov).matmul(&spec.f.transpose());
        for i in 0..d_x {
            for j in 0..d_x {
                cov_pred[(i, j)] += spec.q_cov[(i, j)];
            }
        }
        // Symmetrize against drift.
        for i in 0..d_x {
            for j in (i + 1)..d_x {
                let avg = 0.5 * (cov_pred[(i, j)] + cov_pred[(j, i)]);
                cov_pred[(i, j)] = avg;
                cov_pred[(j, i)] = avg;
            }
        }
        predicted.push(GaussianBelief::new(mean_pred.clone(), cov_pred.clone())?);

        // Innovation.
        let y_t = y.row(t);
        let y_pred = spec.c.matvec(&mean_pred);
        let innov: Vec<f64> = (0..d_y).map(|i| y_t[i] - y_pred[i]).collect();
        let pct = cov_pred.matmul(&spec.c.transpose());
        let mut s = spec.c.matmul(&pct);
        for i in 0..d_y {
            for j in 0..d_y {
                s[(i, j)] += spec.r_cov[(i, j)];
            }
        }

        let (ls, _) = cholesky(&s)?;
        let w = solve_lower(&ls, &innov);
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for i in 0..d_y {
            quad += w[i] * w[i];
            logdet += ls[(i, i)].ln();
        }
        loglik += -0.5 * (d_y as f64 * ln_2pi + quad) - logdet;

        // Gain K = P Cᵀ S^{-1}, via S Kᵀ = (P Cᵀ)ᵀ.
        let k = cholesky_solve(&s, &pct.transpose())?.transpose();

        // Joseph-form update keeps the covariance symmetric PSD.
        let kv = k.matvec(&innov);
        for i in 0..d_x {
            mean[i] = mean_pred[i] + kv[i];
        }
        let mut ikc = Mat::<f64>::identity(d_x);
        let kc = k.matmul(&spec.c);
        for i in 0..d_x {
            for j in 0..d_x {
                ikc[(i, j)] -= kc[(i, j)];
            }
        }
        let mut new_cov = ikc.matmul(&cov_pred).matmul(&ikc.transpose());
        let krk = k.matmul(&spec.r_cov).matmul(&k.transpose());
        for i in 0..d_x {
            for j in 0..d_x {
                new_cov[(i, j)] += krk[(i, j)];
            }
        }
        cov = new_cov;
        filtered.push(GaussianBelief::new(mean.clone(), cov.clone())?);
    }

    Ok(KalmanOutput {
        filtered,
        predicted,
        loglik,
    })
}

/// Rauch-Tung-Striebel backward pass. Returns smoothed beliefs over
/// `x_0..x_T`, aligned with `KalmanOutput::filtered`.
pub fn rts_smoother(
    spec: &LgssmSpec,
    filter: &KalmanOutput,
) -> Result<Vec<GaussianBelief>, ModelError> {
    let t_len = filter.predicted.len();
    if filter.filtered.len() != t_len + 1 {
        return Err(ModelError::contract(
            "rts_smoother: filter output is inconsistent",
        ));
    }
    let d_x = spec.d_x();
    let mut smoothed: Vec<GaussianBelief> = Vec::with_capacity(t_len + 1);
    smoothed.push(filter.filtered[t_len].clone());

    for t in (0..t_len).rev() {
        let filt = &filter.filtered[t];
        let pred = &filter.predicted[t];
        let next = smoothed.last().unwrap();

        // G = P_t Fᵀ P_pred^{-1}, via P_pred Gᵀ = F P_tᵀ.
        let fpt = spec.f.matmul(filt.cov()).transpose();
        let g = cholesky_solve(pred.cov(), &fpt)?.transpose();

        let diff_mean: Vec<f64> = (0..d_x)
            .map(|i| next.mean()[i] - pred.mean()[i])
            .collect();
        let corr = g.matvec(&diff_mean);
        let mean: Vec<f64> = (0..d_x).map(|i| filt.mean()[i] + corr[i]).collect();

        let mut diff_cov = next.cov().clone();
        for i in 0..d_x {
            for j in 0..d_x {
                diff_cov[(i, j)] -= pred.cov()[(i, j)];
            }
        }
        let gc = g.matmul(&diff_cov).matmul(&g.transpose());
        let mut cov = filt.cov().clone();
        for i in 0..d_x {
            for j in 0..d_x {
                cov[(i, j)] += gc[(i, j)];
            }
        }
        for i in 0..d_x {
            for j in (i + 1)..d_x {
                let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = avg;
                cov[(j, i)] = avg;
            }
        }
        smoothed.push(GaussianBelief::new(mean, cov)?);
    }
    smoothed.reverse();
    Ok(smoothed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::kl_gaussian;

    fn scalar_spec(f: f64, q: f64, r: f64, x0: f64, p0: f64) -> LgssmSpec {
        LgssmSpec {
            f: Mat::from_vec(1, 1, vec![f]),
            c: Mat::from_vec(1, 1, vec![1.0]),
            q_cov: Mat::from_vec(1, 1, vec![q]),
            r_cov: Mat::from_vec(1, 1, vec![r]),
            x0: vec![x0],
            x0_cov: Mat::from_vec(1, 1, vec![p0]),
        }
    }

    #[test]
    fn noiseless_identity_dynamics_hold_still() {
        let spec = LgssmSpec {
            f: Mat::identity(2),
            c: Mat::identity(2),
            q_cov: Mat::zeros(2, 2),
            r_cov: Mat::zeros(2, 2),
            x0: vec![0.7, -0.2],
            x0_cov: Mat::zeros(2, 2),
        };
        let traj = lgssm_generate(&spec, 5, 3).unwrap();
        let states = traj.true_states.as_ref().unwrap();
        for t in 0..=5 {
            assert!((states[(t, 0)] - 0.7).abs() < 1e-14);
            assert!((states[(t, 1)] + 0.2).abs() < 1e-14);
        }
    }

    #[test]
    fn car_model_advances_positions_by_velocity_without_noise() {
        let spec = car_tracking_spec(&[0.0; 4], &[0.0; 2]);
        let traj = lgssm_generate(&spec, 4, 1).unwrap();
        let states = traj.true_states.as_ref().unwrap();
        for t in 0..=4 {
            let tf = t as f64;
            assert!((states[(t, 0)] - tf).abs() < 1e-12); // position 1 advances +1 per step
            assert!((states[(t, 1)] + tf).abs() < 1e-12); // position 2 advances -1 per step
            assert!((states[(t, 2)] - 1.0).abs() < 1e-12);
            assert!((states[(t, 3)] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let spec = car_tracking_spec(&[0.01, 0.01, 0.1, 0.1], &[0.1, 0.1]);
        let a = lgssm_generate(&spec, 20, 9).unwrap();
        let b = lgssm_generate(&spec, 20, 9).unwrap();
        assert_eq!(a.observations, b.observations);
        assert_eq!(a.true_states, b.true_states);
    }

    #[test]
    fn conjugate_scalar_update() {
        // Static model, prior N(0,1), unit observation noise, y = 1:
        // posterior N(0.5, 0.5).
        let spec = scalar_spec(1.0, 0.0, 1.0, 0.0, 1.0);
        let y = Mat::from_vec(1, 1, vec![1.0]);
        let out = kalman_filter(&spec, &y).unwrap();
        let post = &out.filtered[1];
        assert!((post.mean()[0] - 0.5).abs() < 1e-12);
        assert!((post.cov()[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn huge_noise_observation_is_uninformative() {
        let spec = scalar_spec(1.0, 0.0, 1e12, 0.0, 1.0);
        let y = Mat::from_vec(1, 1, vec![5.0]);
        let out = kalman_filter(&spec, &y).unwrap();
        let prior = GaussianBelief::new(vec![0.0], Mat::from_vec(1, 1, vec![1.0])).unwrap();
        let kl = kl_gaussian(&out.filtered[1], &prior).unwrap();
        assert!(kl < 1e-6, "KL(post || prior) = {kl}");
    }

    /// Brute-force oracle: joint Gaussian over (x0..xT, y1..yk) conditioned
    /// on the observations by direct dense conditioning.
    fn brute_force_conditioning(
        spec: &LgssmSpec,
        y: &[f64],
        condition_on: usize,
    ) -> Vec<(f64, f64)> {
        let f = spec.f[(0, 0)];
        let q = spec.q_cov[(0, 0)];
        let r = spec.r_cov[(0, 0)];
        let p0 = spec.x0_cov[(0, 0)];
        let t = y.len();
        let nx = t + 1;

        let mut mean_x = vec![spec.x0[0]; nx];
        for i in 1..nx {
            mean_x[i] = f * mean_x[i - 1];
        }
        let mut cov_x = Mat::zeros(nx, nx);
        cov_x[(0, 0)] = p0;
        for i in 1..nx {
            cov_x[(i, i)] = f * f * cov_x[(i - 1, i - 1)] + q;
            for j in 0..i {
                cov_x[(i, j)] = f * cov_x[(i - 1, j)];
                cov_x[(j, i)] = cov_x[(i, j)];
            }
        }
        // Joint with observations y_i = x_i + e_i for i = 1..=condition_on.
        let n = nx + condition_on;
        let mut joint = Mat::zeros(n, n);
        let mut mean = vec![0.0; n];
        for i in 0..nx {
            mean[i] = mean_x[i];
            for j in 0..nx {
                joint[(i, j)] = cov_x[(i, j)];
            }
        }
        for a in 0..condition_on {
            let ya = nx + a;
            mean[ya] = mean_x[a + 1];
            joint[(ya, ya)] = cov_x[(a + 1, a + 1)] + r;
            for i in 0..nx {
                joint[(ya, i)] = cov_x[(a + 1, i)];
                joint[(i, ya)] = cov_x[(i, a + 1)];
            }
            for b in 0..a {
                let yb = nx + b;
                joint[(ya, yb)] = cov_x[(a + 1, b + 1)];
                joint[(yb, ya)] = joint[(ya, yb)];
            }
        }
        // Condition the x block on the y block.
        let syy = Mat::from_fn(condition_on, condition_on, |i, j| joint[(nx + i, nx + j)]);
        let sxy = Mat::from_fn(nx, condition_on, |i, j| joint[(i, nx + j)]);
        let resid = Mat::from_fn(condition_on, 1, |i, _| y[i] - mean[nx + i]);
        let w = cholesky_solve(&syy, &resid).unwrap();
        let gain = cholesky_solve(&syy, &sxy.transpose()).unwrap();
        (0..nx)
            .map(|i| {
                let mut m = mean[i];
                for k in 0..condition_on {
                    m += sxy[(i, k)] * w[(k, 0)];
                }
                let mut v = joint[(i, i)];
                for k in 0..condition_on {
                    v -= sxy[(i, k)] * gain[(k, i)];
                }
                (m, v)
            })
            .collect()
    }

    #[test]
    fn filter_and_smoother_match_brute_force_joint_conditioning() {
        let spec = scalar_spec(0.8, 0.3, 0.5, 0.4, 1.2);
        let y = [1.0, -0.5, 0.7];
        let ym = Mat::from_fn(3, 1, |i, _| y[i]);
        let out = kalman_filter(&spec, &ym).unwrap();

        for t in 1..=3 {
            let oracle = brute_force_conditioning(&spec, &y[..t], t);
            let (want_m, want_v) = oracle[t];
            let got = &out.filtered[t];
            assert!((got.mean()[0] - want_m).abs() < 1e-10, "t = {t}");
            assert!((got.cov()[(0, 0)] - want_v).abs() < 1e-10, "t = {t}");
        }

        let smoothed = rts_smoother(&spec, &out).unwrap();
        let oracle = brute_force_conditioning(&spec, &y, 3);
        for t in 0..=3 {
            let (want_m, want_v) = oracle[t];
            assert!((smoothed[t].mean()[0] - want_m).abs() < 1e-10, "t = {t}");
            assert!(
                (smoothed[t].cov()[(0, 0)] - want_v).abs() < 1e-10,
                "t = {t}"
            );
        }
    }

    #[test]
    fn single_step_smoother_equals_filter() {
        let spec = scalar_spec(0.9, 0.2, 0.4, 0.0, 1.0);
        let y = Mat::from_vec(1, 1, vec![0.3]);
        let out = kalman_filter(&spec, &y).unwrap();
        let smoothed = rts_smoother(&spec, &out).unwrap();
        assert!((smoothed[1].mean()[0] - out.filtered[1].mean()[0]).abs() < 1e-14);
        assert!((smoothed[1].cov()[(0, 0)] - out.filtered[1].cov()[(0, 0)]).abs() < 1e-14);
    }

    #[test]
    fn zero_process_noise_smoother_back_propagates_deterministically() {
        // With Q = 0 and invertible F the chain is x_t = F x_{t-1} exactly,
        // so smoothed means satisfy m_{t-1} = m_t / F.
        let spec = scalar_spec(0.7, 0.0, 0.3, 0.5, 1.0);
        let y = Mat::from_vec(2, 1, vec![0.6, 0.1]);
        let out = kalman_filter(&spec, &y).unwrap();
        let smoothed = rts_smoother(&spec, &out).unwrap();
        for t in 1..=2 {
            let expect = smoothed[t].mean()[0] / 0.7;
            assert!(
                (smoothed[t - 1].mean()[0] - expect).abs() < 1e-9,
                "t = {t}"
            );
        }
    }

    #[test]
    fn smoothing_never_increases_variance() {
        let spec = car_tracking_spec(&[0.01, 0.01, 0.1, 0.1], &[0.1, 0.1]);
        let traj = lgssm_generate(&spec, 40, 11).unwrap();
        let out = kalman_filter(&spec, &traj.observations).unwrap();
        let smoothed = rts_smoother(&spec, &out).unwrap();
        for t in 0..smoothed.len() {
            for d in 0..4 {
                assert!(
                    smoothed[t].cov()[(d, d)] <= out.filtered[t].cov()[(d, d)] + 1e-10,
                    "t = {t}, dim = {d}"
                );
            }
        }
    }

    #[test]
    fn likelihood_prefers_generating_model() {
        let spec = car_tracking_spec(&[0.01, 0.01, 0.1, 0.1], &[0.1, 0.1]);
        let mut perturbed = spec.clone();
        for i in 0..4 {
            perturbed.q_cov[(i, i)] *= 10.0;
        }
        let mut wins = 0;
        for seed in 0..20 {
            let traj = lgssm_generate(&spec, 60, 100 + seed).unwrap();
            let good = kalman_filter(&spec, &traj.observations).unwrap().loglik;
            let bad = kalman_filter(&perturbed, &traj.observations)
                .unwrap()
                .loglik;
            if good > bad {
                wins += 1;
            }
        }
        assert!(wins > 10, "generating model won only {wins}/20 runs");
    }

    #[test]
    fn generated_residual_covariance_matches_process_noise() {
        let spec = car_tracking_spec(&[0.05, 0.08, 0.1, 0.12], &[0.1, 0.1]);
        let traj = lgssm_generate(&spec, 10_000, 21).unwrap();
        let states = traj.true_states.as_ref().unwrap();
        let t_len = 10_000;
        let mut cov = [0.0; 4];
        for t in 1..=t_len {
            let prev: Vec<f64> = (0..4).map(|i| states[(t - 1, i)]).collect();
            let pred = spec.f.matvec(&prev);
            for i in 0..4 {
                let r = states[(t, i)] - pred[i];
                cov[i] += r * r;
            }
        }
        for i in 0..4 {
            cov[i] /= t_len as f64;
            let want = spec.q_cov[(i, i)];
            assert!(
                (cov[i] - want).abs() <= 0.1 * want,
                "dim {i}: {} vs {want}",
                cov[i]
            );
        }
    }
}
