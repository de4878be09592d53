//! The output-dependent GPSSM itself: parameter set, recognition of the
//! initial state, the one-step conditional `q(x_t | x_{t-1})`, recursive
//! reparameterized state sampling, the Monte-Carlo evidence lower bound,
//! and free-running forecasts.
//!
//! Everything on the training path is generic over [`Scalar`] so the exact
//! same arithmetic runs in plain `f64` or on an autodiff tape.

use crate::ad::Scalar;
use crate::error::ModelError;
use crate::gaussian::{kl_gaussian_factors, sample_from_factor, GaussianBelief};
use crate::gp::{InducingSet, KernelParams, SparsePredictor};
use crate::linalg::{cholesky, Mat};
use crate::lmc::Coregionalization;

/// Variance of the near-point mass used when the initial state is known.
pub const KNOWN_X0_VAR: f64 = 1e-8;

/// How the variational posterior over the initial state is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum X0Mode {
    /// The initial state is given; `q(x0)` is a near-point mass at it and
    /// contributes no KL term.
    Known(Vec<f64>),
    /// `q(x0)` comes from the recognition network applied to the first
    /// observations.
    Recognized,
}

/// Two-layer tanh network mapping the first `window` observations to the
/// mean and log-variances of `q(x0)`.
#[derive(Debug, Clone)]
pub struct RecognitionNet<T = f64> {
    pub window: usize,
    pub hidden: usize,
    pub d_y: usize,
    pub d_x: usize,
    /// `hidden x (window * d_y)`.
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    /// `2 d_x x hidden`: first `d_x` rows are the mean head, the rest the
    /// log-variance head.
    pub w2: Mat<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> RecognitionNet<T> {
    /// All-zero network: outputs `N(0, I)` regardless of the input.
    pub fn zeros(d_y: usize, d_x: usize, window: usize, hidden: usize) -> Self {
        RecognitionNet {
            window,
            hidden,
            d_y,
            d_x,
            w1: Mat::zeros(hidden, window * d_y),
            b1: vec![T::zero(); hidden],
            w2: Mat::zeros(2 * d_x, hidden),
            b2: vec![T::zero(); 2 * d_x],
        }
    }

    /// Mean and diagonal variance of `q(x0)` from the first `window`
    /// observation rows.
    pub fn forward(&self, obs: &Mat<f64>) -> Result<(Vec<T>, Vec<T>), ModelError> {
        if obs.rows() < self.window {
            return Err(ModelError::contract(format!(
                "recognition window is {} but trajectory has only {} steps",
                self.window,
                obs.rows()
            )));
        }
        if obs.cols() != self.d_y {
            return Err(ModelError::contract(
                "recognition input dimension mismatch",
            ));
        }
        let mut hidden = Vec::with_capacity(self.hidden);
        for h in 0..self.hidden {
            let mut acc = self.b1[h];
            for t in 0..self.window {
                for j in 0..self.d_y {
                    acc = acc + self.w1[(h, t * self.d_y + j)] * obs[(t, j)];
                }
            }
            hidden.push(acc.tanh());
        }
        let mut mean = Vec::with_capacity(self.d_x);
        let mut var = Vec::with_capacity(self.d_x);
        for d in 0..self.d_x {
            let mut m_acc = self.b2[d];
            let mut v_acc = self.b2[self.d_x + d];
            for h in 0..self.hidden {
                m_acc = m_acc + self.w2[(d, h)] * hidden[h];
                v_acc = v_acc + self.w2[(self.d_x + d, h)] * hidden[h];
            }
            mean.push(m_acc);
            var.push(v_acc.exp());
        }
        Ok((mean, var))
    }
}

/// One observed sequence: `y_{1:T}` rows, optional exogenous controls
/// aligned row-for-row with the observations, and (for synthetic data)
/// the true latent states `x_{0:T}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Mat<f64>,
    pub controls: Option<Mat<f64>>,
    pub true_states: Option<Mat<f64>>,
}

impl Trajectory {
    pub fn new(
        observations: Mat<f64>,
        controls: Option<Mat<f64>>,
        true_states: Option<Mat<f64>>,
    ) -> Result<Self, ModelError> {
        let t_len = observations.rows();
        if t_len < 1 {
            return Err(ModelError::contract("trajectory must have T >= 1"));
        }
        if observations.data().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::contract(
                "trajectory contains non-finite observations (missing data is unsupported)",
            ));
        }
        if let Some(c) = &controls {
            if c.rows() != t_len {
                return Err(ModelError::contract(format!(
                    "controls have {} rows, observations {t_len}",
                    c.rows()
                )));
            }
            if c.data().iter().any(|v| !v.is_finite()) {
                return Err(ModelError::contract("controls contain non-finite values"));
            }
        }
        if let Some(x) = &true_states {
            if x.rows() != t_len + 1 {
                return Err(ModelError::contract(format!(
                    "true states have {} rows, expected T + 1 = {}",
                    x.rows(),
                    t_len + 1
                )));
            }
        }
        Ok(Trajectory {
            observations,
            controls,
            true_states,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_y(&self) -> usize {
        self.observations.cols()
    }

    pub fn d_c(&self) -> usize {
        self.controls.as_ref().map_or(0, Mat::cols)
    }
}

/// The full trainable parameter set plus the fixed emission.
#[derive(Debug, Clone)]
pub struct GpssmParams<T = f64> {
    pub coreg: Coregionalization<T>,
    /// When false the mixing matrix is frozen (the output-independent
    /// baseline keeps `A = I`).
    pub train_coreg: bool,
    pub kernels: Vec<KernelParams<T>>,
    pub inducing: InducingSet<T>,
    /// Diagonal of the process-noise covariance, strictly positive.
    pub process_noise: Vec<T>,
    /// Diagonal of the observation-noise covariance, strictly positive.
    pub obs_noise: Vec<T>,
    /// Fixed emission `C = [I, 0]`; never trained.
    pub emission: Mat<f64>,
    pub recognition: Option<RecognitionNet<T>>,
    pub x0_mode: X0Mode,
}

/// The fixed emission matrix `[I_{d_y}, 0]`.
pub fn emission_matrix(d_y: usize, d_x: usize) -> Mat<f64> {
    assert!(d_y <= d_x, "emission requires d_y <= d_x");
    Mat::from_fn(d_y, d_x, |r, c| if r == c { 1.0 } else { 0.0 })
}

impl<T: Scalar> GpssmParams<T> {
    pub fn d_x(&self) -> usize {
        self.coreg.num_outputs()
    }

    pub fn d_y(&self) -> usize {
        self.obs_noise.len()
    }

    pub fn d_c(&self) -> usize {
        self.gp_input_dim() - self.d_x()
    }

    pub fn gp_input_dim(&self) -> usize {
        self.inducing.input_dim()
    }

    pub fn num_latents(&self) -> usize {
        self.coreg.num_latents()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.num_points()
    }

    /// Checks every structural invariant of the parameter set.
    pub fn validate(&self) -> Result<(), ModelError> {
        let d_x = self.d_x();
        let d_y = self.d_y();
        let q = self.num_latents();
        if d_y > d_x {
            return Err(ModelError::contract("d_y must not exceed d_x"));
        }
        if self.kernels.len() != q {
            return Err(ModelError::contract(
                "one kernel per latent GP is required",
            ));
        }
        let d_in = self.gp_input_dim();
        if self.kernels.iter().any(|k| k.input_dim() != d_in) {
            return Err(ModelError::contract(
                "kernel input dimension must equal the GP input dimension",
            ));
        }
        if self.inducing.num_gps() != q {
            return Err(ModelError::contract(
                "inducing state must cover every latent GP",
            ));
        }
        if d_in < d_x {
            return Err(ModelError::contract(
                "GP input dimension cannot be below d_x",
            ));
        }
        self.inducing.validate()?;
        if self.process_noise.len() != d_x
            || self.process_noise.iter().any(|v| !(v.value() > 0.0))
        {
            return Err(ModelError::contract(
                "process noise must have d_x strictly positive entries",
            ));
        }
        if self.obs_noise.iter().any(|v| !(v.value() > 0.0)) {
            return Err(ModelError::contract(
                "observation noise must be strictly positive",
            ));
        }
        let want_c = emission_matrix(d_y, d_x);
        if self.emission != want_c {
            return Err(ModelError::contract("emission must be exactly [I, 0]"));
        }
        match &self.x0_mode {
            X0Mode::Known(x0) => {
                if x0.len() != d_x {
                    return Err(ModelError::contract("known x0 has wrong dimension"));
                }
            }
            X0Mode::Recognized => {
                let net = self.recognition.as_ref().ok_or_else(|| {
                    ModelError::contract("recognized x0 mode requires a recognition network")
                })?;
                if net.d_x != d_x || net.d_y != d_y {
                    return Err(ModelError::contract("recognition network shape mismatch"));
                }
            }
        }
        Ok(())
    }

    /// Ensures a trajectory is dimensionally compatible with this model.
    pub fn check_compatible(&self, traj: &Trajectory) -> Result<(), ModelError> {
        if traj.d_y() != self.d_y() {
            return Err(ModelError::contract(format!(
                "trajectory emits {} channels, model expects {}",
                traj.d_y(),
                self.d_y()
            )));
        }
        if traj.d_c() != self.d_c() {
            return Err(ModelError::contract(format!(
                "trajectory has {} control channels, model expects {}",
                traj.d_c(),
                self.d_c()
            )));
        }
        Ok(())
    }
}

/// `C x` with the fixed f64 emission against any scalar type.
fn emit<T: Scalar>(c: &Mat<f64>, x: &[T]) -> Vec<T> {
    (0..c.rows())
        .map(|i| {
            let mut acc = T::zero();
            for j in 0..c.cols() {
                if c[(i, j)] != 0.0 {
                    acc = acc + x[j] * c[(i, j)];
                }
            }
            acc
        })
        .collect()
}

/// Log-density of the diagonal-Gaussian emission `N(y | C x, R)`.
pub fn emission_loglik<T: Scalar>(
    params: &GpssmParams<T>,
    x: &[T],
    y: &[f64],
) -> Result<T, ModelError> {
    if x.len() != params.d_x() || y.len() != params.d_y() {
        return Err(ModelError::contract("emission_loglik dimension mismatch"));
    }
    let cx = emit(&params.emission, x);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut ll = T::zero();
    for i in 0..params.d_y() {
        let r = params.obs_noise[i];
        let resid = cx[i] - y[i];
        ll = ll - (r.ln() + resid.sq() / r + ln_2pi) * 0.5;
    }
    Ok(ll)
}

/// The variational belief over the initial state. In known-x0 mode the
/// recognition network is bypassed entirely and the belief is a near-point
/// mass `N(x0, 1e-8 I)`.
pub fn recognize_x0(
    params: &GpssmParams<f64>,
    traj: &Trajectory,
) -> Result<GaussianBelief, ModelError> {
    let (mean, var) = initial_moments(params, traj)?;
    let n = mean.len();
    let cov = Mat::from_fn(n, n, |r, c| if r == c { var[r] } else { 0.0 });
    GaussianBelief::new(mean, cov)
}

/// Mean and diagonal variance of `q(x0)`, generic over the scalar.
pub fn initial_moments<T: Scalar>(
    params: &GpssmParams<T>,
    traj: &Trajectory,
) -> Result<(Vec<T>, Vec<T>), ModelError> {
    match &params.x0_mode {
        X0Mode::Known(x0) => Ok((
            x0.iter().map(|&v| T::konst(v)).collect(),
            vec![T::konst(KNOWN_X0_VAR); x0.len()],
        )),
        X0Mode::Recognized => {
            let net = params
                .recognition
                .as_ref()
                .ok_or_else(|| ModelError::contract("missing recognition network"))?;
            net.forward(&traj.observations)
        }
    }
}

/// Evaluation context holding the per-GP precomputations for repeated
/// one-step conditionals under fixed parameters.
pub struct ModelEval<'p, T: Scalar> {
    pub params: &'p GpssmParams<T>,
    predictor: SparsePredictor<T>,
    /// Row-products `a_i ⊙ a_j` of the mixing matrix for the upper triangle
    /// `(i, j), i <= j`, hoisted out of the per-step covariance assembly.
    mix_outer: Vec<Vec<T>>,
}

/// The three pieces of the evidence lower bound.
#[derive(Debug, Clone, Copy)]
pub struct ElboParts<T = f64> {
    /// Monte-Carlo estimate of the summed expected emission log-likelihood.
    pub expectation: T,
    /// `KL(q(u) || p(u))`, summed over the Q latent GPs.
    pub kl_u: T,
    /// `KL(q(x0) || p(x0))`; zero in known-x0 mode.
    pub kl_x0: T,
}

impl<T: Scalar> ElboParts<T> {
    pub fn total(&self) -> T {
        self.expectation - self.kl_u - self.kl_x0
    }
}

impl<'p, T: Scalar> ModelEval<'p, T> {
    pub fn new(params: &'p GpssmParams<T>) -> Result<Self, ModelError> {
        let predictor = SparsePredictor::build(&params.kernels, &params.inducing)?;
        let a = params.coreg.matrix();
        let (d_x, q) = (params.d_x(), params.num_latents());
        let mut mix_outer = Vec::with_capacity(d_x * (d_x + 1) / 2);
        for i in 0..d_x {
            for j in i..d_x {
                mix_outer.push((0..q).map(|k| a[(i, k)] * a[(j, k)]).collect());
            }
        }
        Ok(ModelEval {
            params,
            predictor,
            mix_outer,
        })
    }

    fn outer_index(&self, i: usize, j: usize) -> usize {
        // Upper-triangle row-major offset for i <= j.
        let d_x = self.params.d_x();
        i * d_x - i * (i + 1) / 2 + j
    }

    /// Moments of `q(x_t | x_{t-1})`: per-GP sparse predictives assembled
    /// into a diagonal latent covariance, mixed through `A`, plus the
    /// diagonal process noise.
    pub fn step_moments(
        &self,
        x_prev: &[T],
        control: Option<&[f64]>,
    ) -> Result<(Vec<T>, Mat<T>), ModelError> {
        let params = self.params;
        let d_x = params.d_x();
        let d_c = params.d_c();
        if x_prev.len() != d_x {
            return Err(ModelError::contract("step input has wrong state dimension"));
        }
        if x_prev.iter().any(|v| !v.value().is_finite()) {
            return Err(ModelError::NonFinite {
                context: "step input state",
                time_index: 0,
            });
        }
        let mut input: Vec<T> = Vec::with_capacity(params.gp_input_dim());
        input.extend_from_slice(x_prev);
        match (d_c, control) {
            (0, None) => {}
            (0, Some(_)) => {
                return Err(ModelError::contract(
                    "model has no control channel but a control was supplied",
                ))
            }
            (_, Some(c)) if c.len() == d_c => {
                input.extend(c.iter().map(|&v| T::konst(v)));
            }
            _ => {
                return Err(ModelError::contract(
                    "model expects a control input of the configured dimension",
                ))
            }
        }

        let q = params.num_latents();
        let mut h_mean = Vec::with_capacity(q);
        let mut h_var = Vec::with_capacity(q);
        for qi in 0..q {
            let (m, v) = self.predictor.predict(qi, &input)?;
            h_mean.push(m);
            h_var.push(v);
        }
        // Mix through A (same arithmetic as `mix_moments`, with the row
        // products hoisted) and add the diagonal process noise.
        let a = params.coreg.matrix();
        let mean: Vec<T> = (0..d_x).map(|d| T::dot(a.row(d), &h_mean)).collect();
        let mut cov = Mat::zeros(d_x, d_x);
        for i in 0..d_x {
            for j in i..d_x {
                let v = T::dot(&self.mix_outer[self.outer_index(i, j)], &h_var);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
            cov[(i, i)] = cov[(i, i)] + params.process_noise[i];
        }
        if mean.iter().any(|v| !v.value().is_finite()) {
            return Err(ModelError::NonFinite {
                context: "step mean",
                time_index: 0,
            });
        }
        Ok((mean, cov))
    }

    /// Recursive reparameterized rollout. `eps` supplies `(T+1) * d_x`
    /// standard-normal values: one block for `x0`, then one per step.
    /// Returns the sampled states `x_{0:T}` and, when `score` is set, the
    /// summed emission log-likelihood along the path.
    pub fn rollout(
        &self,
        traj: &Trajectory,
        eps: &[f64],
        score: bool,
    ) -> Result<(Vec<Vec<T>>, T), ModelError> {
        let params = self.params;
        let d_x = params.d_x();
        let t_len = traj.len();
        if eps.len() != (t_len + 1) * d_x {
            return Err(ModelError::contract(format!(
                "rollout needs {} noise values, got {}",
                (t_len + 1) * d_x,
                eps.len()
            )));
        }
        params.check_compatible(traj)?;

        let (m0, v0) = initial_moments(params, traj)?;
        let mut x: Vec<T> = (0..d_x).map(|i| m0[i] + v0[i].sqrt() * eps[i]).collect();
        let mut path = Vec::with_capacity(t_len + 1);
        path.push(x.clone());
        let mut loglik = T::zero();

        for t in 1..=t_len {
            let control = traj.controls.as_ref().map(|c| c.row(t - 1));
            let (mean, cov) = self.step_moments(&x, control).map_err(|e| at_time(e, t))?;
            let (l, _) = cholesky(&cov).map_err(|e| at_time(e.into(), t))?;
            x = sample_from_factor(&mean, &l, &eps[t * d_x..(t + 1) * d_x]);
            if x.iter().any(|v| !v.value().is_finite()) {
                return Err(ModelError::NonFinite {
                    context: "sampled state",
                    time_index: t,
                });
            }
            if score {
                loglik = loglik + emission_loglik(params, &x, traj.observations.row(t - 1))?;
            }
            path.push(x.clone());
        }
        Ok((path, loglik))
    }

    /// `KL(q(u) || p(u))` summed over the latent GPs (analytic).
    pub fn kl_u(&self) -> T {
        let params = self.params;
        let m = params.num_inducing();
        let zero_mean = vec![T::zero(); m];
        let mut total = T::zero();
        for q in 0..params.num_latents() {
            total = total
                + kl_gaussian_factors(
                    &params.inducing.means[q],
                    &params.inducing.factors[q],
                    &zero_mean,
                    self.predictor.prior_chol(q),
                );
        }
        total
    }

    /// `KL(q(x0) || N(0, I))`; exactly zero in known-x0 mode.
    pub fn kl_x0(&self, traj: &Trajectory) -> Result<T, ModelError> {
        match &self.params.x0_mode {
            X0Mode::Known(_) => Ok(T::zero()),
            X0Mode::Recognized => {
                let (mean, var) = initial_moments(self.params, traj)?;
                let mut acc = T::zero();
                for i in 0..mean.len() {
                    acc = acc + var[i] + mean[i].sq() - var[i].ln() - 1.0;
                }
                Ok(acc * 0.5)
            }
        }
    }

    /// All three ELBO pieces for the supplied noise batch.
    pub fn elbo_parts(
        &self,
        traj: &Trajectory,
        n_samples: usize,
        eps: &[f64],
    ) -> Result<ElboParts<T>, ModelError> {
        if n_samples < 1 {
            return Err(ModelError::contract("elbo needs n_samples >= 1"));
        }
        let block = (traj.len() + 1) * self.params.d_x();
        if eps.len() != n_samples * block {
            return Err(ModelError::contract(format!(
                "elbo needs {} noise values, got {}",
                n_samples * block,
                eps.len()
            )));
        }
        let mut expectation = T::zero();
        for s in 0..n_samples {
            let (_, ll) = self.rollout(traj, &eps[s * block..(s + 1) * block], true)?;
            expectation = expectation + ll;
        }
        expectation = expectation / n_samples as f64;
        Ok(ElboParts {
            expectation,
            kl_u: self.kl_u(),
            kl_x0: self.kl_x0(traj)?,
        })
    }
}

fn at_time(e: ModelError, time_index: usize) -> ModelError {
    match e {
        ModelError::NonFinite { context, .. } => ModelError::NonFinite {
            context,
            time_index,
        },
        other => other,
    }
}

/// One-step conditional `q(x_t | x_{t-1}) = N(A m_h, A S_h Aᵀ + Q)` as a
/// standalone operation. For repeated stepping build a [`ModelEval`] once.
pub fn conditional_step(
    params: &GpssmParams<f64>,
    x_prev: &[f64],
    control: Option<&[f64]>,
) -> Result<GaussianBelief, ModelError> {
    let eval = ModelEval::new(params)?;
    let (mean, cov) = eval.step_moments(x_prev, control)?;
    GaussianBelief::new(mean, cov)
}

/// Samples a full state path `x_{0:T}` from the variational model, driven
/// entirely by the supplied noise. Deterministic in `(params, eps)`.
pub fn sample_states(
    params: &GpssmParams<f64>,
    traj: &Trajectory,
    eps: &[f64],
) -> Result<Mat<f64>, ModelError> {
    let eval = ModelEval::new(params)?;
    let (path, _) = eval.rollout(traj, eps, false)?;
    Ok(Mat::from_fn(path.len(), params.d_x(), |t, d| path[t][d]))
}

/// The zero-noise rollout: every reparameterization draw set to its mean.
pub fn mean_path(params: &GpssmParams<f64>, traj: &Trajectory) -> Result<Mat<f64>, ModelError> {
    let eps = vec![0.0; (traj.len() + 1) * params.d_x()];
    sample_states(params, traj, &eps)
}

/// Monte-Carlo evidence lower bound for the supplied noise batch
/// (`n_samples` blocks of `(T+1) * d_x` values).
pub fn elbo(
    params: &GpssmParams<f64>,
    traj: &Trajectory,
    n_samples: usize,
    eps: &[f64],
) -> Result<f64, ModelError> {
    Ok(elbo_parts(params, traj, n_samples, eps)?.total())
}

/// As [`elbo`] but exposing the expectation and KL pieces.
pub fn elbo_parts(
    params: &GpssmParams<f64>,
    traj: &Trajectory,
    n_samples: usize,
    eps: &[f64],
) -> Result<ElboParts<f64>, ModelError> {
    let eval = ModelEval::new(params)?;
    eval.elbo_parts(traj, n_samples, eps)
}

/// Free-running point forecast: rolls the mean path to the end of the
/// conditioning segment, then continues `horizon` steps (optionally driven
/// by future controls) and emits `C x_t` at each step.
pub fn forecast(
    params: &GpssmParams<f64>,
    traj: &Trajectory,
    horizon: usize,
    future_controls: Option<&Mat<f64>>,
) -> Result<Mat<f64>, ModelError> {
    if horizon < 1 {
        return Err(ModelError::contract("forecast horizon must be >= 1"));
    }
    match (params.d_c(), future_controls) {
        (0, None) => {}
        (0, Some(_)) => {
            return Err(ModelError::contract(
                "model has no control channel but future controls were supplied",
            ))
        }
        (d_c, Some(c)) if c.cols() == d_c && c.rows() >= horizon => {}
        _ => {
            return Err(ModelError::contract(
                "forecast requires future controls covering the horizon",
            ))
        }
    }

    let eval = ModelEval::new(params)?;
    let path = mean_path(params, traj)?;
    let mut x: Vec<f64> = path.row(traj.len()).to_vec();
    let mut out = Mat::zeros(horizon, params.d_y());
    for h in 0..horizon {
        let control = future_controls.map(|c| c.row(h));
        let (mean, _) = eval.step_moments(&x, control)?;
        x = mean;
        let y = emit(&params.emission, &x);
        for (j, v) in y.iter().enumerate() {
            out[(h, j)] = *v;
        }
    }
    Ok(out)
}
