//! Training engine: unconstrained parameter transforms, reverse-mode
//! gradients of the ELBO, Adam ascent, transition pretraining from state
//! pairs, the training loop, and checkpoint (de)serialization.
//!
//! The noise batch is fixed within each optimization step and redrawn
//! between steps, so a step's gradient is the exact gradient of that
//! step's Monte-Carlo objective.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ad::{Scalar, Tape, Var};
use crate::error::ModelError;
use crate::gp::{gp_log_marginal, kernel_matrix, InducingSet, KernelParams};
use crate::linalg::{cholesky, cholesky_solve, Mat};
use crate::lmc::{recover_latent, Coregionalization};
use crate::model::{
    emission_matrix, ElboParts, GpssmParams, ModelEval, RecognitionNet, Trajectory, X0Mode,
};
use crate::rng::NormalStream;

/// Elementwise map between stored (unconstrained) and model space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Stored value is the model value.
    Identity,
    /// Stored value is `ln(model value)`; keeps the quantity positive.
    Log,
}

/// One named block of the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub transform: Transform,
}

/// The full trainable parameter vector in unconstrained space plus the
/// descriptor mapping its blocks back onto the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl FlatParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Name of the segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> &str {
        for seg in &self.segments {
            if i >= seg.offset && i < seg.offset + seg.len {
                return &seg.name;
            }
        }
        "unknown"
    }
}

struct LayoutBuilder {
    segments: Vec<Segment>,
    offset: usize,
}

impl LayoutBuilder {
    fn new() -> Self {
        LayoutBuilder {
            segments: Vec::new(),
            offset: 0,
        }
    }

    fn push(&mut self, name: String, len: usize, transform: Transform) {
        self.segments.push(Segment {
            name,
            offset: self.offset,
            len,
            transform,
        });
        self.offset += len;
    }
}

/// Flattens a parameter set into unconstrained space. Layout order:
/// recognition (if present), inducing inputs, per-GP variational means,
/// per-GP factor log-diagonals and strict lower triangles, per-GP kernel
/// logs, the mixing matrix (if trained), then the two noise diagonals.
pub fn pack(params: &GpssmParams<f64>) -> FlatParams {
    let mut values = Vec::new();
    let mut layout = LayoutBuilder::new();
    let m = params.num_inducing();

    if let Some(net) = &params.recognition {
        let start = values.len();
        values.extend(net.w1.data());
        values.extend(&net.b1);
        values.extend(net.w2.data());
        values.extend(&net.b2);
        layout.push("recognition".into(), values.len() - start, Transform::Identity);
    }

    values.extend(params.inducing.z.data());
    layout.push("inducing_inputs".into(), params.inducing.z.data().len(), Transform::Identity);

    for q in 0..params.num_latents() {
        values.extend(&params.inducing.means[q]);
        layout.push(format!("variational_mean[{q}]"), m, Transform::Identity);
    }
    for q in 0..params.num_latents() {
        let f = &params.inducing.factors[q];
        for i in 0..m {
            values.push(f[(i, i)].ln());
        }
        layout.push(format!("variational_factor_diag[{q}]"), m, Transform::Log);
        let start = values.len();
        for i in 0..m {
            for j in 0..i {
                values.push(f[(i, j)]);
            }
        }
        layout.push(
            format!("variational_factor_lower[{q}]"),
            values.len() - start,
            Transform::Identity,
        );
    }
    for (q, kp) in params.kernels.iter().enumerate() {
        let start = values.len();
        values.push(kp.signal_variance.ln());
        values.extend(kp.lengthscales.iter().map(|l| l.ln()));
        layout.push(format!("kernel[{q}]"), values.len() - start, Transform::Log);
    }
    if params.train_coreg {
        values.extend(params.coreg.matrix().data());
        layout.push(
            "coregionalization".into(),
            params.coreg.matrix().data().len(),
            Transform::Identity,
        );
    }
    values.extend(params.process_noise.iter().map(|v| v.ln()));
    layout.push("process_noise".into(), params.d_x(), Transform::Log);
    values.extend(params.obs_noise.iter().map(|v| v.ln()));
    layout.push("obs_noise".into(), params.d_y(), Transform::Log);

    FlatParams {
        values,
        segments: layout.segments,
    }
}

/// Rebuilds a parameter set from unconstrained values, taking structure
/// (dimensions, modes, the fixed emission) from `template`. Generic so the
/// same code instantiates plain models and tape-tracked ones.
pub fn unpack<T: Scalar>(values: &[T], template: &GpssmParams<f64>) -> GpssmParams<T> {
    let m = template.num_inducing();
    let d_in = template.gp_input_dim();
    let q_count = template.num_latents();
    let mut at = 0;
    let mut take = |n: usize| {
        let slice = &values[at..at + n];
        at += n;
        slice
    };

    let recognition = template.recognition.as_ref().map(|net| {
        let w1_len = net.hidden * net.window * net.d_y;
        let w1 = Mat::from_vec(net.hidden, net.window * net.d_y, take(w1_len).to_vec());
        let b1 = take(net.hidden).to_vec();
        let w2 = Mat::from_vec(2 * net.d_x, net.hidden, take(2 * net.d_x * net.hidden).to_vec());
        let b2 = take(2 * net.d_x).to_vec();
        RecognitionNet {
            window: net.window,
            hidden: net.hidden,
            d_y: net.d_y,
            d_x: net.d_x,
            w1,
            b1,
            w2,
            b2,
        }
    });

    let z = Mat::from_vec(m, d_in, take(m * d_in).to_vec());
    let mut means = Vec::with_capacity(q_count);
    for _ in 0..q_count {
        means.push(take(m).to_vec());
    }
    let mut factors = Vec::with_capacity(q_count);
    for _ in 0..q_count {
        let diag = take(m).to_vec();
        let lower = take(m * (m - 1) / 2).to_vec();
        let mut f = Mat::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in 0..i {
                f[(i, j)] = lower[k];
                k += 1;
            }
            f[(i, i)] = diag[i].exp();
        }
        factors.push(f);
    }
    let kernels: Vec<KernelParams<T>> = (0..q_count)
        .map(|_| {
            let block = take(1 + d_in);
            KernelParams {
                signal_variance: block[0].exp(),
                lengthscales: block[1..].iter().map(|v| v.exp()).collect(),
            }
        })
        .collect();
    let coreg = if template.train_coreg {
        let d_x = template.d_x();
        Coregionalization::new(Mat::from_vec(d_x, q_count, take(d_x * q_count).to_vec()))
            .expect("template has a nonempty mixing matrix")
    } else {
        Coregionalization::new(Mat::from_fn(
            template.d_x(),
            q_count,
            |r, c| T::konst(template.coreg.matrix()[(r, c)]),
        ))
        .expect("template has a nonempty mixing matrix")
    };
    let process_noise: Vec<T> = take(template.d_x()).iter().map(|v| v.exp()).collect();
    let obs_noise: Vec<T> = take(template.d_y()).iter().map(|v| v.exp()).collect();
    debug_assert_eq!(at, values.len(), "flat vector length mismatch");

    GpssmParams {
        coreg,
        train_coreg: template.train_coreg,
        kernels,
        inducing: InducingSet { z, means, factors },
        process_noise,
        obs_noise,
        emission: template.emission.clone(),
        recognition,
        x0_mode: template.x0_mode.clone(),
    }
}

/// Plain-f64 unpack.
pub fn to_params(flat: &FlatParams, template: &GpssmParams<f64>) -> GpssmParams<f64> {
    unpack(&flat.values, template)
}

/// Value and gradient of one ELBO evaluation.
#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub parts: ElboParts<f64>,
    pub grad: Vec<f64>,
}

/// Reusable tapes and adjoint buffers for gradient evaluations.
pub struct GradWorkspace {
    tapes: Vec<Tape>,
    adjoints: Vec<Vec<f64>>,
}

impl Default for GradWorkspace {
    fn default() -> Self {
        GradWorkspace::new()
    }
}

impl GradWorkspace {
    pub fn new() -> Self {
        GradWorkspace {
            tapes: (0..2).map(|_| Tape::new()).collect(),
            adjoints: vec![Vec::new(), Vec::new()],
        }
    }
}

struct ChunkOut {
    ll_sum: f64,
    kl_u: f64,
    kl_x0: f64,
    grad: Vec<f64>,
}

/// Evaluates `sum_{s in range} ll_s / n_samples (- KL terms when asked)` on
/// one tape and backpropagates it.
fn chunk_eval(
    tape: &mut Tape,
    adjoints: &mut Vec<f64>,
    values: &[f64],
    template: &GpssmParams<f64>,
    traj: &Trajectory,
    samples: std::ops::Range<usize>,
    n_samples: usize,
    include_kl: bool,
    eps: &[f64],
) -> Result<ChunkOut, ModelError> {
    if samples.is_empty() && !include_kl {
        return Ok(ChunkOut {
            ll_sum: 0.0,
            kl_u: 0.0,
            kl_x0: 0.0,
            grad: vec![0.0; values.len()],
        });
    }
    tape.clear();
    let vars: Vec<Var> = values.iter().map(|&v| tape.input(v)).collect();
    let params = unpack(&vars, template);
    let eval = ModelEval::new(&params)?;
    let block = (traj.len() + 1) * template.d_x();

    let mut objective = Var::constant(0.0);
    let mut ll_sum = 0.0;
    for s in samples {
        let (_, ll) = eval.rollout(traj, &eps[s * block..(s + 1) * block], true)?;
        ll_sum += ll.value();
        objective = objective + ll / n_samples as f64;
    }
    let (mut kl_u_val, mut kl_x0_val) = (0.0, 0.0);
    if include_kl {
        let kl_u = eval.kl_u();
        let kl_x0 = eval.kl_x0(traj)?;
        kl_u_val = kl_u.value();
        kl_x0_val = kl_x0.value();
        objective = objective - kl_u - kl_x0;
    }
    tape.gradient_into(objective, adjoints);
    let grad = vars.iter().map(|v| v.index_in(adjoints)).collect();
    Ok(ChunkOut {
        ll_sum,
        kl_u: kl_u_val,
        kl_x0: kl_x0_val,
        grad,
    })
}

/// Exact gradient of the (eps-fixed) Monte-Carlo ELBO with respect to the
/// unconstrained parameters, by reverse-mode differentiation.
///
/// The samples are split into two fixed chunks evaluated concurrently on
/// separate tapes; the reduction order is fixed by chunk index, so results
/// are bitwise reproducible regardless of scheduling.
pub fn grad_elbo(
    flat: &FlatParams,
    template: &GpssmParams<f64>,
    traj: &Trajectory,
    n_samples: usize,
    eps: &[f64],
    workspace: &mut GradWorkspace,
) -> Result<ElboGradient, ModelError> {
    if n_samples < 1 {
        return Err(ModelError::contract("grad_elbo needs n_samples >= 1"));
    }
    let block = (traj.len() + 1) * template.d_x();
    if eps.len() != n_samples * block {
        return Err(ModelError::contract(format!(
            "grad_elbo needs {} noise values, got {}",
            n_samples * block,
            eps.len()
        )));
    }
    let split = n_samples.div_ceil(2);
    let (tapes0, tapes1) = workspace.tapes.split_at_mut(1);
    let (adj0, adj1) = workspace.adjoints.split_at_mut(1);

    let (r0, r1) = std::thread::scope(|scope| {
        let handle = scope.spawn(|| {
            chunk_eval(
                &mut tapes1[0],
                &mut adj1[0],
                &flat.values,
                template,
                traj,
                split..n_samples,
                n_samples,
                false,
                eps,
            )
        });
        let r0 = chunk_eval(
            &mut tapes0[0],
            &mut adj0[0],
            &flat.values,
            template,
            traj,
            0..split,
            n_samples,
            true,
            eps,
        );
        (r0, handle.join().expect("gradient worker panicked"))
    });
    let r0 = r0?;
    let r1 = r1?;

    let mut grad = r0.grad;
    for (g, g1) in grad.iter_mut().zip(&r1.grad) {
        *g += g1;
    }
    for (i, g) in grad.iter().enumerate() {
        if !g.is_finite() {
            return Err(ModelError::NonFiniteGradient {
                segment: flat.segment_of(i).to_string(),
            });
        }
    }
    let expectation = (r0.ll_sum + r1.ll_sum) / n_samples as f64;
    Ok(ElboGradient {
        parts: ElboParts {
            expectation,
            kl_u: r0.kl_u,
            kl_x0: r0.kl_x0,
        },
        grad,
    })
}

/// Adam optimizer state (ascent form).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: usize, alpha: f64) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam ascent update.
pub fn adam_step(state: &AdamState, params: &FlatParams, grad: &[f64]) -> (AdamState, FlatParams) {
    assert_eq!(params.values.len(), grad.len(), "gradient length mismatch");
    let mut next = state.clone();
    next.step += 1;
    let t = next.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut out = params.clone();
    for i in 0..grad.len() {
        next.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * grad[i];
        next.second_moment[i] =
            state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = next.first_moment[i] / bc1;
        let v_hat = next.second_moment[i] / bc2;
        out.values[i] += state.alpha * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    (next, out)
}

/// Knobs for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub n_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3000,
            learning_rate: 0.01,
            n_samples: 8,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub expectation: f64,
    pub kl_u: f64,
    pub kl_x0: f64,
    pub wall_ms: f64,
}

/// Full log of a run, including an abort diagnostic when training stopped
/// on a numerical failure (the returned snapshot is the last good one).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub abort: Option<String>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,elbo,expectation,kl_u,kl_x0,wall_ms\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.elbo, r.expectation, r.kl_u, r.kl_x0, r.wall_ms
            ));
        }
        out
    }
}

/// Runs `epochs` Adam ascent steps on the ELBO, drawing a fresh noise
/// batch per step from the run seed. Returns the final parameter snapshot
/// and the full log; on a numerical failure the last good snapshot is
/// returned with the diagnostic recorded in the log.
pub fn train(
    config: &TrainConfig,
    initial: &GpssmParams<f64>,
    traj: &Trajectory,
    seed: u64,
) -> Result<(GpssmParams<f64>, TrainingLog), ModelError> {
    if config.learning_rate <= 0.0 {
        return Err(ModelError::contract("learning rate must be positive"));
    }
    initial.validate()?;
    initial.check_compatible(traj)?;

    let mut flat = pack(initial);
    let mut adam = AdamState::new(flat.len(), config.learning_rate);
    let mut stream = NormalStream::new(seed);
    let mut workspace = GradWorkspace::new();
    let mut log = TrainingLog::default();
    let block = (traj.len() + 1) * initial.d_x();
    let mut eps = vec![0.0; config.n_samples * block];

    for epoch in 0..config.epochs {
        let start = Instant::now();
        stream.fill(&mut eps);
        let result = grad_elbo(&flat, initial, traj, config.n_samples, &eps, &mut workspace);
        match result {
            Ok(ev) if ev.parts.total().is_finite() => {
                let (next_adam, next_flat) = adam_step(&adam, &flat, &ev.grad);
                adam = next_adam;
                flat = next_flat;
                log.epochs.push(EpochRecord {
                    epoch,
                    elbo: ev.parts.total(),
                    expectation: ev.parts.expectation,
                    kl_u: ev.parts.kl_u,
                    kl_x0: ev.parts.kl_x0,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                });
            }
            Ok(_) => {
                log.abort = Some(format!("non-finite ELBO at epoch {epoch}"));
                break;
            }
            Err(e) => {
                log.abort = Some(format!("epoch {epoch}: {e}"));
                break;
            }
        }
    }
    Ok((to_params(&flat, initial), log))
}

/// Default initialization for the non-pretrained path: inducing inputs
/// sampled from the standardized observation range (zero-padded to the
/// state dimension, controls sampled from the control range), prior
/// variational state, unit kernels, near-identity mixing.
#[derive(Debug, Clone)]
pub struct InitConfig {
    pub d_x: usize,
    pub q: usize,
    pub num_inducing: usize,
    pub train_coreg: bool,
    pub use_controls: bool,
    pub x0_mode: X0Mode,
    pub recognition_hidden: usize,
    pub process_noise_init: f64,
    pub obs_noise_init: f64,
}

impl InitConfig {
    pub fn new(d_x: usize, q: usize, num_inducing: usize) -> Self {
        InitConfig {
            d_x,
            q,
            num_inducing,
            train_coreg: true,
            use_controls: false,
            x0_mode: X0Mode::Recognized,
            recognition_hidden: 32,
            process_noise_init: 0.05,
            obs_noise_init: 0.1,
        }
    }
}

pub fn init_params(
    cfg: &InitConfig,
    traj: &Trajectory,
    seed: u64,
) -> Result<GpssmParams<f64>, ModelError> {
    let d_y = traj.d_y();
    let d_c = if cfg.use_controls { traj.d_c() } else { 0 };
    if cfg.use_controls && d_c == 0 {
        return Err(ModelError::contract(
            "controls requested but the trajectory has none",
        ));
    }
    let d_in = cfg.d_x + d_c;
    let mut stream = NormalStream::new(seed);

    // Per-channel ranges of the (standardized) data.
    let mut lo = vec![f64::INFINITY; d_y];
    let mut hi = vec![f64::NEG_INFINITY; d_y];
    for t in 0..traj.len() {
        for j in 0..d_y {
            lo[j] = lo[j].min(traj.observations[(t, j)]);
            hi[j] = hi[j].max(traj.observations[(t, j)]);
        }
    }
    let (mut clo, mut chi) = (vec![f64::INFINITY; d_c], vec![f64::NEG_INFINITY; d_c]);
    if d_c > 0 {
        let controls = traj.controls.as_ref().expect("checked above");
        for t in 0..traj.len() {
            for j in 0..d_c {
                clo[j] = clo[j].min(controls[(t, j)]);
                chi[j] = chi[j].max(controls[(t, j)]);
            }
        }
    }
    let z = Mat::from_fn(cfg.num_inducing, d_in, |_, c| {
        if c < d_y {
            stream.rng().next_range(lo[c], hi[c])
        } else if c < cfg.d_x {
            // Unobserved state dimensions start at zero; a small jitter
            // keeps inducing rows distinct.
            0.01 * stream.next()
        } else {
            let j = c - cfg.d_x;
            stream.rng().next_range(clo[j], chi[j])
        }
    });

    let kernels: Vec<KernelParams<f64>> = (0..cfg.q)
        .map(|_| KernelParams::default_for(d_in))
        .collect();
    let inducing = InducingSet::at_prior(&kernels, z)?;
    let coreg = if cfg.train_coreg {
        Coregionalization::init_near_identity(cfg.d_x, cfg.q, seed ^ 0x5eed)
    } else {
        if cfg.q != cfg.d_x {
            return Err(ModelError::contract(
                "the output-independent baseline requires Q = d_x",
            ));
        }
        Coregionalization::independent_baseline(cfg.d_x)
    };
    let recognition = match cfg.x0_mode {
        X0Mode::Recognized => {
            let window = traj.len().min(10);
            let mut net = RecognitionNet::zeros(d_y, cfg.d_x, window, cfg.recognition_hidden);
            let fan1 = (window * d_y) as f64;
            for h in 0..net.hidden {
                for i in 0..window * d_y {
                    net.w1[(h, i)] = stream.next() / fan1.sqrt();
                }
            }
            let fan2 = net.hidden as f64;
            for o in 0..2 * cfg.d_x {
                for h in 0..net.hidden {
                    net.w2[(o, h)] = stream.next() / fan2.sqrt();
                }
            }
            Some(net)
        }
        X0Mode::Known(_) => None,
    };

    let params = GpssmParams {
        coreg,
        train_coreg: cfg.train_coreg,
        kernels,
        inducing,
        process_noise: vec![cfg.process_noise_init; cfg.d_x],
        obs_noise: vec![cfg.obs_noise_init; d_y],
        emission: emission_matrix(d_y, cfg.d_x),
        recognition,
        x0_mode: cfg.x0_mode.clone(),
    };
    params.validate()?;
    Ok(params)
}

/// Number of Adam steps used to fit kernel hyperparameters during
/// pretraining.
pub const PRETRAIN_KERNEL_STEPS: usize = 500;
const PRETRAIN_KERNEL_LR: f64 = 0.05;
/// Observation noise assumed on the recovered latent targets.
const PRETRAIN_NOISE: f64 = 1e-4;

/// Initializes the transition model from observed state pairs: inducing
/// inputs are drawn from the pair inputs, kernels are fitted by exact GP
/// marginal likelihood on the latent targets recovered through the mixing
/// matrix, and each `(m_q, S_q)` is set to the exact sparse-GP conditional
/// given those targets.
pub fn pretrain_transition(
    params: &GpssmParams<f64>,
    pairs: &[(Vec<f64>, Vec<f64>)],
    seed: u64,
) -> Result<GpssmParams<f64>, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::contract("pretraining needs at least one pair"));
    }
    let d_x = params.d_x();
    let d_in = params.gp_input_dim();
    if d_in != d_x {
        return Err(ModelError::contract(
            "pretraining from state pairs requires a control-free model",
        ));
    }
    for (input, output) in pairs {
        if input.len() != d_x || output.len() != d_x {
            return Err(ModelError::contract("pretraining pair has wrong dimension"));
        }
    }
    let coreg = params.coreg.to_f64();
    let n = pairs.len();
    let m = params.num_inducing();
    let q_count = params.num_latents();

    // Latent targets per pair through the pseudo-inverse of A.
    let mut targets: Vec<Vec<f64>> = vec![Vec::with_capacity(n); q_count];
    for (_, output) in pairs {
        let h = recover_latent(&coreg, output)?;
        for (q, hq) in h.iter().enumerate() {
            targets[q].push(*hq);
        }
    }
    let inputs = Mat::from_fn(n, d_x, |r, c| pairs[r].0[c]);

    // Inducing inputs from the pair inputs: all of them when n = m,
    // otherwise a seeded draw (with replacement plus a disambiguating
    // jitter when there are fewer pairs than inducing points).
    let mut rng = NormalStream::new(seed);
    let mut z = Mat::zeros(m, d_x);
    let mut chosen: Vec<usize> = if n >= m {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.rng().next_index(i + 1));
        }
        idx.truncate(m);
        idx.sort_unstable();
        idx
    } else {
        (0..m).map(|_| rng.rng().next_index(n)).collect()
    };
    let mut seen = std::collections::HashSet::new();
    for (row, pick) in chosen.iter_mut().enumerate() {
        let fresh = seen.insert(*pick);
        for c in 0..d_x {
            let jitter = if fresh { 0.0 } else { 1e-3 * rng.next() };
            z[(row, c)] = inputs[(*pick, c)] + jitter;
        }
    }

    // Fit each kernel by exact marginal likelihood on (inputs, targets).
    let mut kernels = Vec::with_capacity(q_count);
    for q in 0..q_count {
        let fitted = fit_kernel_by_marginal_likelihood(&inputs, &targets[q], d_x)?;
        kernels.push(fitted);
    }

    // Exact sparse-GP conditional at the inducing inputs.
    let mut means = Vec::with_capacity(q_count);
    let mut factors = Vec::with_capacity(q_count);
    for q in 0..q_count {
        let kp = &kernels[q];
        let mut kxx = kernel_matrix(kp, &inputs, &inputs);
        for i in 0..n {
            kxx[(i, i)] += PRETRAIN_NOISE;
        }
        let kzx = kernel_matrix(kp, &z, &inputs);
        let tmat = Mat::from_fn(n, 1, |r, _| targets[q][r]);
        let alpha = cholesky_solve(&kxx, &tmat)?;
        let mean: Vec<f64> = (0..m)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += kzx[(i, j)] * alpha[(j, 0)];
                }
                acc
            })
            .collect();
        let kzz = kernel_matrix(kp, &z, &z);
        let w = cholesky_solve(&kxx, &kzx.transpose())?;
        let mut s = kzz.clone();
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += kzx[(i, k)] * w[(k, j)];
                }
                s[(i, j)] -= acc;
            }
        }
        for i in 0..m {
            for j in (i + 1)..m {
                let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        let (l, _) = cholesky(&s)?;
        means.push(mean);
        factors.push(l);
    }

    let mut out = params.clone();
    out.kernels = kernels;
    out.inducing = InducingSet { z, means, factors };
    out.inducing.validate()?;
    Ok(out)
}

/// Maximizes the exact GP marginal likelihood over the log kernel
/// parameters with a short Adam run.
fn fit_kernel_by_marginal_likelihood(
    inputs: &Mat<f64>,
    targets: &[f64],
    d_in: usize,
) -> Result<KernelParams<f64>, ModelError> {
    let mut logs = vec![0.0; 1 + d_in]; // log sv, log lengthscales
    let mut adam = AdamState::new(logs.len(), PRETRAIN_KERNEL_LR);
    let mut flat = FlatParams {
        values: logs.clone(),
        segments: vec![Segment {
            name: "kernel".into(),
            offset: 0,
            len: logs.len(),
            transform: Transform::Log,
        }],
    };
    let tape = Tape::new();
    for _ in 0..PRETRAIN_KERNEL_STEPS {
        tape.clear();
        let vars: Vec<Var> = flat.values.iter().map(|&v| tape.input(v)).collect();
        let kp = KernelParams {
            signal_variance: vars[0].exp(),
            lengthscales: vars[1..].iter().map(|v| v.exp()).collect(),
        };
        let x = Mat::from_fn(inputs.rows(), d_in, |r, c| Var::constant(inputs[(r, c)]));
        let t: Vec<Var> = targets.iter().map(|&v| Var::constant(v)).collect();
        let lml = gp_log_marginal(&kp, &x, &t, PRETRAIN_NOISE)?;
        let adj = tape.gradient(lml);
        let grad: Vec<f64> = vars.iter().map(|v| v.index_in(&adj)).collect();
        if grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        let (next_adam, next_flat) = adam_step(&adam, &flat, &grad);
        adam = next_adam;
        flat = next_flat;
    }
    logs.copy_from_slice(&flat.values);
    KernelParams::new(
        logs[0].exp(),
        logs[1..].iter().map(|v| v.exp()).collect(),
    )
}

/// Serialized model snapshot: every trainable parameter in unconstrained
/// space plus the structure needed to rebuild the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kernel_family: String,
    pub d_x: usize,
    pub d_y: usize,
    pub d_c: usize,
    pub q: usize,
    pub m: usize,
    pub train_coreg: bool,
    /// `Some(x0)` when the initial state is known, `None` when recognized.
    pub known_x0: Option<Vec<f64>>,
    /// `(window, hidden)` when a recognition network is present.
    pub recognition: Option<(usize, usize)>,
    /// Mixing matrix row-major when it is frozen (not part of `values`).
    pub fixed_coreg: Option<Vec<f64>>,
    pub segments: Vec<Segment>,
    pub values: Vec<f64>,
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

pub fn save_checkpoint(params: &GpssmParams<f64>) -> Checkpoint {
    let flat = pack(params);
    Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kernel_family: "squared-exponential-ard".into(),
        d_x: params.d_x(),
        d_y: params.d_y(),
        d_c: params.d_c(),
        q: params.num_latents(),
        m: params.num_inducing(),
        train_coreg: params.train_coreg,
        known_x0: match &params.x0_mode {
            X0Mode::Known(x0) => Some(x0.clone()),
            X0Mode::Recognized => None,
        },
        recognition: params.recognition.as_ref().map(|n| (n.window, n.hidden)),
        fixed_coreg: if params.train_coreg {
            None
        } else {
            Some(params.coreg.matrix().data().to_vec())
        },
        segments: flat.segments,
        values: flat.values,
    }
}

pub fn load_checkpoint(ckpt: &Checkpoint) -> Result<GpssmParams<f64>, ModelError> {
    if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(ModelError::contract(format!(
            "unsupported checkpoint schema version {}",
            ckpt.schema_version
        )));
    }
    let d_in = ckpt.d_x + ckpt.d_c;
    // Structural template; every trainable value is overwritten by unpack.
    let kernels: Vec<KernelParams<f64>> =
        (0..ckpt.q).map(|_| KernelParams::default_for(d_in)).collect();
    let z = Mat::from_fn(ckpt.m, d_in, |r, c| (r * d_in + c) as f64);
    let means = vec![vec![0.0; ckpt.m]; ckpt.q];
    let factors = vec![Mat::identity(ckpt.m); ckpt.q];
    let coreg = match &ckpt.fixed_coreg {
        Some(a) => Coregionalization::new(Mat::from_vec(ckpt.d_x, ckpt.q, a.clone()))?,
        None => Coregionalization::init_near_identity(ckpt.d_x, ckpt.q, 0),
    };
    let recognition = ckpt
        .recognition
        .map(|(window, hidden)| RecognitionNet::zeros(ckpt.d_y, ckpt.d_x, window, hidden));
    let template = GpssmParams {
        coreg,
        train_coreg: ckpt.train_coreg,
        kernels,
        inducing: InducingSet { z, means, factors },
        process_noise: vec![1.0; ckpt.d_x],
        obs_noise: vec![1.0; ckpt.d_y],
        emission: emission_matrix(ckpt.d_y, ckpt.d_x),
        recognition,
        x0_mode: match &ckpt.known_x0 {
            Some(x0) => X0Mode::Known(x0.clone()),
            None => X0Mode::Recognized,
        },
    };
    let expected: usize = pack(&template).values.len();
    if ckpt.values.len() != expected {
        return Err(ModelError::contract(format!(
            "checkpoint has {} values, model shape needs {expected}",
            ckpt.values.len()
        )));
    }
    let params = unpack(&ckpt.values, &template);
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::elbo;
    use crate::rng::seeded_normal_stream;

    fn small_model(seed: u64, x0_mode: X0Mode, train_coreg: bool) -> GpssmParams<f64> {
        let obs = Mat::from_fn(5, 1, |r, _| (r as f64 * 0.7).sin());
        let traj = Trajectory::new(obs, None, None).unwrap();
        let mut cfg = InitConfig::new(2, 2, 5);
        cfg.train_coreg = train_coreg;
        cfg.x0_mode = x0_mode;
        cfg.recognition_hidden = 4;
        init_params(&cfg, &traj, seed).unwrap()
    }

    fn small_traj(t_len: usize, seed: u64) -> Trajectory {
        let mut stream = NormalStream::new(seed);
        Trajectory::new(Mat::from_fn(t_len, 1, |_, _| stream.next()), None, None).unwrap()
    }

    #[test]
    fn pack_unpack_round_trip() {
        for (seed, mode, tc) in [
            (1, X0Mode::Recognized, true),
            (2, X0Mode::Known(vec![0.0, 0.0]), true),
            (3, X0Mode::Recognized, false),
        ] {
            let params = small_model(seed, mode, tc);
            let flat = pack(&params);
            let rebuilt = to_params(&flat, &params);
            let flat2 = pack(&rebuilt);
            assert_eq!(flat.segments, flat2.segments);
            for (a, b) in flat.values.iter().zip(&flat2.values) {
                assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn positivity_survives_any_flat_vector() {
        let params = small_model(4, X0Mode::Recognized, true);
        let flat = pack(&params);
        // Slam the vector with large arbitrary values; constrained
        // quantities must remain positive by construction.
        let mut values = flat.values.clone();
        for (i, v) in values.iter_mut().enumerate() {
            *v += if i % 2 == 0 { -7.0 } else { 3.0 };
        }
        let rebuilt = unpack(&values, &params);
        assert!(rebuilt.process_noise.iter().all(|&v| v > 0.0));
        assert!(rebuilt.obs_noise.iter().all(|&v| v > 0.0));
        for kp in &rebuilt.kernels {
            assert!(kp.signal_variance > 0.0);
            assert!(kp.lengthscales.iter().all(|&l| l > 0.0));
        }
        for f in &rebuilt.inducing.factors {
            for i in 0..f.rows() {
                assert!(f[(i, i)] > 0.0);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity_at_step_one() {
        let flat = FlatParams {
            values: vec![1.0, -2.0],
            segments: vec![],
        };
        let adam = AdamState::new(2, 0.1);
        let (_, next) = adam_step(&adam, &flat, &[0.0, 0.0]);
        assert_eq!(next.values, flat.values);
    }

    #[test]
    fn adam_first_step_moves_by_alpha() {
        // With g = 1 the bias-corrected ratio is 1, so the ascent step is
        // exactly +alpha (epsilon-small correction aside).
        let flat = FlatParams {
            values: vec![0.0],
            segments: vec![],
        };
        let adam = AdamState::new(1, 0.1);
        let (_, next) = adam_step(&adam, &flat, &[1.0]);
        assert!((next.values[0] - 0.1).abs() < 1e-8, "{}", next.values[0]);
    }

    #[test]
    fn adam_runs_are_bitwise_reproducible() {
        let run = || {
            let mut flat = FlatParams {
                values: vec![0.3, -0.6],
                segments: vec![],
            };
            let mut adam = AdamState::new(2, 0.05);
            for i in 0..50 {
                let g = vec![(i as f64 * 0.1).sin(), (i as f64 * 0.2).cos()];
                let (a, f) = adam_step(&adam, &flat, &g);
                adam = a;
                flat = f;
            }
            flat.values
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_maximizes_concave_quadratic() {
        // f(w) = -w^2/2, ascent gradient -w: |w| < 1e-3 within 2000 steps.
        let mut flat = FlatParams {
            values: vec![1.0],
            segments: vec![],
        };
        let mut adam = AdamState::new(1, 0.01);
        let mut converged_at = None;
        for step in 0..2000 {
            let g = vec![-flat.values[0]];
            let (a, f) = adam_step(&adam, &flat, &g);
            adam = a;
            flat = f;
            if flat.values[0].abs() < 1e-3 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "ended at {}", flat.values[0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // The standard small config: T = 5, d_x = 2, Q = 2, m = 5.
        let params = small_model(7, X0Mode::Recognized, true);
        let traj = small_traj(5, 8);
        let n_samples = 2;
        let eps = seeded_normal_stream(9, n_samples * 6 * 2);
        let flat = pack(&params);
        let mut ws = GradWorkspace::new();
        let got = grad_elbo(&flat, &params, &traj, n_samples, &eps, &mut ws).unwrap();

        // Central differences at h = 1e-5 carry O(h^2 f''') truncation
        // error, so entries get a small absolute cushion on top of the
        // relative tolerance; segment norms are checked strictly in the
        // acceptance suite.
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut plus = flat.values.clone();
            plus[i] += h;
            let mut minus = flat.values.clone();
            minus[i] -= h;
            let f_plus = elbo(&unpack(&plus, &params), &traj, n_samples, &eps).unwrap();
            let f_minus = elbo(&unpack(&minus, &params), &traj, n_samples, &eps).unwrap();
            let fd = (f_plus - f_minus) / (2.0 * h);
            let ad = got.grad[i];
            let tol = 1e-4 * ad.abs().max(fd.abs()) + 5e-6;
            assert!(
                (ad - fd).abs() <= tol,
                "segment {} index {i}: ad {ad} vs fd {fd}",
                flat.segment_of(i)
            );
        }
    }

    #[test]
    fn dead_parameters_have_exactly_zero_gradient() {
        // Known x0 with a recognition net attached: the net cannot affect
        // the ELBO, so its gradient block is exactly zero.
        let mut params = small_model(10, X0Mode::Recognized, true);
        params.x0_mode = X0Mode::Known(vec![0.1, -0.1]);
        params.validate().unwrap();
        let traj = small_traj(4, 11);
        let eps = seeded_normal_stream(12, 2 * 5 * 2);
        let flat = pack(&params);
        let mut ws = GradWorkspace::new();
        let got = grad_elbo(&flat, &params, &traj, 2, &eps, &mut ws).unwrap();
        let seg = flat
            .segments
            .iter()
            .find(|s| s.name == "recognition")
            .unwrap();
        for i in seg.offset..seg.offset + seg.len {
            assert_eq!(got.grad[i], 0.0, "index {i}");
        }
    }

    #[test]
    fn observation_noise_gradient_vanishes_at_its_analytic_optimum() {
        // Paths do not depend on R, so with fixed eps the ELBO is exactly
        // stationary in ln R at R = mean squared residual.
        let mut params = small_model(13, X0Mode::Recognized, true);
        params.x0_mode = X0Mode::Known(vec![0.4, 0.0]);
        params.validate().unwrap();
        let traj = small_traj(6, 14);
        let n_samples = 3;
        let eps = seeded_normal_stream(15, n_samples * 7 * 2);

        // Compute residuals along the fixed sampled paths.
        let eval = ModelEval::new(&params).unwrap();
        let block = 7 * 2;
        let mut sq_sum = 0.0;
        let mut count = 0.0;
        for s in 0..n_samples {
            let (path, _) = eval
                .rollout(&traj, &eps[s * block..(s + 1) * block], false)
                .unwrap();
            for t in 1..=6 {
                let r = path[t][0] - traj.observations[(t - 1, 0)];
                sq_sum += r * r;
                count += 1.0;
            }
        }
        params.obs_noise = vec![sq_sum / count];

        let flat = pack(&params);
        let mut ws = GradWorkspace::new();
        let got = grad_elbo(&flat, &params, &traj, n_samples, &eps, &mut ws).unwrap();
        let seg = flat.segments.iter().find(|s| s.name == "obs_noise").unwrap();
        for i in seg.offset..seg.offset + seg.len {
            assert!(got.grad[i].abs() < 1e-9, "grad {} at {i}", got.grad[i]);
        }
    }

    #[test]
    fn grad_elbo_agrees_with_plain_elbo_value() {
        let params = small_model(16, X0Mode::Recognized, true);
        let traj = small_traj(5, 17);
        let eps = seeded_normal_stream(18, 4 * 6 * 2);
        let flat = pack(&params);
        let mut ws = GradWorkspace::new();
        let got = grad_elbo(&flat, &params, &traj, 4, &eps, &mut ws).unwrap();
        let plain = elbo(&params, &traj, 4, &eps).unwrap();
        assert!((got.parts.total() - plain).abs() < 1e-10);
    }

    #[test]
    fn pretrain_fits_identity_map() {
        let mut stream = NormalStream::new(19);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..20)
            .map(|_| {
                let x: Vec<f64> = (0..2).map(|_| 1.2 * stream.next()).collect();
                (x.clone(), x)
            })
            .collect();
        let params = small_model(20, X0Mode::Known(vec![0.0, 0.0]), false);
        let pre = pretrain_transition(&params, &pairs, 21).unwrap();
        for (input, output) in pairs.iter().take(5) {
            let step = crate::model::conditional_step(&pre, input, None).unwrap();
            for d in 0..2 {
                assert!(
                    (step.mean()[d] - output[d]).abs() < 0.1,
                    "pretrained mean {} vs {}",
                    step.mean()[d],
                    output[d]
                );
            }
        }
    }

    #[test]
    fn pretrain_with_matching_count_uses_all_pair_inputs() {
        let mut stream = NormalStream::new(22);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
            .map(|_| {
                let x: Vec<f64> = (0..2).map(|_| stream.next()).collect();
                let y: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
                (x, y)
            })
            .collect();
        let params = small_model(23, X0Mode::Known(vec![0.0, 0.0]), false);
        let pre = pretrain_transition(&params, &pairs, 24).unwrap();
        let mut want: Vec<Vec<f64>> = pairs.iter().map(|(x, _)| x.clone()).collect();
        let mut got: Vec<Vec<f64>> = (0..5).map(|i| pre.inducing.z.row(i).to_vec()).collect();
        let key = |v: &Vec<f64>| (v[0] * 1e6) as i64;
        want.sort_by_key(key);
        got.sort_by_key(key);
        for (w, g) in want.iter().zip(&got) {
            for d in 0..2 {
                assert!((w[d] - g[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pretrain_rejects_unidentifiable_mixing() {
        let mut params = small_model(25, X0Mode::Known(vec![0.0, 0.0]), true);
        params.coreg =
            Coregionalization::new(Mat::from_fn(2, 2, |_, c| if c == 0 { 1.0 } else { 1.0 }))
                .unwrap();
        let pairs = vec![(vec![0.0, 0.0], vec![1.0, 1.0])];
        assert!(matches!(
            pretrain_transition(&params, &pairs, 1),
            Err(ModelError::NotIdentifiable { .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let params = small_model(26, X0Mode::Recognized, true);
        let traj = small_traj(6, 27);
        let cfg = TrainConfig {
            epochs: 0,
            learning_rate: 0.01,
            n_samples: 2,
        };
        let (out, log) = train(&cfg, &params, &traj, 1).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(pack(&out).values, pack(&params).values);
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let params = small_model(28, X0Mode::Recognized, true);
        let traj = small_traj(6, 29);
        let cfg = TrainConfig {
            epochs: 12,
            learning_rate: 0.02,
            n_samples: 3,
        };
        let (a, _) = train(&cfg, &params, &traj, 5).unwrap();
        let (b, _) = train(&cfg, &params, &traj, 5).unwrap();
        assert_eq!(pack(&a).values, pack(&b).values);
    }

    #[test]
    fn short_training_improves_the_objective() {
        let params = small_model(30, X0Mode::Recognized, true);
        let traj = small_traj(10, 31);
        let cfg = TrainConfig {
            epochs: 150,
            learning_rate: 0.02,
            n_samples: 4,
        };
        let (_, log) = train(&cfg, &params, &traj, 7).unwrap();
        assert!(log.abort.is_none());
        let first: f64 = log.epochs[..10].iter().map(|e| e.elbo).sum::<f64>() / 10.0;
        let last: f64 =
            log.epochs[log.epochs.len() - 10..].iter().map(|e| e.elbo).sum::<f64>() / 10.0;
        assert!(last > first, "elbo went from {first} to {last}");
    }

    #[test]
    fn checkpoint_round_trip() {
        for (seed, mode, tc) in [
            (32, X0Mode::Recognized, true),
            (33, X0Mode::Known(vec![0.0, 0.0]), false),
        ] {
            let params = small_model(seed, mode, tc);
            let ckpt = save_checkpoint(&params);
            let json = serde_json::to_string(&ckpt).unwrap();
            let back: Checkpoint = serde_json::from_str(&json).unwrap();
            let rebuilt = load_checkpoint(&back).unwrap();
            let (a, b) = (pack(&params), pack(&rebuilt));
            assert_eq!(a.segments, b.segments);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-14 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn training_log_csv_has_header_and_rows() {
        let log = TrainingLog {
            epochs: vec![EpochRecord {
                epoch: 0,
                elbo: -1.5,
                expectation: -1.0,
                kl_u: 0.3,
                kl_x0: 0.2,
                wall_ms: 12.0,
            }],
            abort: None,
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,elbo,expectation,kl_u,kl_x0,wall_ms\n"));
        assert!(csv.lines().count() == 2);
    }
}
