//! Scratch calibration: times one gradient step and runs a short sid train.
use odgpssm_cli::config::{ExperimentConfig, Task};
use odgpssm_cli::datagen::{generate, BenchmarkDataset};
use odgpssm_cli::metrics::standardize;
use odgpssm_core::model::{forecast, X0Mode};
use odgpssm_core::rng::NormalStream;
use odgpssm_core::train::*;
use odgpssm_core::Mat;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("dryer");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let n_samples: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let ds = BenchmarkDataset::all().into_iter().find(|d| d.name() == which).unwrap();
    let traj = generate(ds);
    let (train_half, test_half, _) = standardize(&traj, 0.5).unwrap();
    println!("dataset {} T_train={} T_test={}", ds.name(), train_half.len(), test_half.len());

    let mut icfg = InitConfig::new(4, 4, 20);
    icfg.use_controls = true;
    icfg.x0_mode = X0Mode::Recognized;
    let params = init_params(&icfg, &train_half, 1000).unwrap();

    // time one gradient step
    let flat = pack(&params);
    println!("flat params: {}", flat.len());
    let mut ws = GradWorkspace::new();
    let block = (train_half.len() + 1) * 4;
    let mut eps = vec![0.0; n_samples * block];
    NormalStream::new(5).fill(&mut eps);
    grad_elbo(&flat, &params, &train_half, n_samples, &eps, &mut ws).unwrap();
    let t0 = Instant::now();
    for _ in 0..5 { grad_elbo(&flat, &params, &train_half, n_samples, &eps, &mut ws).unwrap(); }
    println!("grad step: {:.1} ms (n_samples={})", t0.elapsed().as_secs_f64()*1e3/5.0, n_samples);

    // short training
    let tcfg = TrainConfig { epochs, learning_rate: 0.01, n_samples };
    let t0 = Instant::now();
    let (trained, log) = train(&tcfg, &params, &train_half, 0).unwrap();
    println!("train {} epochs: {:.1} s, abort={:?}", epochs, t0.elapsed().as_secs_f64(), log.abort);
    for k in [0, epochs/4, epochs/2, 3*epochs/4, epochs-1] {
        if let Some(r) = log.epochs.get(k) {
            println!("  epoch {:5}: elbo {:10.2} expect {:10.2} kl_u {:8.3} kl_x0 {:6.3}", r.epoch, r.elbo, r.expectation, r.kl_u, r.kl_x0);
        }
    }
    let horizon = 100.min(test_half.len());
    let fut = test_half.controls.as_ref().map(|c| Mat::from_fn(horizon, c.cols(), |r, j| c[(r, j)]));
    let fc = forecast(&trained, &train_half, horizon, fut.as_ref()).unwrap();
    let truth = Mat::from_fn(horizon, 1, |r, _| test_half.observations[(r, 0)]);
    let err = odgpssm_cli::metrics::rmse(&fc, &truth).unwrap();
    println!("forecast RMSE over {horizon}: {err:.4}");
}
