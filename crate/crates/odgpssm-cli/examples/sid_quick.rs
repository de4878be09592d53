//! Scratch: selected datasets x both models, configurable budget.
use odgpssm_cli::datagen::{generate, BenchmarkDataset};
use odgpssm_cli::metrics::{rmse, standardize};
use odgpssm_core::model::{forecast, X0Mode};
use odgpssm_core::train::*;
use odgpssm_core::Mat;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let n_samples: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let names: Vec<&str> = args.get(4).map(|s| s.split(',').collect()).unwrap_or_else(|| vec!["gas_furnace", "actuator", "dryer"]);
    println!("epochs={epochs} n_samples={n_samples} seed={seed}");
    for ds in BenchmarkDataset::all() {
        if !names.contains(&ds.name()) { continue; }
        let traj = generate(ds);
        let (train_half, test_half, _) = standardize(&traj, 0.5).unwrap();
        let horizon = 100.min(test_half.len());
        let mut line = format!("{:12}", ds.name());
        for train_coreg in [true, false] {
            let t0 = Instant::now();
            let mut icfg = InitConfig::new(4, 4, 20);
            icfg.train_coreg = train_coreg;
            icfg.use_controls = true;
            icfg.x0_mode = X0Mode::Recognized;
            let params = init_params(&icfg, &train_half, seed.wrapping_add(1000)).unwrap();
            let tcfg = TrainConfig { epochs, learning_rate: 0.01, n_samples };
            let (trained, log) = train(&tcfg, &params, &train_half, seed).unwrap();
            let fut = test_half.controls.as_ref().map(|c| Mat::from_fn(horizon, c.cols(), |r, j| c[(r, j)]));
            let fc = forecast(&trained, &train_half, horizon, fut.as_ref()).unwrap();
            let truth = Mat::from_fn(horizon, 1, |r, _| test_half.observations[(r, 0)]);
            let err = rmse(&fc, &truth).unwrap();
            let last_elbo = log.epochs.last().map(|e| e.elbo).unwrap_or(f64::NAN);
            line.push_str(&format!("  {}={:6.4} (elbo {:9.1}, {:4.0}s)", if train_coreg {"OD"} else {"PR"}, err, last_elbo, t0.elapsed().as_secs_f64()));
        }
        println!("{line}");
    }
}
