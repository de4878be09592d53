//! Scratch: recipe grid on selected datasets.
use odgpssm_cli::datagen::{generate, BenchmarkDataset};
use odgpssm_cli::metrics::{rmse, standardize};
use odgpssm_core::model::{forecast, X0Mode};
use odgpssm_core::train::*;
use odgpssm_core::Mat;

fn run(ds: BenchmarkDataset, epochs: usize, n_samples: usize, lr: f64, seed: u64, train_coreg: bool) -> (f64, f64) {
    let traj = generate(ds);
    let (train_half, test_half, _) = standardize(&traj, 0.5).unwrap();
    let horizon = 100.min(test_half.len());
    let mut icfg = InitConfig::new(4, 4, 20);
    icfg.train_coreg = train_coreg;
    icfg.use_controls = true;
    icfg.x0_mode = X0Mode::Recognized;
    let params = init_params(&icfg, &train_half, seed.wrapping_add(1000)).unwrap();
    let tcfg = TrainConfig { epochs, learning_rate: lr, n_samples };
    let (trained, log) = train(&tcfg, &params, &train_half, seed).unwrap();
    let fut = test_half.controls.as_ref().map(|c| Mat::from_fn(horizon, c.cols(), |r, j| c[(r, j)]));
    let fc = forecast(&trained, &train_half, horizon, fut.as_ref()).unwrap();
    let truth = Mat::from_fn(horizon, 1, |r, _| test_half.observations[(r, 0)]);
    (rmse(&fc, &truth).unwrap(), log.epochs.last().map(|e| e.elbo).unwrap_or(f64::NAN))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("gas_furnace");
    let epochs: usize = args[2].parse().unwrap();
    let n_samples: usize = args[3].parse().unwrap();
    let lr: f64 = args[4].parse().unwrap();
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = BenchmarkDataset::all().into_iter().find(|d| d.name() == name).unwrap();
    let (od, ode) = run(ds, epochs, n_samples, lr, seed, true);
    let (pr, pre) = run(ds, epochs, n_samples, lr, seed, false);
    println!("{name} e={epochs} S={n_samples} lr={lr} seed={seed}: OD={od:.4} (elbo {ode:.1})  PR={pr:.4} (elbo {pre:.1})");
}
