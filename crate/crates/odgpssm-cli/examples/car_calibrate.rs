//! Scratch: synthetic car study, one or more seeds, prints per-dim RMSEs.
use odgpssm_cli::config::{ExperimentConfig, Task};
use odgpssm_cli::experiments::run_synthetic;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let n_samples: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let n_seeds: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut cfg = ExperimentConfig::for_task(Task::SyntheticCar);
    cfg.epochs = epochs;
    cfg.n_samples = n_samples;
    cfg.seeds = (0..n_seeds as u64).collect();
    cfg.out_dir = std::env::temp_dir().join("odgpssm_car_cal");
    let t0 = Instant::now();
    let record = run_synthetic(&cfg).unwrap();
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    for s in &record.seeds {
        let d = s.detail.as_ref().unwrap();
        let get = |k: &str| -> Vec<f64> {
            d[k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()
        };
        println!("seed {}: OD {:?}", s.seed, get("odgpssm_per_dim"));
        println!("         PR {:?}", get("baseline_per_dim"));
        println!("         SM {:?}", get("smoother_per_dim"));
    }
}
