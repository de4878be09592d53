//! Scratch: break down gradient-step cost.
use odgpssm_cli::datagen::{generate, BenchmarkDataset};
use odgpssm_cli::metrics::standardize;
use odgpssm_core::ad::{Tape, Var};
use odgpssm_core::model::{elbo, ModelEval, X0Mode};
use odgpssm_core::rng::NormalStream;
use odgpssm_core::train::*;
use std::time::Instant;

fn main() {
    let traj0 = generate(BenchmarkDataset::Dryer);
    let (train_half, _, _) = standardize(&traj0, 0.5).unwrap();
    let mut icfg = InitConfig::new(4, 4, 20);
    icfg.use_controls = true;
    icfg.x0_mode = X0Mode::Recognized;
    let params = init_params(&icfg, &train_half, 1000).unwrap();
    let flat = pack(&params);
    let n_samples = 4;
    let block = (train_half.len() + 1) * 4;
    let mut eps = vec![0.0; n_samples * block];
    NormalStream::new(5).fill(&mut eps);

    // plain f64 elbo
    let t0 = Instant::now();
    for _ in 0..5 { elbo(&params, &train_half, n_samples, &eps).unwrap(); }
    println!("plain f64 elbo: {:.1} ms", t0.elapsed().as_secs_f64()*1e3/5.0);

    // tape forward only (all samples on one tape, single thread)
    let tape = Tape::new();
    let mut nodes = 0usize;
    let t0 = Instant::now();
    for _ in 0..5 {
        tape.clear();
        let vars: Vec<Var> = flat.values.iter().map(|&v| tape.input(v)).collect();
        let p = unpack(&vars, &params);
        let eval = ModelEval::new(&p).unwrap();
        let mut obj = Var::constant(0.0);
        for s in 0..n_samples {
            let (_, ll) = eval.rollout(&train_half, &eps[s*block..(s+1)*block], true).unwrap();
            obj = obj + ll / n_samples as f64;
        }
        obj = obj - eval.kl_u() - eval.kl_x0(&train_half).unwrap();
        nodes = tape.len();
        std::hint::black_box(obj.value());
    }
    println!("tape forward: {:.1} ms, {} nodes", t0.elapsed().as_secs_f64()*1e3/5.0, nodes);

    // forward + backward
    let mut adj = Vec::new();
    let t0 = Instant::now();
    for _ in 0..5 {
        tape.clear();
        let vars: Vec<Var> = flat.values.iter().map(|&v| tape.input(v)).collect();
        let p = unpack(&vars, &params);
        let eval = ModelEval::new(&p).unwrap();
        let mut obj = Var::constant(0.0);
        for s in 0..n_samples {
            let (_, ll) = eval.rollout(&train_half, &eps[s*block..(s+1)*block], true).unwrap();
            obj = obj + ll / n_samples as f64;
        }
        obj = obj - eval.kl_u() - eval.kl_x0(&train_half).unwrap();
        tape.gradient_into(obj, &mut adj);
        std::hint::black_box(adj[0]);
    }
    println!("fwd+bwd 1-thread: {:.1} ms", t0.elapsed().as_secs_f64()*1e3/5.0);
}
