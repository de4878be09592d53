//! Scratch: FD convergence study for one gradient entry.
use odgpssm_core::linalg::Mat;
use odgpssm_core::model::{elbo, Trajectory, X0Mode};
use odgpssm_core::rng::{seeded_normal_stream, NormalStream};
use odgpssm_core::train::*;

fn main() {
    let mut stream = NormalStream::new(7);
    let obs = Mat::from_fn(5, 1, |r, _| (r as f64 * 0.7).sin());
    let init_traj = Trajectory::new(obs, None, None).unwrap();
    let mut cfg = InitConfig::new(2, 2, 5);
    cfg.recognition_hidden = 4;
    cfg.x0_mode = X0Mode::Recognized;
    let params = init_params(&cfg, &init_traj, 7).unwrap();
    let mut s2 = NormalStream::new(8);
    let traj = Trajectory::new(Mat::from_fn(5, 1, |_, _| s2.next()), None, None).unwrap();
    let n_samples = 2;
    let eps = seeded_normal_stream(9, n_samples * 6 * 2);
    let flat = pack(&params);
    let mut ws = GradWorkspace::new();
    let got = grad_elbo(&flat, &params, &traj, n_samples, &eps, &mut ws).unwrap();
    let idx = 79;
    println!("segment {} ad {}", flat.segment_of(idx), got.grad[idx]);
    for h in [1e-4, 1e-5, 1e-6, 1e-7] {
        let mut plus = flat.values.clone(); plus[idx] += h;
        let mut minus = flat.values.clone(); minus[idx] -= h;
        let fp = elbo(&unpack(&plus, &params), &traj, n_samples, &eps).unwrap();
        let fm = elbo(&unpack(&minus, &params), &traj, n_samples, &eps).unwrap();
        println!("h={h:.0e}: fd {}", (fp - fm) / (2.0 * h));
    }
    let _ = stream.next();
}
