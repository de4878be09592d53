fn main() {
    for ds in odgpssm_cli::datagen::BenchmarkDataset::all() {
        let traj = odgpssm_cli::datagen::generate(ds);
        let mut min = f64::INFINITY; let mut max = f64::NEG_INFINITY;
        for t in 0..traj.len() { let v = traj.observations[(t,0)]; min=min.min(v); max=max.max(v); }
        println!("{:12} min {:9.4} max {:9.4}", ds.name(), min, max);
    }
}
