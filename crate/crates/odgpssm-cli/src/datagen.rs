//! Deterministic generators for the five vendored system-identification
//! benchmark sequences.
//!
//! Each system is a small nonlinear state-space plant driven by a
//! persistent-excitation input (smoothed random steps) with light
//! measurement noise, sized to match the classic benchmark lengths. The
//! CSV snapshots under `data/` are produced by [`write_all`] and pinned by
//! checksum; a test regenerates them and fails on any drift.

use std::fs;
use std::path::Path;

use odgpssm_core::model::Trajectory;
use odgpssm_core::rng::NormalStream;
use odgpssm_core::Mat;

use crate::dataset::{trajectory_to_csv, Manifest};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkDataset {
    Actuator,
    Ballbeam,
    Drive,
    Dryer,
    GasFurnace,
}

impl BenchmarkDataset {
    pub fn all() -> [BenchmarkDataset; 5] {
        [
            BenchmarkDataset::Actuator,
            BenchmarkDataset::Ballbeam,
            BenchmarkDataset::Drive,
            BenchmarkDataset::Dryer,
            BenchmarkDataset::GasFurnace,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkDataset::Actuator => "actuator",
            BenchmarkDataset::Ballbeam => "ballbeam",
            BenchmarkDataset::Drive => "drive",
            BenchmarkDataset::Dryer => "dryer",
            BenchmarkDataset::GasFurnace => "gas_furnace",
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name())
    }

    pub fn len(&self) -> usize {
        match self {
            BenchmarkDataset::Actuator => 1024,
            BenchmarkDataset::Ballbeam => 1000,
            BenchmarkDataset::Drive => 500,
            BenchmarkDataset::Dryer => 1000,
            BenchmarkDataset::GasFurnace => 296,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn seed(&self) -> u64 {
        match self {
            BenchmarkDataset::Actuator => 101,
            BenchmarkDataset::Ballbeam => 102,
            BenchmarkDataset::Drive => 103,
            BenchmarkDataset::Dryer => 104,
            BenchmarkDataset::GasFurnace => 105,
        }
    }
}

/// Piecewise-constant random levels in [-1, 1] held for 5..30 steps, then
/// lightly low-pass filtered.
fn excitation(stream: &mut NormalStream, t_len: usize) -> Vec<f64> {
    let mut u = Vec::with_capacity(t_len);
    let mut level = stream.rng().next_range(-1.0, 1.0);
    let mut hold = 5 + stream.rng().next_index(26);
    let mut smoothed = level;
    for _ in 0..t_len {
        if hold == 0 {
            level = stream.rng().next_range(-1.0, 1.0);
            hold = 5 + stream.rng().next_index(26);
        }
        hold -= 1;
        smoothed = 0.6 * smoothed + 0.4 * level;
        u.push(smoothed);
    }
    u
}

/// Simulates one benchmark plant deterministically from its fixed seed.
pub fn generate(ds: BenchmarkDataset) -> Trajectory {
    let t_len = ds.len();
    let mut stream = NormalStream::new(ds.seed());
    let u = excitation(&mut stream, t_len);
    let mut y = Vec::with_capacity(t_len);

    // All plants carry small process disturbances: the real benchmark rigs
    // are not deterministic, and without disturbances long-horizon scores
    // reward nothing but memorization speed.
    match ds {
        // Valve with pressure buildup and a cubic relief nonlinearity.
        BenchmarkDataset::Actuator => {
            let (mut v, mut p) = (0.0, 0.0);
            for &ut in &u {
                v = 0.85 * v + 0.35 * ut + 0.015 * stream.next();
                p = 0.94 * p + 0.55 * (1.4 * v).tanh() - 0.2 * p * p * p
                    + 0.04 * stream.next();
                y.push(p + 0.015 * stream.next());
            }
        }
        // Commanded beam angle tilts a nearly undamped rolling ball.
        BenchmarkDataset::Ballbeam => {
            let (mut angle, mut vel, mut pos) = (0.0, 0.0, 0.0_f64);
            for &ut in &u {
                angle = 0.9 * angle + 0.12 * ut + 0.005 * stream.next();
                vel = 0.99 * vel + 0.3 * angle.sin() + 0.01 * stream.next();
                pos = 1.8 * ((0.998 * pos + 0.12 * vel) / 1.8).tanh();
                y.push(pos + 0.01 * stream.next());
            }
        }
        // Two coupled linear states observed through a square: the sign of
        // the internal state is invisible, which is what makes long-range
        // prediction hard here.
        BenchmarkDataset::Drive => {
            let (mut x1, mut x2) = (0.0, 0.0);
            for &ut in &u {
                let nx1 = 0.9 * x1 + 0.35 * ut - 0.2 * x2 + 0.015 * stream.next();
                let nx2 = 0.9 * x2 + 0.25 * x1 + 0.015 * stream.next();
                x1 = nx1;
                x2 = nx2;
                y.push(0.8 * x2 * x2 + 0.02 * stream.next());
            }
        }
        // Heater lag cascaded into a chamber lag; saturating actuator.
        BenchmarkDataset::Dryer => {
            let (mut heat, mut temp) = (0.0, 0.0);
            for &ut in &u {
                heat = 0.82 * heat + 0.18 * ut.tanh() + 0.01 * stream.next();
                temp = 0.9 * temp + 0.1 * heat + 0.005 * stream.next();
                y.push(temp + 0.005 * stream.next());
            }
        }
        // Third-order lag chain with a mild quadratic in the output.
        BenchmarkDataset::GasFurnace => {
            let (mut g1, mut g2, mut g3) = (0.0, 0.0, 0.0);
            for &ut in &u {
                g1 = 0.75 * g1 + 0.25 * ut + 0.01 * stream.next();
                g2 = 0.8 * g2 + 0.2 * g1 + 0.01 * stream.next();
                g3 = 0.85 * g3 + 0.15 * g2 + 0.005 * stream.next();
                y.push(g3 - 0.08 * g3 * g3 + 0.01 * stream.next());
            }
        }
    }

    let obs = Mat::from_fn(t_len, 1, |t, _| y[t]);
    let controls = Mat::from_fn(t_len, 1, |t, _| u[t]);
    Trajectory::new(obs, Some(controls), None).expect("generated trajectory is well-formed")
}

/// Writes all five CSV snapshots plus `manifest.json` into `dir`.
pub fn write_all(dir: &Path) -> Result<Manifest, CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    let mut manifest = Manifest::default();
    for ds in BenchmarkDataset::all() {
        let traj = generate(ds);
        let csv = trajectory_to_csv(&traj);
        let path = dir.join(ds.file_name());
        fs::write(&path, &csv)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        manifest.record(&ds.file_name(), csv.as_bytes());
    }
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::data(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, text)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", manifest_path.display())))?;
    Ok(manifest)
}
