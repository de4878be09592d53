//! Experiment configuration: a JSON document with per-task defaults.
//!
//! Every run is fully determined by `(config, seed)`; the config is echoed
//! into the result record so outputs are self-describing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SyntheticCar,
    SidDataset,
    QSweep,
}

/// Which transition model a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Output-dependent model: trained mixing matrix over Q latent GPs.
    Odgpssm,
    /// Output-independent baseline: `A = I` frozen, one GP per dimension.
    Prssm,
}

/// Synthetic car-tracking task settings. The noise covariances live here,
/// not in code, so the generating system is part of the recorded config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub t_len: usize,
    pub q_diag: [f64; 4],
    pub r_diag: [f64; 2],
    pub pretrain_pairs: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            t_len: 120,
            q_diag: [0.01, 0.01, 0.1, 0.1],
            r_diag: [0.1, 0.1],
            pretrain_pairs: 20,
        }
    }
}

/// Complexity-probe settings: wall-clock of one ELBO+gradient evaluation
/// across sequence lengths and latent-GP counts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeConfig {
    pub t_values: Vec<usize>,
    pub q_values: Vec<usize>,
    pub repetitions: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            t_values: vec![100, 200, 400],
            q_values: vec![2, 4],
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Trajectory CSV for the system-identification tasks.
    pub dataset: Option<PathBuf>,
    /// Checksum manifest guarding vendored datasets.
    pub manifest: Option<PathBuf>,
    pub model: ModelKind,
    pub d_x: usize,
    pub q: usize,
    pub num_inducing: usize,
    pub n_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    /// `Some(x0)`: the initial state is known; `None`: recognized from data.
    pub known_x0: Option<Vec<f64>>,
    pub use_controls: bool,
    pub horizon: usize,
    pub train_split: f64,
    pub out_dir: PathBuf,
    pub q_sweep: Vec<usize>,
    pub synthetic: SyntheticConfig,
    pub probe: ProbeConfig,
    pub process_noise_init: f64,
    pub obs_noise_init: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::SidDataset,
            dataset: None,
            manifest: Some(PathBuf::from("data/manifest.json")),
            model: ModelKind::Odgpssm,
            d_x: 4,
            q: 4,
            num_inducing: 20,
            n_samples: 4,
            epochs: 1200,
            learning_rate: 0.01,
            seeds: vec![0, 1, 2],
            known_x0: None,
            use_controls: true,
            horizon: 100,
            train_split: 0.5,
            out_dir: PathBuf::from("out"),
            q_sweep: vec![1, 2, 3, 4, 5, 6],
            synthetic: SyntheticConfig::default(),
            probe: ProbeConfig::default(),
            process_noise_init: 0.05,
            obs_noise_init: 0.1,
        }
    }
}

impl ExperimentConfig {
    /// Task-appropriate starting point.
    pub fn for_task(task: Task) -> Self {
        let mut cfg = ExperimentConfig {
            task,
            ..ExperimentConfig::default()
        };
        if task == Task::SyntheticCar {
            cfg.known_x0 = Some(vec![0.0, 0.0, 1.0, -1.0]);
            cfg.use_controls = false;
            cfg.epochs = 1500;
            cfg.n_samples = 4;
            cfg.seeds = vec![0, 1, 2, 3, 4];
        }
        cfg
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::config("at least one seed is required"));
        }
        if self.horizon < 1 {
            return Err(CliError::config("horizon must be >= 1"));
        }
        if self.d_x < 1 || self.q < 1 || self.num_inducing < 2 {
            return Err(CliError::config(
                "d_x >= 1, q >= 1, num_inducing >= 2 are required",
            ));
        }
        if self.n_samples < 1 || self.learning_rate <= 0.0 {
            return Err(CliError::config(
                "n_samples >= 1 and a positive learning rate are required",
            ));
        }
        if !(self.train_split > 0.0 && self.train_split < 1.0) {
            return Err(CliError::config("train_split must lie in (0, 1)"));
        }
        if self.model == ModelKind::Prssm && self.q != self.d_x {
            return Err(CliError::config(
                "the output-independent baseline requires q = d_x",
            ));
        }
        match self.task {
            Task::SidDataset | Task::QSweep => {
                if self.dataset.is_none() {
                    return Err(CliError::config(format!(
                        "task {:?} requires a dataset path",
                        self.task
                    )));
                }
                if self.task == Task::QSweep && self.q_sweep.is_empty() {
                    return Err(CliError::config("q_sweep must list at least one Q"));
                }
            }
            Task::SyntheticCar => {
                if let Some(x0) = &self.known_x0 {
                    if x0.len() != self.d_x {
                        return Err(CliError::config("known_x0 must have d_x entries"));
                    }
                }
                if self.synthetic.t_len < 2 || self.synthetic.pretrain_pairs < 1 {
                    return Err(CliError::config(
                        "synthetic task needs t_len >= 2 and pretrain_pairs >= 1",
                    ));
                }
            }
        }
        Ok(())
    }
}
