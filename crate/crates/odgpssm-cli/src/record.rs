//! Result records: the append-only JSON documents each experiment emits.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use odgpssm_core::lmc::IdentifiabilityReport;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Headline RMSE for this seed (forecast RMSE for the real datasets,
    /// state-inference RMSE for the synthetic study).
    pub rmse: f64,
    /// Task-specific extras (per-dimension tables, baseline numbers).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultRecord {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub model: String,
    pub q: usize,
    /// Exact configuration the run used.
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedOutcome>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub identifiability: IdentifiabilityReport,
    pub training_logs: Vec<String>,
    pub checkpoints: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<String>,
    pub wall_clock_ms: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, Task};

    #[test]
    fn record_round_trips_losslessly() {
        let mut cfg = ExperimentConfig::for_task(Task::SidDataset);
        cfg.dataset = Some("data/dryer.csv".into());
        let record = ResultRecord {
            task: "sid-dataset".into(),
            dataset: Some("dryer".into()),
            model: "odgpssm".into(),
            q: 4,
            config: cfg,
            seeds: vec![SeedOutcome {
                seed: 0,
                rmse: 0.123456789012345,
                detail: Some(serde_json::json!({"per_dim": [0.1, 0.2]})),
            }],
            rmse_mean: 0.123456789012345,
            rmse_std: 0.0,
            identifiability: IdentifiabilityReport {
                q: 4,
                d_x: 4,
                rank: 4,
                sigma_min: 0.5,
                sigma_max: 2.0,
                identifiable: true,
            },
            training_logs: vec!["training_log_odgpssm_seed0.csv".into()],
            checkpoints: vec!["checkpoint_odgpssm_seed0.json".into()],
            traces: vec![],
            wall_clock_ms: 1234.5,
        };
        let json = serde_json::to_string_pretty(&record).unwrap();
        let back: ResultRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(record, back);
    }
}
