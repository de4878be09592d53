//! Train/test splitting, per-channel standardization, and forecast error.

use odgpssm_core::model::Trajectory;
use odgpssm_core::Mat;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Per-channel affine statistics computed on the training half.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    fn fit(m: &Mat<f64>, rows: usize, kind: &str) -> Result<Self, CliError> {
        let cols = m.cols();
        let mut mean = vec![0.0; cols];
        for t in 0..rows {
            for j in 0..cols {
                mean[j] += m[(t, j)];
            }
        }
        for v in &mut mean {
            *v /= rows as f64;
        }
        let mut std = vec![0.0; cols];
        for t in 0..rows {
            for j in 0..cols {
                let d = m[(t, j)] - mean[j];
                std[j] += d * d;
            }
        }
        for (j, v) in std.iter_mut().enumerate() {
            *v = (*v / rows as f64).sqrt();
            if *v < 1e-12 {
                return Err(CliError::data(format!(
                    "channel {kind}{} is constant on the training half; cannot standardize",
                    j + 1
                )));
            }
        }
        Ok(ChannelStats { mean, std })
    }

    fn apply(&self, m: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(m.rows(), m.cols(), |t, j| {
            (m[(t, j)] - self.mean[j]) / self.std[j]
        })
    }

    fn invert(&self, m: &Mat<f64>) -> Mat<f64> {
        Mat::from_fn(m.rows(), m.cols(), |t, j| {
            m[(t, j)] * self.std[j] + self.mean[j]
        })
    }
}

/// Standardization state retained so forecasts can be mapped back to the
/// original units.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Standardization {
    pub obs: ChannelStats,
    pub controls: Option<ChannelStats>,
    pub train_len: usize,
}

impl Standardization {
    pub fn destandardize_obs(&self, m: &Mat<f64>) -> Mat<f64> {
        self.obs.invert(m)
    }

    pub fn restandardize_obs(&self, m: &Mat<f64>) -> Mat<f64> {
        self.obs.apply(m)
    }
}

/// Splits a trajectory at `floor(T * split)`, fits per-channel mean/std on
/// the training rows only, and applies them to both halves (observations
/// and controls independently).
pub fn standardize(
    traj: &Trajectory,
    split: f64,
) -> Result<(Trajectory, Trajectory, Standardization), CliError> {
    if !(split > 0.0 && split < 1.0) {
        return Err(CliError::config("split must lie strictly in (0, 1)"));
    }
    let t_len = traj.len();
    let train_len = ((t_len as f64) * split).floor() as usize;
    if train_len < 1 || train_len >= t_len {
        return Err(CliError::data(format!(
            "split {split} leaves an empty half of a length-{t_len} trajectory"
        )));
    }
    let obs_stats = ChannelStats::fit(&traj.observations, train_len, "y")?;
    let ctrl_stats = match &traj.controls {
        Some(c) => Some(ChannelStats::fit(c, train_len, "u")?),
        None => None,
    };
    let obs_std = obs_stats.apply(&traj.observations);
    let ctrl_std = traj
        .controls
        .as_ref()
        .map(|c| ctrl_stats.as_ref().unwrap().apply(c));

    let take = |m: &Mat<f64>, from: usize, to: usize| {
        Mat::from_fn(to - from, m.cols(), |r, c| m[(from + r, c)])
    };
    let train = Trajectory::new(
        take(&obs_std, 0, train_len),
        ctrl_std.as_ref().map(|c| take(c, 0, train_len)),
        None,
    )
    .map_err(CliError::from)?;
    let test = Trajectory::new(
        take(&obs_std, train_len, t_len),
        ctrl_std.as_ref().map(|c| take(c, train_len, t_len)),
        None,
    )
    .map_err(CliError::from)?;
    Ok((
        train,
        test,
        Standardization {
            obs: obs_stats,
            controls: ctrl_stats,
            train_len,
        },
    ))
}

/// Root mean square error over all `H x d_y` entries.
pub fn rmse(pred: &Mat<f64>, truth: &Mat<f64>) -> Result<f64, CliError> {
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(CliError::data(format!(
            "rmse shape mismatch: {}x{} vs {}x{}",
            pred.rows(),
            pred.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    let n = (pred.rows() * pred.cols()) as f64;
    let mut acc = 0.0;
    for i in 0..pred.rows() {
        for j in 0..pred.cols() {
            let d = pred[(i, j)] - truth[(i, j)];
            acc += d * d;
        }
    }
    Ok((acc / n).sqrt())
}

/// Mean and (population) standard deviation of a slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
