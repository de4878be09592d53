//! Trajectory CSV ingestion and emission.
//!
//! Schema: a header row naming optional control columns `u1..uK` and
//! required observation columns `y1..yM`, then one row per time step.
//! UTF-8, comma separator, `.` decimal point, no quoting. Vendored data
//! files are pinned by an FNV-1a checksum manifest; a mismatch is refused.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use odgpssm_core::model::Trajectory;
use odgpssm_core::Mat;

use crate::CliError;

/// 64-bit FNV-1a over raw file bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Checksum manifest pinning the vendored dataset snapshots.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct Manifest {
    /// file name -> hex FNV-1a checksum of its bytes.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("malformed manifest {}: {e}", path.display())))
    }

    pub fn record(&mut self, name: &str, bytes: &[u8]) {
        self.files.insert(name.to_string(), format!("{:016x}", fnv1a64(bytes)));
    }

    /// Checks `path` against the manifest if its file name is pinned.
    /// Unknown files pass (user-supplied data is not pinned).
    pub fn verify(&self, path: &Path) -> Result<(), CliError> {
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => return Ok(()),
        };
        let Some(want) = self.files.get(name) else {
            return Ok(());
        };
        let bytes = fs::read(path)
            .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        let got = format!("{:016x}", fnv1a64(&bytes));
        if &got != want {
            return Err(CliError::data(format!(
                "{} does not match its pinned checksum (expected {want}, found {got}); refusing modified data",
                path.display()
            )));
        }
        Ok(())
    }
}

fn parse_header(line: &str) -> Result<(Vec<usize>, Vec<usize>), CliError> {
    let names: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    let mut u_cols: Vec<(usize, usize)> = Vec::new();
    let mut y_cols: Vec<(usize, usize)> = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        if let Some(num) = name.strip_prefix('u').and_then(|s| s.parse::<usize>().ok()) {
            u_cols.push((num, idx));
        } else if let Some(num) = name.strip_prefix('y').and_then(|s| s.parse::<usize>().ok()) {
            y_cols.push((num, idx));
        } else {
            return Err(CliError::data(format!(
                "line 1: unrecognized column `{name}` (expected u<k> or y<k>)"
            )));
        }
    }
    if y_cols.is_empty() {
        return Err(CliError::data("line 1: no observation columns y1..yM"));
    }
    u_cols.sort_unstable();
    y_cols.sort_unstable();
    for (want, (num, _)) in u_cols.iter().enumerate() {
        if *num != want + 1 {
            return Err(CliError::data("line 1: control columns must be u1..uK"));
        }
    }
    for (want, (num, _)) in y_cols.iter().enumerate() {
        if *num != want + 1 {
            return Err(CliError::data("line 1: observation columns must be y1..yM"));
        }
    }
    Ok((
        u_cols.into_iter().map(|(_, i)| i).collect(),
        y_cols.into_iter().map(|(_, i)| i).collect(),
    ))
}

/// Parses a trajectory CSV. Errors carry 1-based line numbers.
pub fn load_dataset(path: &Path) -> Result<Trajectory, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    parse_dataset(&text).map_err(|e| match e {
        CliError::Data(msg) => CliError::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses trajectory CSV text (see module docs for the schema).
pub fn parse_dataset(text: &str) -> Result<Trajectory, CliError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::data("empty file"))?;
    let (u_cols, y_cols) = parse_header(header)?;
    let width = u_cols.len() + y_cols.len();

    let mut obs_rows: Vec<Vec<f64>> = Vec::new();
    let mut ctrl_rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(CliError::data(format!(
                "line {lineno}: expected {width} cells, found {}",
                cells.len()
            )));
        }
        let parse = |idx: usize| -> Result<f64, CliError> {
            cells[idx].parse::<f64>().map_err(|_| {
                CliError::data(format!(
                    "line {lineno}: non-numeric cell `{}`",
                    cells[idx]
                ))
            })
        };
        obs_rows.push(y_cols.iter().map(|&c| parse(c)).collect::<Result<_, _>>()?);
        if !u_cols.is_empty() {
            ctrl_rows.push(u_cols.iter().map(|&c| parse(c)).collect::<Result<_, _>>()?);
        }
    }
    if obs_rows.is_empty() {
        return Err(CliError::data("no data rows"));
    }
    let observations = Mat::from_rows(&obs_rows);
    let controls = if ctrl_rows.is_empty() {
        None
    } else {
        Some(Mat::from_rows(&ctrl_rows))
    };
    Trajectory::new(observations, controls, None)
        .map_err(|e| CliError::data(format!("inconsistent trajectory: {e}")))
}

/// Renders a trajectory back to the CSV schema. When `true_states` are
/// present, columns `true_x1..` carry the states `x_1..x_T` for analysis
/// (the initial state lives in the accompanying result file).
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let d_c = traj.d_c();
    let d_y = traj.d_y();
    let d_x = traj.true_states.as_ref().map_or(0, Mat::cols);
    let mut header: Vec<String> = Vec::new();
    for k in 1..=d_c {
        header.push(format!("u{k}"));
    }
    for k in 1..=d_y {
        header.push(format!("y{k}"));
    }
    for k in 1..=d_x {
        header.push(format!("true_x{k}"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for t in 0..traj.len() {
        let mut cells: Vec<String> = Vec::new();
        if let Some(c) = &traj.controls {
            for j in 0..d_c {
                cells.push(format!("{:.6}", c[(t, j)]));
            }
        }
        for j in 0..d_y {
            cells.push(format!("{:.6}", traj.observations[(t, j)]));
        }
        if let Some(x) = &traj.true_states {
            for j in 0..d_x {
                cells.push(format!("{:.6}", x[(t + 1, j)]));
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    fs::write(path, trajectory_to_csv(traj))
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

/// Reads any numeric CSV with a header into (column names, row-major data).
/// Used for inspecting emitted traces and oracle files.
pub fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Mat<f64>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::data("empty file"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|_| CliError::data(format!("line {}: non-numeric cell", i + 2)))?);
    }
    Ok((header, Mat::from_rows(&rows)))
}
