//! JSON Lines persistence for trajectories.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{build_mask, RleMask};
use crate::reward::RewardBreakdown;
use crate::trajectory::{Trajectory, TrajectoryError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path} line {line}: unsupported schema_version {found}")]
    Version { path: String, line: usize, found: u32 },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// One line of a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub trajectory: Trajectory,
    pub loss_mask: RleMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
}

impl TrajectoryRecord {
    pub fn new(trajectory: Trajectory) -> Result<Self, TrajectoryError> {
        let loss_mask = build_mask(&trajectory)?.to_rle();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            trajectory,
            loss_mask,
            reward: None,
        })
    }

    pub fn with_reward(mut self, reward: RewardBreakdown) -> Self {
        self.reward = Some(reward);
        self
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RecordError {
    RecordError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RecordError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| io_err(path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
    }
    f.flush().map_err(|e| io_err(path, e))
}

/// Reads one JSON value per non-blank line, reporting 1-based line numbers.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RecordError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[TrajectoryRecord]) -> Result<(), RecordError> {
    write_jsonl(path, records)
}

/// Reads and re-validates trajectory records.
pub fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>, RecordError> {
    let records: Vec<TrajectoryRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        if r.schema_version != SCHEMA_VERSION {
            return Err(RecordError::Version {
                path: path.display().to_string(),
                line: i + 1,
                found: r.schema_version,
            });
        }
        r.trajectory.validate()?;
    }
    Ok(records)
}
