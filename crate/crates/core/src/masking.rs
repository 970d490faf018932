//! Per-token training masks: only planner-generated tokens enter the loss.

use serde::{Deserialize, Serialize};

use crate::trajectory::{check_span_partition, SpanOrigin, Trajectory, TrajectoryError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub trajectory_id: String,
    /// `true` = token contributes to the policy loss.
    pub bits: Vec<bool>,
}

impl LossMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_rle(&self) -> RleMask {
        let mut runs: Vec<(u8, usize)> = Vec::new();
        for &b in &self.bits {
            let v = u8::from(b);
            match runs.last_mut() {
                Some((last, n)) if *last == v => *n += 1,
                _ => runs.push((v, 1)),
            }
        }
        RleMask {
            length: self.bits.len(),
            runs,
        }
    }
}

/// Run-length encoded mask as stored in trajectory records:
/// `{"length": n, "runs": [[0, 12], [1, 30], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub length: usize,
    pub runs: Vec<(u8, usize)>,
}

impl RleMask {
    pub fn decode(&self, trajectory_id: &str) -> Result<LossMask, TrajectoryError> {
        let mut bits = Vec::with_capacity(self.length);
        for &(v, n) in &self.runs {
            if v > 1 {
                return Err(TrajectoryError::Malformed(format!("mask run value {v}")));
            }
            bits.extend(std::iter::repeat_n(v == 1, n));
        }
        if bits.len() != self.length {
            return Err(TrajectoryError::Malformed(format!(
                "mask runs cover {} tokens, expected {}",
                bits.len(),
                self.length
            )));
        }
        Ok(LossMask {
            trajectory_id: trajectory_id.into(),
            bits,
        })
    }
}

/// Mask over the trajectory's stored spans: 1 on `ModelGenerated` tokens,
/// 0 on prompt and retrieved tokens.
pub fn build_mask(t: &Trajectory) -> Result<LossMask, TrajectoryError> {
    let total = check_span_partition(&t.spans)?;
    let mut bits = vec![false; total];
    for span in t.spans.iter().filter(|s| s.origin == SpanOrigin::ModelGenerated) {
        bits[span.start..span.end].fill(true);
    }
    Ok(LossMask {
        trajectory_id: t.question.id.clone(),
        bits,
    })
}

pub fn masked_token_count(m: &LossMask) -> usize {
    m.bits.iter().filter(|b| **b).count()
}
