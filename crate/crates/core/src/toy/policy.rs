//! Linear softmax policy and linear value head over toy states.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{Action, ToyState};

pub const N_ACTIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// bias, first turn, remaining hops one-hot (0, 1, 2, 3+), turns/M_t, sub-queries/M_q
    #[default]
    Full,
    /// bias, nothing remaining, turns/M_t
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    pub max_turns: usize,
    pub max_subqueries: usize,
}

impl FeatureMap {
    pub fn new(kind: FeatureKind, max_turns: usize, max_subqueries: usize) -> Self {
        Self {
            kind,
            max_turns,
            max_subqueries,
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            FeatureKind::Full => 8,
            FeatureKind::Compact => 3,
        }
    }

    pub fn features(&self, s: &ToyState) -> Vec<f64> {
        let ind = |b: bool| if b { 1.0 } else { 0.0 };
        let rem = s.remaining();
        let turns = s.turns as f64 / self.max_turns as f64;
        match self.kind {
            FeatureKind::Full => vec![
                1.0,
                ind(s.turns == 0),
                ind(rem == 0),
                ind(rem == 1),
                ind(rem == 2),
                ind(rem >= 3),
                turns,
                s.subqueries as f64 / self.max_subqueries as f64,
            ],
            FeatureKind::Compact => vec![1.0, ind(rem == 0), turns],
        }
    }
}

pub fn softmax(logits: &[f64; N_ACTIONS]) -> [f64; N_ACTIONS] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

/// `logits[a] = w[a] · φ(s)`, weights stored action-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub map: FeatureMap,
    pub weights: Vec<f64>,
}

impl LinearPolicy {
    pub fn zeros(map: FeatureMap) -> Self {
        Self {
            weights: vec![0.0; map.dim() * N_ACTIONS],
            map,
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    pub fn logits_with(weights: &[f64], phi: &[f64]) -> [f64; N_ACTIONS] {
        let d = phi.len();
        std::array::from_fn(|a| {
            weights[a * d..(a + 1) * d]
                .iter()
                .zip(phi)
                .map(|(w, x)| w * x)
                .sum()
        })
    }

    pub fn probs_with(weights: &[f64], phi: &[f64]) -> [f64; N_ACTIONS] {
        softmax(&Self::logits_with(weights, phi))
    }

    pub fn probs(&self, s: &ToyState) -> [f64; N_ACTIONS] {
        Self::probs_with(&self.weights, &self.map.features(s))
    }

    pub fn sample<R: Rng>(&self, s: &ToyState, rng: &mut R) -> (Action, f64) {
        let p = self.probs(s);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return (Action::from_index(i), pi.ln());
            }
        }
        (Action::from_index(N_ACTIONS - 1), p[N_ACTIONS - 1].ln())
    }

    /// Most probable action; ties go to the lowest index.
    pub fn greedy(&self, s: &ToyState) -> Action {
        let p = self.probs(s);
        let mut best = 0;
        for i in 1..N_ACTIONS {
            if p[i] > p[best] {
                best = i;
            }
        }
        Action::from_index(best)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    pub weights: Vec<f64>,
}

impl ValueHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
        }
    }

    pub fn value(&self, phi: &[f64]) -> f64 {
        self.weights.iter().zip(phi).map(|(w, x)| w * x).sum()
    }
}
