//! Clipped-ratio policy optimization for the linear toy policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::policy::{LinearPolicy, ValueHead, N_ACTIONS};
use super::world::{Action, ToyState};
use crate::reward::RewardBreakdown;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpoError {
    #[error("rewards ({rewards}) and values ({values}) differ in length")]
    LengthMismatch { rewards: usize, values: usize },
    #[error("non-finite gradient in epoch {epoch}")]
    NonFiniteGradient { epoch: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid ppo config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

fn default_epsilon() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    3e-3
}
fn default_epochs() -> usize {
    4
}
fn default_gamma() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Weight of the KL(π_old ‖ π) penalty; 0 disables it.
    #[serde(default)]
    pub kl_coef: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            lr: default_lr(),
            epochs: default_epochs(),
            gamma: default_gamma(),
            lambda: default_lambda(),
            kl_coef: 0.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl PpoConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            out.push("toy.ppo.epsilon must be > 0".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push("toy.ppo.lr must be a finite value > 0".into());
        }
        if self.epochs == 0 {
            out.push("toy.ppo.epochs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            out.push("toy.ppo.gamma and toy.ppo.lambda must lie in [0, 1]".into());
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            out.push("toy.ppo.kl_coef must be a finite value >= 0".into());
        }
        out
    }
}

/// `A_t = δ_t + γλ A_{t+1}`, `δ_t = r_t + γ V_{t+1} − V_t`, with `V = 0`
/// past the final step.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>, PpoError> {
    if rewards.len() != values.len() {
        return Err(PpoError::LengthMismatch {
            rewards: rewards.len(),
            values: values.len(),
        });
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    Ok(adv)
}

/// One collected episode. Rewards are zero except on the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEpisode {
    pub question: usize,
    pub states: Vec<ToyState>,
    pub actions: Vec<Action>,
    pub old_logps: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Every action is a policy output, so all steps are included.
    pub mask: Vec<bool>,
    pub breakdown: RewardBreakdown,
}

/// One action step prepared for the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoStep {
    pub phi: Vec<f64>,
    pub action: usize,
    pub old_logp: f64,
    pub old_probs: [f64; N_ACTIONS],
    pub advantage: f64,
    pub mask: bool,
}

/// Returns `(unclipped, clipped)` surrogate terms; the clipped term is the
/// pointwise minimum and never exceeds the unclipped one.
pub fn surrogate(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    (unclipped, unclipped.min(clipped))
}

fn kl(old: &[f64; N_ACTIONS], new: &[f64; N_ACTIONS]) -> f64 {
    old.iter()
        .zip(new)
        .filter(|(o, _)| **o > 0.0)
        .map(|(o, n)| o * (o.ln() - n.ln()))
        .sum()
}

/// Mean clipped surrogate over masked steps minus the optional KL penalty.
pub fn clipped_objective(weights: &[f64], steps: &[PpoStep], epsilon: f64, kl_coef: f64) -> f64 {
    let n = steps.iter().filter(|s| s.mask).count().max(1) as f64;
    let mut total = 0.0;
    for s in steps.iter().filter(|s| s.mask) {
        let p = LinearPolicy::probs_with(weights, &s.phi);
        let ratio = (p[s.action].ln() - s.old_logp).exp();
        total += surrogate(ratio, s.advantage, epsilon).1;
        if kl_coef > 0.0 {
            total -= kl_coef * kl(&s.old_probs, &p);
        }
    }
    total / n
}

/// Objective value and its analytic gradient with respect to the policy
/// weights.
pub fn clipped_objective_grad(
    weights: &[f64],
    steps: &[PpoStep],
    epsilon: f64,
    kl_coef: f64,
) -> (f64, Vec<f64>) {
    let n = steps.iter().filter(|s| s.mask).count().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for s in steps.iter().filter(|s| s.mask) {
        let d = s.phi.len();
        let p = LinearPolicy::probs_with(weights, &s.phi);
        let ratio = (p[s.action].ln() - s.old_logp).exp();
        let (unclipped, clipped) = surrogate(ratio, s.advantage, epsilon);
        total += clipped;
        // d/dw_b log π(a) = (1[b=a] − π_b) φ
        if unclipped <= clipped {
            let scale = s.advantage * ratio;
            for b in 0..N_ACTIONS {
                let coef = scale * (f64::from(u8::from(b == s.action)) - p[b]);
                for j in 0..d {
                    grad[b * d + j] += coef * s.phi[j];
                }
            }
        }
        if kl_coef > 0.0 {
            total -= kl_coef * kl(&s.old_probs, &p);
            // d/dw_b KL(old ‖ π) = (π_b − old_b) φ
            for b in 0..N_ACTIONS {
                let coef = -kl_coef * (p[b] - s.old_probs[b]);
                for j in 0..d {
                    grad[b * d + j] += coef * s.phi[j];
                }
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

/// First-order optimizer taking ascent steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] += self.lr * mh / (vh.sqrt() + EPS);
                }
            }
        }
    }
}

/// Policy and value parameters with their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub policy: LinearPolicy,
    pub value: ValueHead,
    policy_opt: Optimizer,
    value_opt: Optimizer,
}

impl Learner {
    pub fn new(policy: LinearPolicy, cfg: &PpoConfig) -> Self {
        let d = policy.map.dim();
        Self {
            policy_opt: Optimizer::new(cfg.optimizer, cfg.lr, policy.n_params()),
            value_opt: Optimizer::new(cfg.optimizer, cfg.lr, d),
            value: ValueHead::zeros(d),
            policy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub mean_advantage: f64,
}

/// Builds per-step inputs: features, old log-probabilities, GAE advantages
/// from the current value head, and value targets.
pub fn prepare_steps(
    learner: &Learner,
    episodes: &[ToyEpisode],
    cfg: &PpoConfig,
) -> Result<(Vec<PpoStep>, Vec<f64>), PpoError> {
    let mut steps = Vec::new();
    let mut returns = Vec::new();
    for ep in episodes {
        let phis: Vec<Vec<f64>> = ep.states.iter().map(|s| learner.policy.map.features(s)).collect();
        let values: Vec<f64> = phis.iter().map(|phi| learner.value.value(phi)).collect();
        let adv = compute_gae(&ep.rewards, &values, cfg.gamma, cfg.lambda)?;
        for (t, phi) in phis.into_iter().enumerate() {
            returns.push(adv[t] + values[t]);
            steps.push(PpoStep {
                old_probs: LinearPolicy::probs_with(&learner.policy.weights, &phi),
                phi,
                action: ep.actions[t].index(),
                old_logp: ep.old_logps[t],
                advantage: adv[t],
                mask: ep.mask[t],
            });
        }
    }
    Ok((steps, returns))
}

/// Runs `cfg.epochs` full-batch ascent steps on the clipped objective and
/// regresses the value head onto the GAE returns. On a non-finite gradient
/// the learner is left unchanged.
pub fn ppo_update(
    learner: &mut Learner,
    episodes: &[ToyEpisode],
    cfg: &PpoConfig,
) -> Result<PpoDiagnostics, PpoError> {
    if episodes.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    if let Some(p) = cfg.problems().into_iter().next() {
        return Err(PpoError::InvalidConfig(p));
    }
    let (steps, returns) = prepare_steps(learner, episodes, cfg)?;
    let mut next = learner.clone();
    let mut objective = 0.0;
    let mut value_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let (obj, grad) = clipped_objective_grad(&next.policy.weights, &steps, cfg.epsilon, cfg.kl_coef);
        if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(PpoError::NonFiniteGradient { epoch });
        }
        objective = obj;
        next.policy_opt.ascend(&mut next.policy.weights, &grad);

        let d = next.value.weights.len();
        let mut vgrad = vec![0.0; d];
        value_loss = 0.0;
        for (s, r) in steps.iter().zip(&returns) {
            let err = next.value.value(&s.phi) - r;
            value_loss += 0.5 * err * err;
            for (g, x) in vgrad.iter_mut().zip(&s.phi) {
                *g -= err * x;
            }
        }
        let n = steps.len() as f64;
        value_loss /= n;
        vgrad.iter_mut().for_each(|g| *g /= n);
        if vgrad.iter().any(|g| !g.is_finite()) {
            return Err(PpoError::NonFiniteGradient { epoch });
        }
        next.value_opt.ascend(&mut next.value.weights, &vgrad);
    }
    let masked: Vec<&PpoStep> = steps.iter().filter(|s| s.mask).collect();
    let n = masked.len().max(1) as f64;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    for s in &masked {
        let p = LinearPolicy::probs_with(&next.policy.weights, &s.phi);
        let r = (p[s.action].ln() - s.old_logp).exp();
        ratio_sum += r;
        if (r - 1.0).abs() > cfg.epsilon {
            clipped += 1;
        }
    }
    *learner = next;
    Ok(PpoDiagnostics {
        objective,
        mean_ratio: ratio_sum / n,
        clip_fraction: clipped as f64 / n,
        value_loss,
        mean_advantage: masked.iter().map(|s| s.advantage).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;
    use crate::toy::policy::{FeatureKind, FeatureMap};
    use rand::Rng;

    fn state(rem: usize, turns: usize) -> ToyState {
        ToyState {
            question: 0,
            hops: 4,
            revealed: 4 - rem,
            turns,
            subqueries: turns,
            redundant: 0,
        }
    }

    fn breakdown(total: f64) -> RewardBreakdown {
        RewardBreakdown {
            r_outcome: 0.0,
            r_process: 0.0,
            r_utility: 0.0,
            r_cost_turn: 0.0,
            r_cost_query: 0.0,
            r_cost: 0.0,
            r_format: 0.0,
            total,
            alpha: 0.0,
            counts: Default::default(),
            score_answer: None,
            process_score: None,
            warnings: vec![],
        }
    }

    fn episode(policy: &LinearPolicy, actions: &[Action], reward: f64) -> ToyEpisode {
        let mut states = Vec::new();
        let mut s = state(2, 0);
        for &a in actions {
            states.push(s);
            s = super::super::world::step_env(s, a, 5).0;
        }
        let n = actions.len();
        let mut rewards = vec![0.0; n];
        rewards[n - 1] = reward;
        ToyEpisode {
            question: 0,
            old_logps: states
                .iter()
                .zip(actions)
                .map(|(s, a)| policy.probs(s)[a.index()].ln())
                .collect(),
            states,
            actions: actions.to_vec(),
            rewards,
            mask: vec![true; n],
            breakdown: breakdown(reward),
        }
    }

    #[test]
    fn gae_examples() {
        assert_eq!(compute_gae(&[2.5], &[0.0], 0.3, 0.7).unwrap(), vec![2.5]);
        assert_eq!(compute_gae(&[0.0; 3], &[0.0; 3], 1.0, 0.95).unwrap(), vec![0.0; 3]);
        assert_eq!(compute_gae(&[1.0, 2.0, 3.0], &[0.0; 3], 1.0, 1.0).unwrap(), vec![6.0, 5.0, 3.0]);
        assert_eq!(
            compute_gae(&[1.0], &[0.0, 1.0], 1.0, 1.0),
            Err(PpoError::LengthMismatch { rewards: 1, values: 2 })
        );
        // With values, λ = 0 gives one-step TD errors.
        let a = compute_gae(&[0.0, 1.0], &[0.5, 0.25], 1.0, 0.0).unwrap();
        assert_eq!(a, vec![0.25 - 0.5, 1.0 - 0.25]);
    }

    #[test]
    fn clipped_never_exceeds_unclipped() {
        let mut rng = stream(5, "surrogate");
        for _ in 0..10_000 {
            let r: f64 = rng.random_range(0.0..3.0);
            let a: f64 = rng.random_range(-2.0..2.0);
            let (u, c) = surrogate(r, a, 0.2);
            assert!(c <= u);
        }
    }

    #[test]
    fn positive_advantage_raises_taken_action_probability() {
        let map = FeatureMap::new(FeatureKind::Full, 5, 10);
        let mut learner = Learner::new(LinearPolicy::zeros(map), &PpoConfig::default());
        let actions = [Action::SearchNext, Action::SearchNext, Action::CallAnswer];
        let ep = episode(&learner.policy, &actions, 1.0);
        let before: Vec<f64> = ep.states.iter().zip(&actions).map(|(s, a)| learner.policy.probs(s)[a.index()]).collect();
        ppo_update(&mut learner, std::slice::from_ref(&ep), &PpoConfig::default()).unwrap();
        for ((s, a), b) in ep.states.iter().zip(&actions).zip(before) {
            assert!(learner.policy.probs(s)[a.index()] > b);
        }
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let map = FeatureMap::new(FeatureKind::Full, 5, 10);
        let mut learner = Learner::new(LinearPolicy::zeros(map), &PpoConfig::default());
        learner.policy.weights[3] = 0.4;
        let ep = episode(&learner.policy, &[Action::SearchNext, Action::CallAnswer], 0.0);
        let before = learner.policy.clone();
        ppo_update(&mut learner, &[ep], &PpoConfig::default()).unwrap();
        assert_eq!(learner.policy, before);
    }

    #[test]
    fn rejects_empty_batch_and_non_finite() {
        let map = FeatureMap::new(FeatureKind::Compact, 5, 10);
        let mut learner = Learner::new(LinearPolicy::zeros(map), &PpoConfig::default());
        assert_eq!(ppo_update(&mut learner, &[], &PpoConfig::default()), Err(PpoError::EmptyBatch));
        let ep = episode(&learner.policy, &[Action::SearchNext, Action::CallAnswer], f64::NAN);
        let before = learner.clone();
        assert!(matches!(
            ppo_update(&mut learner, &[ep], &PpoConfig::default()),
            Err(PpoError::NonFiniteGradient { .. })
        ));
        assert_eq!(learner, before);
    }

    fn random_steps(seed: u64, n: usize, d: usize, current: &[f64]) -> Vec<PpoStep> {
        let mut rng = stream(seed, "steps");
        let old: Vec<f64> = current.iter().map(|w| w + rng.random_range(-0.3..0.3)).collect();
        (0..n)
            .map(|_| {
                let mut phi: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                phi[0] = 1.0;
                let old_probs = LinearPolicy::probs_with(&old, &phi);
                let action = rng.random_range(0..N_ACTIONS);
                PpoStep {
                    old_logp: old_probs[action].ln(),
                    old_probs,
                    phi,
                    action,
                    advantage: rng.random_range(-1.5..1.5),
                    mask: true,
                }
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let d = 3;
        let mut rng = stream(11, "weights");
        let w: Vec<f64> = (0..d * N_ACTIONS).map(|_| rng.random_range(-0.5..0.5)).collect();
        for kl_coef in [0.0, 0.1] {
            let steps = random_steps(3, 12, d, &w);
            let (_, g) = clipped_objective_grad(&w, &steps, 0.2, kl_coef);
            let h = 1e-6;
            for i in 0..w.len() {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                let fd = (clipped_objective(&wp, &steps, 0.2, kl_coef)
                    - clipped_objective(&wm, &steps, 0.2, kl_coef))
                    / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5, "param {i}: analytic {} vs fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn infinite_epsilon_epoch_is_vanilla_policy_gradient() {
        let map = FeatureMap::new(FeatureKind::Full, 5, 10);
        let cfg = PpoConfig {
            epsilon: f64::INFINITY,
            epochs: 1,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            ..Default::default()
        };
        let mut learner = Learner::new(LinearPolicy::zeros(map), &cfg);
        learner.policy.weights[2] = 0.3;
        learner.policy.weights[9] = -0.2;
        let w0 = learner.policy.weights.clone();
        let batch = vec![
            episode(&learner.policy, &[Action::SearchNext, Action::SearchNext, Action::CallAnswer], 1.5),
            episode(&learner.policy, &[Action::CallAnswer], -1.0),
            episode(&learner.policy, &[Action::SearchRedundant, Action::CallAnswer], 0.6),
        ];
        ppo_update(&mut learner, &batch, &cfg).unwrap();

        // Oracle: w + lr ∇ mean_t A_t log π(a_t|s_t) with A_t = λ^(T−1−t) R
        // (zero value head), gradient by central differences.
        let mut terms = Vec::new();
        for ep in &batch {
            let n = ep.actions.len();
            for t in 0..n {
                let adv = cfg.lambda.powi((n - 1 - t) as i32) * ep.rewards[n - 1];
                terms.push((map.features(&ep.states[t]), ep.actions[t].index(), adv));
            }
        }
        let j = |w: &[f64]| {
            terms
                .iter()
                .map(|(phi, a, adv)| adv * LinearPolicy::probs_with(w, phi)[*a].ln())
                .sum::<f64>()
                / terms.len() as f64
        };
        for i in 0..w0.len() {
            let h = 1e-6;
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[i] += h;
            wm[i] -= h;
            let expected = w0[i] + cfg.lr * (j(&wp) - j(&wm)) / (2.0 * h);
            assert!((learner.policy.weights[i] - expected).abs() < 1e-8, "param {i}");
        }
    }
}
