//! Collect-then-update training loop, greedy evaluation and α sweeps.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{FeatureKind, FeatureMap, LinearPolicy};
use super::ppo::{ppo_update, Learner, PpoConfig, PpoError, ToyEpisode};
use super::world::{induced_trajectory, step_env, Action, ToyState, ToyWorld, WorldConfig};
use crate::parallel::map_bounded;
use crate::reward::{combine, format_ok, RewardBreakdown, RewardConfig, RewardInputs};
use crate::seed::{derive_seed, stream};
use crate::trajectory::count_actions;

fn default_updates() -> usize {
    2000
}
fn default_batch_size() -> usize {
    64
}
fn default_cost_scale() -> f64 {
    24.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_updates")]
    pub updates: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Multiplies α before it is applied, bringing the cost term to the
    /// magnitude of the toy utility.
    #[serde(default = "default_cost_scale")]
    pub cost_scale: f64,
    #[serde(default)]
    pub features: FeatureKind,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub world: WorldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            updates: default_updates(),
            batch_size: default_batch_size(),
            seed: 0,
            cost_scale: default_cost_scale(),
            features: FeatureKind::Full,
            ppo: PpoConfig::default(),
            world: WorldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.updates == 0 {
            out.push("toy.updates must be >= 1".into());
        }
        if self.batch_size == 0 {
            out.push("toy.batch_size must be >= 1".into());
        }
        if !(self.cost_scale > 0.0 && self.cost_scale.is_finite()) {
            out.push("toy.cost_scale must be a finite value > 0".into());
        }
        out.extend(self.ppo.problems());
        out.extend(self.world.problems());
        out
    }
}

/// Reward configuration the toy trainer actually applies.
pub fn toy_reward_config(cfg: &RewardConfig, cost_scale: f64) -> RewardConfig {
    RewardConfig {
        alpha: cfg.alpha * cost_scale,
        ..cfg.clone()
    }
}

/// Judge verdicts the scripted toy services return for an episode: exact
/// answer correctness, and process score 5 without redundant searches or
/// 1 with them.
pub fn toy_reward_inputs(world: &ToyWorld, qi: usize, actions: &[Action], max_turns: usize) -> RewardInputs {
    let t = induced_trajectory(world, qi, actions, max_turns);
    let q = &world.questions[qi];
    let correct = t.answer.as_deref() == Some(q.answer.as_str());
    // Actions past termination never ran.
    let redundant = actions[..t.turns.len().min(actions.len())].contains(&Action::SearchRedundant);
    RewardInputs {
        format_ok: format_ok(&t),
        counts: count_actions(&t),
        score_answer: u8::from(correct),
        score_direct: u8::from(q.direct_correct),
        score_rag: u8::from(q.rag_correct),
        process_score: Some(if redundant { 1 } else { 5 }),
    }
}

/// Memoized episode rewards; the number of distinct action sequences per
/// question is small.
pub struct ToyRewarder<'a> {
    world: &'a ToyWorld,
    cfg: RewardConfig,
    cache: HashMap<(usize, Vec<Action>), RewardBreakdown>,
}

impl<'a> ToyRewarder<'a> {
    pub fn new(world: &'a ToyWorld, cfg: RewardConfig) -> Self {
        Self {
            world,
            cfg,
            cache: HashMap::new(),
        }
    }

    pub fn config(&self) -> &RewardConfig {
        &self.cfg
    }

    pub fn reward(&mut self, qi: usize, actions: &[Action]) -> RewardBreakdown {
        if let Some(b) = self.cache.get(&(qi, actions.to_vec())) {
            return b.clone();
        }
        let inputs = toy_reward_inputs(self.world, qi, actions, self.cfg.max_turns);
        let b = combine(&inputs, &self.cfg);
        self.cache.insert((qi, actions.to_vec()), b.clone());
        b
    }
}

pub fn collect_episode<R: rand::Rng>(
    world: &ToyWorld,
    policy: &LinearPolicy,
    rewarder: &mut ToyRewarder<'_>,
    qi: usize,
    rng: &mut R,
) -> ToyEpisode {
    let max_turns = rewarder.config().max_turns;
    let mut s = ToyState::initial(world, qi);
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut old_logps = Vec::new();
    loop {
        let (a, logp) = policy.sample(&s, rng);
        states.push(s);
        actions.push(a);
        old_logps.push(logp);
        let (next, done, _) = step_env(s, a, max_turns);
        s = next;
        if done {
            break;
        }
    }
    let breakdown = rewarder.reward(qi, &actions);
    let n = actions.len();
    let mut rewards = vec![0.0; n];
    rewards[n - 1] = breakdown.total;
    ToyEpisode {
        question: qi,
        states,
        actions,
        old_logps,
        rewards,
        mask: vec![true; n],
        breakdown,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: usize,
    pub mean_total: f64,
    pub mean_outcome: f64,
    pub mean_process: f64,
    pub mean_format: f64,
    pub mean_turns: f64,
    pub mean_subqueries: f64,
    pub answer_rate: f64,
    pub objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyEval {
    pub mean_total: f64,
    pub mean_turns: f64,
    pub mean_subqueries: f64,
    pub accuracy: f64,
    pub format_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub alpha: f64,
    pub effective_alpha: f64,
    pub seed: u64,
    pub log: Vec<UpdateLog>,
    pub policy: LinearPolicy,
    pub greedy: GreedyEval,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs the argmax policy once on every question.
pub fn greedy_eval(world: &ToyWorld, policy: &LinearPolicy, rewarder: &mut ToyRewarder<'_>) -> GreedyEval {
    let max_turns = rewarder.config().max_turns;
    let mut rows = Vec::new();
    for qi in 0..world.questions.len() {
        let mut s = ToyState::initial(world, qi);
        let mut actions = Vec::new();
        loop {
            let a = policy.greedy(&s);
            actions.push(a);
            let (next, done, _) = step_env(s, a, max_turns);
            s = next;
            if done {
                break;
            }
        }
        rows.push(rewarder.reward(qi, &actions));
    }
    GreedyEval {
        mean_total: mean(rows.iter().map(|b| b.total)),
        mean_turns: mean(rows.iter().map(|b| b.counts.planning_turns as f64)),
        mean_subqueries: mean(rows.iter().map(|b| b.counts.total_subqueries as f64)),
        accuracy: mean(rows.iter().map(|b| f64::from(b.score_answer.unwrap_or(0)))),
        format_pass_rate: mean(rows.iter().map(|b| f64::from(u8::from(b.r_format == 0.0)))),
    }
}

/// Trains a fresh policy on `world`. `reward_cfg.alpha` is the nominal α;
/// the applied value is `alpha * cost_scale`.
pub fn train(world: &ToyWorld, reward_cfg: &RewardConfig, cfg: &TrainConfig) -> Result<TrainResult, PpoError> {
    if let Some(p) = cfg.problems().into_iter().chain(reward_cfg.problems()).next() {
        return Err(PpoError::InvalidConfig(p));
    }
    let applied = toy_reward_config(reward_cfg, cfg.cost_scale);
    let mut rewarder = ToyRewarder::new(world, applied.clone());
    let map = FeatureMap::new(cfg.features, applied.max_turns, applied.max_subqueries);
    let mut learner = Learner::new(LinearPolicy::zeros(map), &cfg.ppo);
    let mut rng = stream(cfg.seed, "toy/collect");
    let n_questions = world.questions.len();
    let mut log = Vec::with_capacity(cfg.updates);
    for update in 0..cfg.updates {
        let batch: Vec<ToyEpisode> = (0..cfg.batch_size)
            .map(|_| {
                let qi = rng.random_range(0..n_questions);
                collect_episode(world, &learner.policy, &mut rewarder, qi, &mut rng)
            })
            .collect();
        let diag = ppo_update(&mut learner, &batch, &cfg.ppo)?;
        log.push(UpdateLog {
            update,
            mean_total: mean(batch.iter().map(|e| e.breakdown.total)),
            mean_outcome: mean(batch.iter().map(|e| e.breakdown.r_outcome)),
            mean_process: mean(batch.iter().map(|e| e.breakdown.r_process)),
            mean_format: mean(batch.iter().map(|e| e.breakdown.r_format)),
            mean_turns: mean(batch.iter().map(|e| e.breakdown.counts.planning_turns as f64)),
            mean_subqueries: mean(batch.iter().map(|e| e.breakdown.counts.total_subqueries as f64)),
            answer_rate: mean(batch.iter().map(|e| {
                f64::from(u8::from(e.actions.last() == Some(&Action::CallAnswer)))
            })),
            objective: diag.objective,
            mean_ratio: diag.mean_ratio,
            clip_fraction: diag.clip_fraction,
            value_loss: diag.value_loss,
        });
    }
    let greedy = greedy_eval(world, &learner.policy, &mut rewarder);
    Ok(TrainResult {
        alpha: reward_cfg.alpha,
        effective_alpha: applied.alpha,
        seed: cfg.seed,
        log,
        policy: learner.policy,
        greedy,
    })
}

/// Index of the first update at which the moving average of `series`
/// (window `window`) has covered `fraction` of the way from its starting
/// value to the final value (mean of the last tenth of the raw series).
pub fn updates_to_fraction(series: &[f64], fraction: f64, window: usize) -> Option<usize> {
    if series.is_empty() {
        return None;
    }
    let w = window.max(1);
    let smoothed: Vec<f64> = (0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(w - 1);
            mean(series[lo..=i].iter().copied())
        })
        .collect();
    let tail = (series.len() / 10).max(1);
    let final_value = mean(series[series.len() - tail..].iter().copied());
    let start = smoothed[0];
    let target = start + fraction * (final_value - start);
    let rising = final_value >= start;
    smoothed
        .iter()
        .position(|&v| if rising { v >= target } else { v <= target })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub alpha: f64,
    pub effective_alpha: f64,
    pub seeds: Vec<u64>,
    pub mean_total: f64,
    pub mean_turns: f64,
    pub mean_subqueries: f64,
    pub accuracy: f64,
    pub per_seed_turns: Vec<f64>,
}

/// Trains one policy per (α, seed) pair, α-major. Each seed uses its own
/// world.
pub fn sweep_runs(
    reward_cfg: &RewardConfig,
    cfg: &TrainConfig,
    alphas: &[f64],
    seeds: &[u64],
    parallelism: usize,
) -> Result<Vec<TrainResult>, PpoError> {
    let jobs: Vec<(f64, u64)> = alphas
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    map_bounded(&jobs, parallelism, |_, &(alpha, seed)| {
        let world = ToyWorld::generate(&cfg.world, derive_seed(seed, "toy/world"));
        let run_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        train(&world, &reward_cfg.clone().with_alpha(alpha), &run_cfg)
    })
    .into_iter()
    .collect()
}

/// Averages greedy evaluations across seeds for each α of a sweep.
pub fn summarize_sweep(alphas: &[f64], seeds: &[u64], results: &[TrainResult]) -> Vec<ParetoRow> {
    alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| {
            let runs = &results[i * seeds.len()..(i + 1) * seeds.len()];
            ParetoRow {
                alpha,
                effective_alpha: runs[0].effective_alpha,
                seeds: seeds.to_vec(),
                mean_total: mean(runs.iter().map(|r| r.greedy.mean_total)),
                mean_turns: mean(runs.iter().map(|r| r.greedy.mean_turns)),
                mean_subqueries: mean(runs.iter().map(|r| r.greedy.mean_subqueries)),
                accuracy: mean(runs.iter().map(|r| r.greedy.accuracy)),
                per_seed_turns: runs.iter().map(|r| r.greedy.mean_turns).collect(),
            }
        })
        .collect()
}

pub fn pareto_sweep(
    reward_cfg: &RewardConfig,
    cfg: &TrainConfig,
    alphas: &[f64],
    seeds: &[u64],
    parallelism: usize,
) -> Result<Vec<ParetoRow>, PpoError> {
    let results = sweep_runs(reward_cfg, cfg, alphas, seeds, parallelism)?;
    Ok(summarize_sweep(alphas, seeds, &results))
}
