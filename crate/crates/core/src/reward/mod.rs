//! Reward decomposition for one planning trajectory.
//!
//! ```text
//! outcome = 1/2 + Score(a) - 1/2 * max(Score(a_direct), Score(a_rag))   in {0, .5, 1, 1.5}
//! process = scale(judge score 1..5)                                      in [0, .5]
//! utility = outcome + process
//! cost    = max(0, 1 - L/M_t) + max(0, 1 - sum|sq|/M_q)
//! total   = utility + alpha * cost       when the format gate passes
//!         = invalid_format_reward (-1)   otherwise
//! ```

mod baseline;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baseline::{
    answer_direct, answer_rag, render_documents, BaselineKey, BaselinePrompts, BaselineRunner,
    BaselineScores, BaselineStore,
};

use crate::clients::{judge_process_score, judge_yes_no, ChatModel, ClientError, JudgeError};
use crate::prompt::{defaults, PromptTemplate};
use crate::trajectory::{count_actions, serialize_trajectory, ActionCounts, Question, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("reward unavailable: {0}")]
    RewardUnavailable(#[from] ClientError),
    #[error("search failed while computing baselines: {0}")]
    Search(String),
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("baseline store: {0}")]
    Store(String),
    #[error("template: {0}")]
    Template(String),
}

/// Maps judge scores 1..=5 into the process-reward range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessScale(pub [f64; 5]);

impl Default for ProcessScale {
    /// `s / 10`: 1 → 0.1, 5 → 0.5.
    fn default() -> Self {
        Self([0.1, 0.2, 0.3, 0.4, 0.5])
    }
}

impl ProcessScale {
    pub fn map(&self, score: u8) -> f64 {
        match score {
            1..=5 => self.0[score as usize - 1],
            _ => 0.0,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.0.iter().any(|v| !(0.0..=0.5).contains(v)) {
            out.push("reward.process_scale values must lie in [0, 0.5]".to_string());
        }
        if self.0.windows(2).any(|w| w[0] > w[1]) {
            out.push("reward.process_scale must be non-decreasing".to_string());
        }
        out
    }
}

fn default_max_turns() -> usize {
    5
}
fn default_max_subqueries() -> usize {
    10
}
fn default_invalid_format_reward() -> f64 {
    -1.0
}
fn default_verdict_retries() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    #[serde(default)]
    pub alpha: f64,
    /// Turn threshold M_t.
    #[serde(default = "default_max_turns")]
    pub max_turns: usize,
    /// Sub-query threshold M_q.
    #[serde(default = "default_max_subqueries")]
    pub max_subqueries: usize,
    #[serde(default)]
    pub process_scale: ProcessScale,
    #[serde(default = "default_invalid_format_reward")]
    pub invalid_format_reward: f64,
    /// Extra judge calls when a verdict cannot be parsed.
    #[serde(default = "default_verdict_retries")]
    pub verdict_retries: u32,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            max_turns: default_max_turns(),
            max_subqueries: default_max_subqueries(),
            process_scale: ProcessScale::default(),
            invalid_format_reward: default_invalid_format_reward(),
            verdict_retries: default_verdict_retries(),
        }
    }
}

impl RewardConfig {
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            out.push(format!("reward.alpha must be a finite value >= 0 (got {})", self.alpha));
        }
        if self.max_turns < 1 {
            out.push("reward.max_turns must be >= 1".into());
        }
        if self.max_subqueries < 1 {
            out.push("reward.max_subqueries must be >= 1".into());
        }
        out.extend(self.process_scale.problems());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_outcome: f64,
    pub r_process: f64,
    pub r_utility: f64,
    pub r_cost_turn: f64,
    pub r_cost_query: f64,
    pub r_cost: f64,
    pub r_format: f64,
    pub total: f64,
    pub alpha: f64,
    pub counts: ActionCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_answer: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process_score: Option<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn outcome_from_scores(score_answer: u8, score_direct: u8, score_rag: u8) -> f64 {
    let best = score_direct.max(score_rag) as f64;
    0.5 + score_answer as f64 - 0.5 * best
}

pub fn outcome_reward(score_answer: u8, baselines: &BaselineScores) -> f64 {
    outcome_from_scores(score_answer, baselines.score_direct, baselines.score_rag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReward {
    pub turn: f64,
    pub query: f64,
    pub total: f64,
}

fn saving(used: usize, threshold: usize) -> f64 {
    // (M - x) / M rounds once, so e.g. L=2, M_t=5 gives exactly 0.6.
    let m = threshold as f64;
    ((m - used as f64) / m).max(0.0)
}

pub fn cost_reward(planning_turns: usize, total_subqueries: usize, cfg: &RewardConfig) -> CostReward {
    let turn = saving(planning_turns, cfg.max_turns);
    let query = saving(total_subqueries, cfg.max_subqueries);
    CostReward {
        turn,
        query,
        total: turn + query,
    }
}

/// Whether the trajectory passes the format gate: well-formed tool calls,
/// at least one search and exactly one generator call.
pub fn format_ok(t: &Trajectory) -> bool {
    let c = count_actions(t);
    t.malformed_outputs.is_empty()
        && t.turns.iter().all(|turn| turn.tool_call.validate().is_ok())
        && c.n_search >= 1
        && c.n_answer == 1
        && t.answer.is_some()
}

pub fn format_reward(t: &Trajectory) -> f64 {
    if format_ok(t) {
        0.0
    } else {
        -1.0
    }
}

/// Judge verdicts and counts feeding [`combine`].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardInputs {
    pub format_ok: bool,
    pub counts: ActionCounts,
    pub score_answer: u8,
    pub score_direct: u8,
    pub score_rag: u8,
    pub process_score: Option<u8>,
}

/// Assembles the breakdown from already-judged inputs. Both the service-
/// backed engine and the toy trainer go through this function.
pub fn combine(inputs: &RewardInputs, cfg: &RewardConfig) -> RewardBreakdown {
    let cost = cost_reward(inputs.counts.planning_turns, inputs.counts.total_subqueries, cfg);
    if !inputs.format_ok {
        return RewardBreakdown {
            r_outcome: 0.0,
            r_process: 0.0,
            r_utility: 0.0,
            r_cost_turn: cost.turn,
            r_cost_query: cost.query,
            r_cost: cost.total,
            r_format: -1.0,
            total: cfg.invalid_format_reward,
            alpha: cfg.alpha,
            counts: inputs.counts,
            score_answer: None,
            process_score: None,
            warnings: Vec::new(),
        };
    }
    let r_outcome = outcome_from_scores(inputs.score_answer, inputs.score_direct, inputs.score_rag);
    let r_process = inputs
        .process_score
        .map_or(0.0, |s| cfg.process_scale.map(s));
    let r_utility = r_outcome + r_process;
    RewardBreakdown {
        r_outcome,
        r_process,
        r_utility,
        r_cost_turn: cost.turn,
        r_cost_query: cost.query,
        r_cost: cost.total,
        r_format: 0.0,
        total: r_utility + cfg.alpha * cost.total,
        alpha: cfg.alpha,
        counts: inputs.counts,
        score_answer: Some(inputs.score_answer),
        process_score: inputs.process_score,
        warnings: Vec::new(),
    }
}

impl RewardBreakdown {
    /// Recomputes cost and total under `cfg` from the stored judge outcomes,
    /// without any judge call.
    pub fn reweighted(&self, cfg: &RewardConfig) -> RewardBreakdown {
        let cost = cost_reward(self.counts.planning_turns, self.counts.total_subqueries, cfg);
        let gated = self.r_format < 0.0;
        RewardBreakdown {
            r_cost_turn: cost.turn,
            r_cost_query: cost.query,
            r_cost: cost.total,
            total: if gated {
                cfg.invalid_format_reward
            } else {
                self.r_utility + cfg.alpha * cost.total
            },
            alpha: cfg.alpha,
            ..self.clone()
        }
    }
}

/// Binary answer scoring through a judge model.
#[derive(Clone)]
pub struct AnswerScorer {
    judge: Arc<dyn ChatModel>,
    template: PromptTemplate,
    verdict_retries: u32,
}

/// A verdict plus a warning when the judge's reply had to be discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub score: u8,
    pub warning: Option<String>,
}

impl AnswerScorer {
    pub fn new(judge: Arc<dyn ChatModel>, template: PromptTemplate, verdict_retries: u32) -> Self {
        Self {
            judge,
            template,
            verdict_retries,
        }
    }

    pub fn with_defaults(judge: Arc<dyn ChatModel>) -> Self {
        Self::new(judge, defaults::answer_judge(), default_verdict_retries())
    }

    pub fn judge_id(&self) -> &str {
        self.judge.id()
    }

    /// Multiple ground truths are presented to the judge joined by `"; "`.
    /// Unparseable verdicts are retried, then count as incorrect.
    pub fn score(&self, q: &Question, answer: &str) -> Result<Verdict, RewardError> {
        let gt = q.ground_truth.join("; ");
        let mut last = String::new();
        for _ in 0..=self.verdict_retries {
            match judge_yes_no(self.judge.as_ref(), &q.text, &gt, answer, &self.template) {
                Ok(score) => return Ok(Verdict { score, warning: None }),
                Err(JudgeError::UnparseableVerdict(reply)) => last = reply,
                Err(JudgeError::Client(e)) => return Err(e.into()),
                Err(JudgeError::Template(m)) => return Err(RewardError::Template(m)),
            }
        }
        Ok(Verdict {
            score: 0,
            warning: Some(format!("unparseable answer verdict {last:?}; scored 0")),
        })
    }
}

/// Process reward with its raw judge score, if one was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessOutcome {
    pub value: f64,
    pub score: Option<u8>,
    pub warning: Option<String>,
}

/// Computes reward breakdowns with judge calls.
#[derive(Clone)]
pub struct RewardEngine {
    cfg: RewardConfig,
    judge: Arc<dyn ChatModel>,
    scorer: AnswerScorer,
    process_template: PromptTemplate,
}

impl RewardEngine {
    pub fn new(cfg: RewardConfig, judge: Arc<dyn ChatModel>) -> Self {
        Self {
            scorer: AnswerScorer::new(judge.clone(), defaults::answer_judge(), cfg.verdict_retries),
            cfg,
            judge,
            process_template: defaults::process_judge(),
        }
    }

    pub fn with_templates(mut self, answer: PromptTemplate, process: PromptTemplate) -> Self {
        self.scorer = AnswerScorer::new(self.judge.clone(), answer, self.cfg.verdict_retries);
        self.process_template = process;
        self
    }

    pub fn config(&self) -> &RewardConfig {
        &self.cfg
    }

    pub fn scorer(&self) -> &AnswerScorer {
        &self.scorer
    }

    fn try_process(&self, t: &Trajectory) -> Result<ProcessOutcome, RewardError> {
        let text = serialize_trajectory(t)
            .map_err(|e| RewardError::Trajectory(e.to_string()))?
            .text;
        let mut last = String::new();
        for _ in 0..=self.cfg.verdict_retries {
            match judge_process_score(self.judge.as_ref(), &text, &self.process_template) {
                Ok(score) => {
                    return Ok(ProcessOutcome {
                        value: self.cfg.process_scale.map(score),
                        score: Some(score),
                        warning: None,
                    })
                }
                Err(JudgeError::UnparseableVerdict(reply)) => last = reply,
                Err(JudgeError::Client(e)) => return Err(e.into()),
                Err(JudgeError::Template(m)) => return Err(RewardError::Template(m)),
            }
        }
        Ok(ProcessOutcome {
            value: 0.0,
            score: None,
            warning: Some(format!("unparseable process score {last:?}; process reward 0")),
        })
    }

    /// Judge-scored process reward; any failure degrades to 0 with a warning.
    pub fn process_reward(&self, t: &Trajectory) -> ProcessOutcome {
        self.try_process(t).unwrap_or_else(|e| ProcessOutcome {
            value: 0.0,
            score: None,
            warning: Some(format!("process judge failed: {e}; process reward 0")),
        })
    }

    pub fn compute_reward(
        &self,
        t: &Trajectory,
        baselines: &BaselineScores,
    ) -> Result<RewardBreakdown, RewardError> {
        let counts = count_actions(t);
        let gate = format_ok(t);
        let mut warnings = Vec::new();
        let (score_answer, process_score) = if gate {
            let answer = t.answer.as_deref().unwrap_or_default();
            let verdict = self.scorer.score(&t.question, answer)?;
            warnings.extend(verdict.warning);
            let process = self.try_process(t)?;
            warnings.extend(process.warning);
            (verdict.score, process.score)
        } else {
            (0, None)
        };
        let mut breakdown = combine(
            &RewardInputs {
                format_ok: gate,
                counts,
                score_answer,
                score_direct: baselines.score_direct,
                score_rag: baselines.score_rag,
                process_score,
            },
            &self.cfg,
        );
        breakdown.warnings = warnings;
        Ok(breakdown)
    }
}
