//! Synthetic multi-hop lookup world.
//!
//! Each question asks for the entity reached from a start entity after `h`
//! fact hops. `SearchNext` reveals the next hop, `SearchRedundant` re-reads
//! what is already known, and `CallAnswer` hands off to the generator, which
//! answers correctly exactly when every hop has been revealed.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::stream;
use crate::trajectory::{Question, RetrievedDoc, TerminationReason, ToolCall, Trajectory, Turn};

const RELATIONS: [&str; 4] = ["founded_by", "located_in", "part_of", "named_after"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    SearchNext,
    SearchRedundant,
    CallAnswer,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::SearchNext, Action::SearchRedundant, Action::CallAnswer];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn is_search(self) -> bool {
        self != Action::CallAnswer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyQuestion {
    pub start: String,
    pub hops: usize,
    pub answer: String,
    /// Whether the direct-inference baseline gets this question right.
    pub direct_correct: bool,
    /// Whether the naive RAG baseline gets this question right.
    pub rag_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub hops: Vec<usize>,
    pub questions_per_hop: usize,
    /// Indexed by hop count; missing entries mean 0.
    pub direct_success_prob: Vec<f64>,
    pub rag_success_prob: Vec<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            hops: vec![1, 2, 3, 4],
            questions_per_hop: 10,
            direct_success_prob: vec![0.0, 0.4, 0.1, 0.0, 0.0],
            rag_success_prob: vec![0.0, 0.6, 0.2, 0.05, 0.0],
        }
    }
}

impl WorldConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hops.is_empty() || self.questions_per_hop == 0 {
            out.push("toy.world must contain at least one question".into());
        }
        for p in self.direct_success_prob.iter().chain(&self.rag_success_prob) {
            if !(0.0..=1.0).contains(p) {
                out.push(format!("toy.world probability {p} outside [0, 1]"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub entities: Vec<String>,
    /// entity → (relation, next entity)
    pub facts: BTreeMap<String, (String, String)>,
    pub questions: Vec<ToyQuestion>,
    pub direct_success_prob: Vec<f64>,
    pub rag_success_prob: Vec<f64>,
    pub rng_seed: u64,
}

fn prob(table: &[f64], h: usize) -> f64 {
    table.get(h).copied().unwrap_or(0.0)
}

impl ToyWorld {
    /// One disjoint fact chain per question; baseline successes are drawn
    /// once per question.
    pub fn generate(cfg: &WorldConfig, seed: u64) -> Self {
        let mut rng = stream(seed, "toy/world");
        let mut entities = Vec::new();
        let mut facts = BTreeMap::new();
        let mut questions = Vec::new();
        for &h in &cfg.hops {
            for _ in 0..cfg.questions_per_hop {
                let qi = questions.len();
                let chain: Vec<String> = (0..=h).map(|k| format!("e{qi}_{k}")).collect();
                for k in 0..h {
                    let rel = RELATIONS[rng.random_range(0..RELATIONS.len())];
                    facts.insert(chain[k].clone(), (rel.to_string(), chain[k + 1].clone()));
                }
                questions.push(ToyQuestion {
                    start: chain[0].clone(),
                    hops: h,
                    answer: chain[h].clone(),
                    direct_correct: rng.random_bool(prob(&cfg.direct_success_prob, h)),
                    rag_correct: rng.random_bool(prob(&cfg.rag_success_prob, h)),
                });
                entities.extend(chain);
            }
        }
        Self {
            entities,
            facts,
            questions,
            direct_success_prob: cfg.direct_success_prob.clone(),
            rag_success_prob: cfg.rag_success_prob.clone(),
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (i, q) in self.questions.iter().enumerate() {
            let mut at = &q.start;
            for _ in 0..q.hops {
                at = &self
                    .facts
                    .get(at)
                    .ok_or_else(|| format!("question {i}: chain breaks at {at}"))?
                    .1;
            }
            if *at != q.answer {
                return Err(format!("question {i}: chain ends at {at}, not {}", q.answer));
            }
        }
        for p in self.direct_success_prob.iter().chain(&self.rag_success_prob) {
            if !(0.0..=1.0).contains(p) {
                return Err(format!("probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Entity reached after `k` hops from question `qi`'s start.
    pub fn entity_at(&self, qi: usize, k: usize) -> &str {
        let mut at = &self.questions[qi].start;
        for _ in 0..k {
            at = &self.facts[at].1;
        }
        at
    }

    pub fn mean_hops(&self) -> f64 {
        self.questions.iter().map(|q| q.hops as f64).sum::<f64>() / self.questions.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyState {
    pub question: usize,
    pub hops: usize,
    pub revealed: usize,
    pub turns: usize,
    pub subqueries: usize,
    pub redundant: usize,
}

impl ToyState {
    pub fn initial(world: &ToyWorld, question: usize) -> Self {
        Self {
            question,
            hops: world.questions[question].hops,
            revealed: 0,
            turns: 0,
            subqueries: 0,
            redundant: 0,
        }
    }

    /// Hops still unrevealed; what the planner reads off its evidence.
    pub fn remaining(&self) -> usize {
        self.hops.saturating_sub(self.revealed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInfo {
    pub revealed_new: bool,
    pub answered: bool,
    pub correct: bool,
    pub turn_limit: bool,
}

/// Applies one action. Searching past the last hop reveals nothing; the
/// episode is cut off once `max_turns` searches have been made.
pub fn step_env(state: ToyState, action: Action, max_turns: usize) -> (ToyState, bool, StepInfo) {
    let mut next = state;
    let mut info = StepInfo {
        revealed_new: false,
        answered: false,
        correct: false,
        turn_limit: false,
    };
    match action {
        Action::SearchNext => {
            next.turns += 1;
            next.subqueries += 1;
            if next.revealed < next.hops {
                next.revealed += 1;
                info.revealed_new = true;
            }
        }
        Action::SearchRedundant => {
            next.turns += 1;
            next.subqueries += 1;
            next.redundant += 1;
        }
        Action::CallAnswer => {
            info.answered = true;
            info.correct = next.revealed == next.hops;
            return (next, true, info);
        }
    }
    if next.turns >= max_turns {
        info.turn_limit = true;
        return (next, true, info);
    }
    (next, false, info)
}

/// Replays `actions` for question `qi` into an ordinary trajectory with
/// rendered tool calls and retrieved facts.
pub fn induced_trajectory(world: &ToyWorld, qi: usize, actions: &[Action], max_turns: usize) -> Trajectory {
    let q = &world.questions[qi];
    let question = Question::new(
        format!("toy-{qi}"),
        format!("Which entity is reached from {} after {} hops?", q.start, q.hops),
        vec![q.answer.clone()],
    )
    .expect("toy question is valid");
    let fact_doc = |k: usize, query: &str| -> Vec<RetrievedDoc> {
        let from = world.entity_at(qi, k);
        match world.facts.get(from) {
            Some((rel, to)) if k < q.hops => vec![RetrievedDoc {
                source_query: query.to_string(),
                title: from.to_string(),
                content: format!("{from} {rel} {to}"),
                rank: 1,
                retriever_id: "toy".into(),
            }],
            _ => Vec::new(),
        }
    };
    let mut state = ToyState::initial(world, qi);
    let mut turns = Vec::new();
    let mut answer = None;
    let mut reason = TerminationReason::ParseFailure;
    for (i, &a) in actions.iter().enumerate() {
        let index = i as u32 + 1;
        let turn = match a {
            Action::SearchNext => {
                let query = format!("{} next hop", world.entity_at(qi, state.revealed));
                Turn {
                    index,
                    planner_reasoning: "Look up the next link.".into(),
                    observations: fact_doc(state.revealed, &query),
                    tool_call: ToolCall::search([query]),
                }
            }
            Action::SearchRedundant => {
                let k = state.revealed.saturating_sub(1);
                let query = format!("{} next hop", world.entity_at(qi, k));
                Turn {
                    index,
                    planner_reasoning: "Check again.".into(),
                    observations: if state.revealed == 0 { Vec::new() } else { fact_doc(k, &query) },
                    tool_call: ToolCall::search([query]),
                }
            }
            Action::CallAnswer => Turn {
                index,
                planner_reasoning: "Enough evidence.".into(),
                tool_call: ToolCall::call_answer(),
                observations: Vec::new(),
            },
        };
        turns.push(turn);
        let (next, done, info) = step_env(state, a, max_turns);
        state = next;
        if done {
            if info.answered {
                reason = TerminationReason::GeneratorCall;
                answer = Some(if info.correct { q.answer.clone() } else { "unknown".into() });
            } else {
                reason = TerminationReason::TurnLimit;
            }
            break;
        }
    }
    Trajectory::new(question, turns, answer, reason).expect("toy trajectory is valid")
}
