//! Multi-turn planning episodes against planner, search and generator
//! services.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ChatMessage, ChatModel, SearchClient};
use crate::parallel::map_bounded;
use crate::prompt::{defaults, PromptTemplate};
use crate::trajectory::{
    render_action, render_observations, render_prompt, scan_tool_blocks, Question,
    TerminationReason, ToolCall, ToolKind, Trajectory, Turn, TOOL_CALL_OPEN,
};

fn default_max_turns() -> usize {
    5
}
fn default_max_subqueries() -> usize {
    10
}
fn default_parse_error_threshold() -> usize {
    2
}
fn default_wall_clock_secs() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Hard cap on search turns per episode.
    #[serde(default = "default_max_turns")]
    pub max_turns: usize,
    /// Only used by the reward; the engine does not truncate sub-queries.
    #[serde(default = "default_max_subqueries")]
    pub max_subqueries: usize,
    /// Consecutive unparseable planner replies before giving up.
    #[serde(default = "default_parse_error_threshold")]
    pub parse_error_threshold: usize,
    #[serde(default = "default_wall_clock_secs")]
    pub wall_clock_secs: u64,
    #[serde(default = "defaults::planner_system")]
    pub planner_system_prompt: PromptTemplate,
    #[serde(default = "defaults::generator")]
    pub generator_prompt: PromptTemplate,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_turns: default_max_turns(),
            max_subqueries: default_max_subqueries(),
            parse_error_threshold: default_parse_error_threshold(),
            wall_clock_secs: default_wall_clock_secs(),
            planner_system_prompt: defaults::planner_system(),
            generator_prompt: defaults::generator(),
        }
    }
}

impl RolloutConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.max_turns < 1 {
            out.push("rollout.max_turns must be >= 1".into());
        }
        if self.max_subqueries < 1 {
            out.push("rollout.max_subqueries must be >= 1".into());
        }
        if self.parse_error_threshold < 1 {
            out.push("rollout.parse_error_threshold must be >= 1".into());
        }
        if self.wall_clock_secs < 1 {
            out.push("rollout.wall_clock_secs must be >= 1".into());
        }
        if let Err(e) = self.generator_prompt.require(&["trajectory"]) {
            out.push(format!("rollout.generator_prompt: {e}"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPlannerOutput {
    pub reasoning: String,
    pub tool_call: Option<ToolCall>,
    pub parse_error: Option<String>,
    /// Errors from malformed blocks preceding the accepted one.
    pub malformed_blocks: Vec<String>,
}

/// Takes the first well-formed tool-call block. Reasoning is the text before
/// the first block tag; anything after the accepted block is dropped.
pub fn parse_planner_output(text: &str) -> ParsedPlannerOutput {
    let reasoning = match text.find(TOOL_CALL_OPEN) {
        Some(i) => &text[..i],
        None => text,
    }
    .trim()
    .to_string();
    let scan = scan_tool_blocks(text);
    match scan.first_valid {
        Some((_, call)) => ParsedPlannerOutput {
            reasoning,
            tool_call: Some(call),
            parse_error: None,
            malformed_blocks: scan.malformed,
        },
        None => {
            let parse_error = if scan.saw_tag {
                scan.malformed.join("; ")
            } else {
                "no tool call".to_string()
            };
            ParsedPlannerOutput {
                reasoning,
                tool_call: None,
                parse_error: Some(parse_error),
                malformed_blocks: scan.malformed,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureSource {
    Planner,
    Search,
    Generator,
    WallClock,
}

/// An episode that could not finish. The partial trajectory has
/// `terminated_by = ClientError` and a note describing the failure.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("rollout {id} failed at {source_kind:?}: {message}")]
pub struct RolloutError {
    pub id: String,
    pub source_kind: FailureSource,
    pub message: String,
    pub partial: Box<Trajectory>,
}

pub struct RolloutEngine {
    cfg: RolloutConfig,
    planner: Arc<dyn ChatModel>,
    generator: Arc<dyn ChatModel>,
    search: Arc<SearchClient>,
}

struct Episode<'a> {
    question: &'a Question,
    turns: Vec<Turn>,
    malformed: Vec<String>,
}

impl Episode<'_> {
    fn finish(
        self,
        answer: Option<String>,
        reason: TerminationReason,
    ) -> Trajectory {
        Trajectory::new(self.question.clone(), self.turns, answer, reason)
            .expect("engine builds structurally valid trajectories")
            .with_malformed_outputs(self.malformed)
    }
}

impl RolloutEngine {
    pub fn new(
        cfg: RolloutConfig,
        planner: Arc<dyn ChatModel>,
        generator: Arc<dyn ChatModel>,
        search: Arc<SearchClient>,
    ) -> Self {
        Self {
            cfg,
            planner,
            generator,
            search,
        }
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.cfg
    }

    /// System prompt, the question, then every prior turn as an assistant
    /// action followed by its observations.
    pub fn planner_context(&self, q: &Question, turns: &[Turn]) -> Vec<ChatMessage> {
        let system = self
            .cfg
            .planner_system_prompt
            .render(&[("max_turns", &self.cfg.max_turns.to_string())])
            .unwrap_or_else(|_| self.cfg.planner_system_prompt.text().to_string());
        let mut msgs = vec![ChatMessage::system(system), ChatMessage::user(render_prompt(q))];
        for turn in turns {
            msgs.push(ChatMessage::assistant(
                render_action(&turn.planner_reasoning, &turn.tool_call).trim_end(),
            ));
            if turn.tool_call.kind == ToolKind::Search {
                msgs.push(ChatMessage::tool(render_observations(&turn.observations).trim_end()));
            }
        }
        msgs
    }

    /// The record handed to the generator: prompt, actions and observations
    /// up to and including the call_answer_llm action.
    pub fn generator_input(q: &Question, turns: &[Turn]) -> String {
        let mut text = render_prompt(q);
        for turn in turns {
            text.push_str(&render_action(&turn.planner_reasoning, &turn.tool_call));
            if turn.tool_call.kind == ToolKind::Search {
                text.push_str(&render_observations(&turn.observations));
            }
        }
        text
    }

    fn fail(
        &self,
        ep: Episode<'_>,
        source_kind: FailureSource,
        message: String,
    ) -> RolloutError {
        let note = format!("{source_kind:?} failure: {message}");
        let id = ep.question.id.clone();
        let partial = ep.finish(None, TerminationReason::ClientError).with_note(note);
        RolloutError {
            id,
            source_kind,
            message,
            partial: Box::new(partial),
        }
    }

    pub fn run_rollout(&self, q: &Question) -> Result<Trajectory, RolloutError> {
        let started = Instant::now();
        let cap = Duration::from_secs(self.cfg.wall_clock_secs);
        let mut ep = Episode {
            question: q,
            turns: Vec::new(),
            malformed: Vec::new(),
        };
        let mut consecutive_errors = 0;
        loop {
            if started.elapsed() > cap {
                let msg = format!("wall-clock cap of {}s exceeded", self.cfg.wall_clock_secs);
                return Err(self.fail(ep, FailureSource::WallClock, msg));
            }
            let context = self.planner_context(q, &ep.turns);
            let reply = match self.planner.complete(&context) {
                Ok(r) => r,
                Err(e) => return Err(self.fail(ep, FailureSource::Planner, e.to_string())),
            };
            let parsed = parse_planner_output(&reply);
            let Some(call) = parsed.tool_call else {
                tracing::debug!(question = %q.id, error = ?parsed.parse_error, "unparseable planner reply");
                ep.malformed.push(reply);
                consecutive_errors += 1;
                if consecutive_errors >= self.cfg.parse_error_threshold {
                    return Ok(ep.finish(None, TerminationReason::ParseFailure));
                }
                continue;
            };
            consecutive_errors = 0;
            if !parsed.malformed_blocks.is_empty() {
                ep.malformed.push(reply.clone());
            }
            let index = ep.turns.len() as u32 + 1;
            match call.kind {
                ToolKind::Search => {
                    let docs = match self.search.search(&call.sub_queries) {
                        Ok(d) => d,
                        Err(e) => return Err(self.fail(ep, FailureSource::Search, e.to_string())),
                    };
                    ep.turns.push(Turn {
                        index,
                        planner_reasoning: parsed.reasoning,
                        tool_call: call,
                        observations: docs,
                    });
                    if ep.turns.len() >= self.cfg.max_turns {
                        return Ok(ep.finish(None, TerminationReason::TurnLimit));
                    }
                }
                ToolKind::CallAnswerLlm => {
                    let terminal = Turn {
                        index,
                        planner_reasoning: parsed.reasoning,
                        tool_call: call,
                        observations: Vec::new(),
                    };
                    let mut record_turns = ep.turns.clone();
                    record_turns.push(terminal.clone());
                    let record = Self::generator_input(q, &record_turns);
                    let prompt = self
                        .cfg
                        .generator_prompt
                        .render(&[("question", &q.text), ("trajectory", &record)]);
                    let prompt = match prompt {
                        Ok(p) => p,
                        Err(e) => return Err(self.fail(ep, FailureSource::Generator, e.to_string())),
                    };
                    match self.generator.complete(&[ChatMessage::user(prompt)]) {
                        Ok(answer) => {
                            ep.turns.push(terminal);
                            return Ok(ep.finish(
                                Some(answer.trim().to_string()),
                                TerminationReason::GeneratorCall,
                            ));
                        }
                        Err(e) => {
                            return Err(self.fail(ep, FailureSource::Generator, e.to_string()))
                        }
                    }
                }
            }
        }
    }

    /// Runs every question with at most `parallelism` episodes in flight.
    /// Failed episodes yield their partial trajectory.
    pub fn run_batch(&self, questions: &[Question], parallelism: usize) -> Vec<Trajectory> {
        map_bounded(questions, parallelism, |_, q| match self.run_rollout(q) {
            Ok(t) => t,
            Err(e) => {
                tracing::warn!("{e}");
                *e.partial
            }
        })
    }
}
