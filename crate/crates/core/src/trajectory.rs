//! Questions, planning turns, tool calls and the canonical trajectory text.
//!
//! A trajectory renders to a single string made of alternating segments:
//!
//! ```text
//! Question: <question>\n                                  (prompt)
//! <reasoning>\n<tool_call>{...}</tool_call>\n             (model generated)
//! <tool_response>\n1. [title] content\n</tool_response>\n  (retrieved)
//! ...
//! <reasoning>\n<tool_call>{"name":"call_answer_llm",...}</tool_call>\n
//! <tool_response>\n<answer>\n</tool_response>\n            (generator output)
//! ```
//!
//! Every segment becomes one [`TokenSpan`] whose offsets are token positions
//! under a [`Tokenizer`]. The generator's answer is returned to the planner
//! as a tool response, so it carries the `Retrieved` origin and never enters
//! the policy loss.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::{Tokenizer, WhitespaceTokenizer};

pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";
pub const TOOL_RESPONSE_OPEN: &str = "<tool_response>";
pub const TOOL_RESPONSE_CLOSE: &str = "</tool_response>";
const PROMPT_PREFIX: &str = "Question: ";

pub const SEARCH_TOOL: &str = "search";
pub const ANSWER_TOOL: &str = "call_answer_llm";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("malformed trajectory text: {0}")]
    Malformed(String),
}

fn violation(msg: impl Into<String>) -> TrajectoryError {
    TrajectoryError::InvariantViolation(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub ground_truth: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        ground_truth: Vec<String>,
    ) -> Result<Self, TrajectoryError> {
        let q = Self {
            id: id.into(),
            text: text.into(),
            ground_truth,
            domain_tag: None,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn with_domain(mut self, tag: impl Into<String>) -> Self {
        self.domain_tag = Some(tag.into());
        self
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.text.trim().is_empty() {
            return Err(violation(format!("question {} has empty text", self.id)));
        }
        if self.ground_truth.is_empty() {
            return Err(violation(format!("question {} has no ground truth", self.id)));
        }
        if self.ground_truth.iter().any(|g| g.trim().is_empty()) {
            return Err(violation(format!(
                "question {} has an empty ground-truth entry",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Search,
    CallAnswerLlm,
}

/// A parsed planner action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub kind: ToolKind,
    #[serde(default)]
    pub sub_queries: Vec<String>,
    /// The exact `<tool_call>...</tool_call>` block the call came from.
    pub raw_text: String,
}

#[derive(Serialize)]
struct WireCall<'a> {
    name: &'a str,
    arguments: WireArgs<'a>,
}

#[derive(Serialize)]
struct WireArgs<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    queries: Option<&'a [String]>,
}

impl ToolCall {
    pub fn search<I, S>(queries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sub_queries: Vec<String> = queries.into_iter().map(Into::into).collect();
        let raw_text = canonical_block(ToolKind::Search, &sub_queries);
        Self {
            kind: ToolKind::Search,
            sub_queries,
            raw_text,
        }
    }

    pub fn call_answer() -> Self {
        Self {
            kind: ToolKind::CallAnswerLlm,
            sub_queries: Vec::new(),
            raw_text: canonical_block(ToolKind::CallAnswerLlm, &[]),
        }
    }

    pub fn is_search(&self) -> bool {
        self.kind == ToolKind::Search
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        match self.kind {
            ToolKind::Search => {
                if self.sub_queries.is_empty() {
                    return Err(violation("search call without sub-queries"));
                }
                if self.sub_queries.iter().any(|q| q.trim().is_empty()) {
                    return Err(violation("search call with an empty sub-query"));
                }
            }
            ToolKind::CallAnswerLlm => {
                if !self.sub_queries.is_empty() {
                    return Err(violation("call_answer_llm carries sub-queries"));
                }
            }
        }
        match parse_tool_block(&self.raw_text) {
            Ok(parsed) if parsed.kind == self.kind && parsed.sub_queries == self.sub_queries => {
                Ok(())
            }
            Ok(_) => Err(violation("raw_text does not match the parsed tool call")),
            Err(e) => Err(violation(format!("raw_text is not a tool call block: {e}"))),
        }
    }
}

/// Canonical `<tool_call>` block for a call.
pub fn canonical_block(kind: ToolKind, queries: &[String]) -> String {
    let wire = match kind {
        ToolKind::Search => WireCall {
            name: SEARCH_TOOL,
            arguments: WireArgs {
                queries: Some(queries),
            },
        },
        ToolKind::CallAnswerLlm => WireCall {
            name: ANSWER_TOOL,
            arguments: WireArgs { queries: None },
        },
    };
    let json = serde_json::to_string(&wire).expect("tool call serializes");
    format!("{TOOL_CALL_OPEN}{json}{TOOL_CALL_CLOSE}")
}

/// Parses one complete `<tool_call>{json}</tool_call>` block.
pub fn parse_tool_block(block: &str) -> Result<ToolCall, String> {
    let inner = block
        .strip_prefix(TOOL_CALL_OPEN)
        .and_then(|s| s.strip_suffix(TOOL_CALL_CLOSE))
        .ok_or_else(|| "missing tool_call tags".to_string())?;
    let mut call = parse_call_json(inner)?;
    call.raw_text = block.to_string();
    Ok(call)
}

fn parse_call_json(json: &str) -> Result<ToolCall, String> {
    let value: serde_json::Value =
        serde_json::from_str(json.trim()).map_err(|e| format!("invalid json: {e}"))?;
    let obj = value.as_object().ok_or("tool call is not an object")?;
    let name = obj
        .get("name")
        .and_then(|n| n.as_str())
        .ok_or("tool call has no name")?;
    let args = obj.get("arguments");
    if let Some(a) = args {
        if !a.is_object() {
            return Err("arguments is not an object".into());
        }
    }
    match name {
        SEARCH_TOOL => {
            let queries = args
                .and_then(|a| a.get("queries"))
                .and_then(|q| q.as_array())
                .ok_or("search call without a queries array")?;
            let mut out = Vec::with_capacity(queries.len());
            for q in queries {
                let q = q.as_str().ok_or("non-string sub-query")?;
                if q.trim().is_empty() {
                    return Err("empty sub-query".into());
                }
                out.push(q.to_string());
            }
            if out.is_empty() {
                return Err("search call with no sub-queries".into());
            }
            Ok(ToolCall {
                kind: ToolKind::Search,
                sub_queries: out,
                raw_text: String::new(),
            })
        }
        ANSWER_TOOL => Ok(ToolCall {
            kind: ToolKind::CallAnswerLlm,
            sub_queries: Vec::new(),
            raw_text: String::new(),
        }),
        other => Err(format!("unknown tool {other:?}")),
    }
}

/// Result of scanning free text for tool-call blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScan {
    /// Byte range and parsed call of the first well-formed block.
    pub first_valid: Option<(Range<usize>, ToolCall)>,
    /// Errors from malformed blocks seen before the first valid one.
    pub malformed: Vec<String>,
    /// Whether any opening tag appeared at all.
    pub saw_tag: bool,
}

pub fn scan_tool_blocks(text: &str) -> BlockScan {
    let mut scan = BlockScan {
        first_valid: None,
        malformed: Vec::new(),
        saw_tag: false,
    };
    let mut from = 0;
    while let Some(rel) = text[from..].find(TOOL_CALL_OPEN) {
        scan.saw_tag = true;
        let start = from + rel;
        let body = start + TOOL_CALL_OPEN.len();
        let Some(close_rel) = text[body..].find(TOOL_CALL_CLOSE) else {
            scan.malformed.push("unterminated tool_call block".into());
            break;
        };
        let end = body + close_rel + TOOL_CALL_CLOSE.len();
        match parse_tool_block(&text[start..end]) {
            Ok(call) => {
                scan.first_valid = Some((start..end, call));
                break;
            }
            Err(e) => scan.malformed.push(e),
        }
        from = end;
    }
    scan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub source_query: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
    pub rank: u32,
    #[serde(default)]
    pub retriever_id: String,
}

impl RetrievedDoc {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.rank < 1 {
            return Err(violation("document rank must be >= 1"));
        }
        if self.content.trim().is_empty() {
            return Err(violation("document content is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: u32,
    pub planner_reasoning: String,
    pub tool_call: ToolCall,
    #[serde(default)]
    pub observations: Vec<RetrievedDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    GeneratorCall,
    TurnLimit,
    ParseFailure,
    ClientError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanOrigin {
    ModelGenerated,
    Retrieved,
    Prompt,
}

/// A contiguous run of tokens sharing one provenance. Offsets are token
/// positions, `end` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub origin: SpanOrigin,
    pub start: usize,
    pub end: usize,
    pub turn_index: u32,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Checks that spans are non-empty, sorted and tile `[0, total)` with no
/// gaps or overlaps. Returns the total token count.
pub fn check_span_partition(spans: &[TokenSpan]) -> Result<usize, TrajectoryError> {
    let mut pos = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end {
            return Err(violation(format!("span {i} is empty or inverted")));
        }
        if s.start < pos {
            return Err(violation(format!("span {i} overlaps its predecessor")));
        }
        if s.start > pos {
            return Err(violation(format!("gap before span {i}")));
        }
        pos = s.end;
    }
    Ok(pos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: Question,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub terminated_by: TerminationReason,
    pub spans: Vec<TokenSpan>,
    /// Planner outputs that contained no well-formed tool call.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub malformed_outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Trajectory {
    /// Validates the parts and computes spans with the default tokenizer.
    pub fn new(
        question: Question,
        turns: Vec<Turn>,
        answer: Option<String>,
        terminated_by: TerminationReason,
    ) -> Result<Self, TrajectoryError> {
        let mut t = Self {
            question,
            turns,
            answer,
            terminated_by,
            spans: Vec::new(),
            malformed_outputs: Vec::new(),
            notes: Vec::new(),
        };
        t.validate_structure()?;
        t.spans = serialize_with(&t, &WhitespaceTokenizer)?.spans;
        Ok(t)
    }

    pub fn with_malformed_outputs(mut self, outputs: Vec<String>) -> Self {
        self.malformed_outputs = outputs;
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.question.id
    }

    pub fn last_turn(&self) -> Option<&Turn> {
        self.turns.last()
    }

    /// Full check, including that stored spans tile the text.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        self.validate_structure()?;
        check_span_partition(&self.spans)?;
        Ok(())
    }

    fn validate_structure(&self) -> Result<(), TrajectoryError> {
        self.question.validate()?;
        let n = self.turns.len();
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index as usize != i + 1 {
                return Err(violation(format!(
                    "turn at position {i} has index {}",
                    turn.index
                )));
            }
            turn.tool_call.validate()?;
            if turn.tool_call.kind == ToolKind::CallAnswerLlm {
                if !turn.observations.is_empty() {
                    return Err(violation("call_answer_llm turn has observations"));
                }
                if i + 1 != n {
                    return Err(violation("call_answer_llm turn is not the last turn"));
                }
            }
            for doc in &turn.observations {
                doc.validate()?;
            }
        }
        let ends_with_call = self
            .turns
            .last()
            .is_some_and(|t| t.tool_call.kind == ToolKind::CallAnswerLlm);
        let by_generator = self.terminated_by == TerminationReason::GeneratorCall;
        if ends_with_call != by_generator {
            return Err(violation(
                "terminated_by=generator_call must coincide with a final call_answer_llm turn",
            ));
        }
        if by_generator != self.answer.is_some() {
            return Err(violation(
                "answer must be present exactly when the generator was called",
            ));
        }
        Ok(())
    }
}

/// Per-trajectory action counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActionCounts {
    /// Search-engine invocations (n_S).
    pub n_search: usize,
    /// Generator invocations (n_A), 0 or 1.
    pub n_answer: usize,
    pub total_subqueries: usize,
    /// Planning turns L; the terminal generator call is not counted.
    pub planning_turns: usize,
}

pub fn count_actions(t: &Trajectory) -> ActionCounts {
    let mut c = ActionCounts::default();
    for turn in &t.turns {
        match turn.tool_call.kind {
            ToolKind::Search => {
                c.n_search += 1;
                c.total_subqueries += turn.tool_call.sub_queries.len();
            }
            ToolKind::CallAnswerLlm => c.n_answer += 1,
        }
    }
    c.planning_turns = c.n_search;
    c
}

fn one_line(s: &str) -> String {
    s.replace(['\r', '\n'], " ")
}

/// Text the planner sees for its question.
pub fn render_prompt(question: &Question) -> String {
    format!("{PROMPT_PREFIX}{}\n", one_line(question.text.trim()))
}

/// Planner-generated text of one turn.
pub fn render_action(reasoning: &str, call: &ToolCall) -> String {
    let reasoning = reasoning.trim_end();
    if reasoning.is_empty() {
        format!("{}\n", call.raw_text)
    } else {
        format!("{reasoning}\n{}\n", call.raw_text)
    }
}

/// Observation block for a search turn.
pub fn render_observations(docs: &[RetrievedDoc]) -> String {
    let mut out = format!("{TOOL_RESPONSE_OPEN}\n");
    for doc in docs {
        out.push_str(&format!(
            "{}. [{}] {}\n",
            doc.rank,
            one_line(&doc.title),
            one_line(&doc.content)
        ));
    }
    out.push_str(TOOL_RESPONSE_CLOSE);
    out.push('\n');
    out
}

/// Tool response carrying the generator's answer.
pub fn render_answer(answer: &str) -> String {
    format!("{TOOL_RESPONSE_OPEN}\n{answer}\n{TOOL_RESPONSE_CLOSE}\n")
}

/// One provenance-tagged piece of the rendered trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub origin: SpanOrigin,
    pub turn_index: u32,
    pub text: String,
}

pub fn segments(t: &Trajectory) -> Vec<Segment> {
    let mut out = vec![Segment {
        origin: SpanOrigin::Prompt,
        turn_index: 0,
        text: render_prompt(&t.question),
    }];
    for turn in &t.turns {
        out.push(Segment {
            origin: SpanOrigin::ModelGenerated,
            turn_index: turn.index,
            text: render_action(&turn.planner_reasoning, &turn.tool_call),
        });
        match turn.tool_call.kind {
            ToolKind::Search => out.push(Segment {
                origin: SpanOrigin::Retrieved,
                turn_index: turn.index,
                text: render_observations(&turn.observations),
            }),
            ToolKind::CallAnswerLlm => {
                if let Some(answer) = &t.answer {
                    out.push(Segment {
                        origin: SpanOrigin::Retrieved,
                        turn_index: turn.index,
                        text: render_answer(answer),
                    });
                }
            }
        }
    }
    out
}

/// Rendered trajectory with its token boundaries and spans.
#[derive(Debug, Clone, PartialEq)]
pub struct SerializedTrajectory {
    pub text: String,
    /// Byte range of every token in `text`.
    pub tokens: Vec<Range<usize>>,
    pub spans: Vec<TokenSpan>,
}

impl SerializedTrajectory {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_text(&self, i: usize) -> &str {
        &self.text[self.tokens[i].clone()]
    }

    /// Byte range covered by a span.
    pub fn byte_range(&self, span: &TokenSpan) -> Range<usize> {
        self.tokens[span.start].start..self.tokens[span.end - 1].end
    }
}

/// Canonical rendering under the default whitespace tokenizer.
pub fn serialize_trajectory(t: &Trajectory) -> Result<SerializedTrajectory, TrajectoryError> {
    serialize_with(t, &WhitespaceTokenizer)
}

pub fn serialize_with(
    t: &Trajectory,
    tokenizer: &dyn Tokenizer,
) -> Result<SerializedTrajectory, TrajectoryError> {
    t.validate_structure()?;
    let mut text = String::new();
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    for seg in segments(t) {
        let base = text.len();
        let seg_tokens = tokenizer.tokenize(&seg.text);
        if seg_tokens.is_empty() {
            return Err(violation("segment produced no tokens"));
        }
        let start = tokens.len();
        tokens.extend(seg_tokens.into_iter().map(|r| r.start + base..r.end + base));
        spans.push(TokenSpan {
            origin: seg.origin,
            start,
            end: tokens.len(),
            turn_index: seg.turn_index,
        });
        text.push_str(&seg.text);
    }
    Ok(SerializedTrajectory {
        text,
        tokens,
        spans,
    })
}

/// Turn structure recovered from canonical text.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrajectory {
    pub question_text: String,
    pub turns: Vec<Turn>,
    pub answer: Option<String>,
}

/// Inverse of [`serialize_trajectory`] up to fields the text does not carry
/// (document provenance, ids, ground truth).
pub fn parse_serialized(text: &str) -> Result<ParsedTrajectory, TrajectoryError> {
    let malformed = |m: &str| TrajectoryError::Malformed(m.to_string());
    let rest = text
        .strip_prefix(PROMPT_PREFIX)
        .ok_or_else(|| malformed("missing question prompt"))?;
    let nl = rest
        .find('\n')
        .ok_or_else(|| malformed("unterminated question line"))?;
    let question_text = rest[..nl].to_string();
    let mut rest = &rest[nl + 1..];
    let mut turns = Vec::new();
    let mut answer = None;

    while !rest.is_empty() {
        if answer.is_some() {
            return Err(malformed("text after the generator answer"));
        }
        let scan = scan_tool_blocks(rest);
        let (range, call) = scan
            .first_valid
            .ok_or_else(|| malformed("turn without a tool call"))?;
        let reasoning = rest[..range.start]
            .strip_suffix('\n')
            .unwrap_or(&rest[..range.start])
            .to_string();
        rest = rest[range.end..]
            .strip_prefix('\n')
            .ok_or_else(|| malformed("tool call not followed by newline"))?;
        let index = turns.len() as u32 + 1;
        let mut observations = Vec::new();
        let open = format!("{TOOL_RESPONSE_OPEN}\n");
        let close = format!("{TOOL_RESPONSE_CLOSE}\n");
        if let Some(body) = rest.strip_prefix(open.as_str()) {
            let end = body
                .find(close.as_str())
                .ok_or_else(|| malformed("unterminated tool_response"))?;
            let block = &body[..end];
            rest = &body[end + close.len()..];
            match call.kind {
                ToolKind::Search => {
                    for line in block.lines() {
                        observations.push(parse_doc_line(line, &call)?);
                    }
                }
                ToolKind::CallAnswerLlm => {
                    answer = Some(block.strip_suffix('\n').unwrap_or(block).to_string());
                }
            }
        } else if call.kind == ToolKind::Search {
            return Err(malformed("search call without a tool_response"));
        }
        turns.push(Turn {
            index,
            planner_reasoning: reasoning,
            tool_call: call,
            observations,
        });
    }
    Ok(ParsedTrajectory {
        question_text,
        turns,
        answer,
    })
}

fn parse_doc_line(line: &str, call: &ToolCall) -> Result<RetrievedDoc, TrajectoryError> {
    let bad = || TrajectoryError::Malformed(format!("bad document line {line:?}"));
    let (rank, rest) = line.split_once(". [").ok_or_else(bad)?;
    let rank: u32 = rank.parse().map_err(|_| bad())?;
    let (title, content) = rest.split_once("] ").ok_or_else(bad)?;
    Ok(RetrievedDoc {
        source_query: call.sub_queries.first().cloned().unwrap_or_default(),
        title: title.to_string(),
        content: content.to_string(),
        rank,
        retriever_id: String::new(),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn question() -> Question {
        Question::new("q1", "Who founded the company that makes Widget?", vec!["Ada".into()])
            .unwrap()
    }

    pub fn doc(query: &str, rank: u32, content: &str) -> RetrievedDoc {
        RetrievedDoc {
            source_query: query.into(),
            title: format!("T{rank}"),
            content: content.into(),
            rank,
            retriever_id: "mock".into(),
        }
    }

    pub fn search_turn(index: u32, queries: &[&str], docs: usize) -> Turn {
        Turn {
            index,
            planner_reasoning: format!("I need to search step {index}."),
            tool_call: ToolCall::search(queries.iter().copied()),
            observations: (1..=docs as u32)
                .map(|r| doc(queries[0], r, &format!("fact {index}-{r}")))
                .collect(),
        }
    }

    pub fn answer_turn(index: u32) -> Turn {
        Turn {
            index,
            planner_reasoning: "I have enough information.".into(),
            tool_call: ToolCall::call_answer(),
            observations: vec![],
        }
    }
}
