//! QA datasets, method evaluation and reports.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ChatModel, SearchClient};
use crate::parallel::map_bounded;
use crate::reward::{answer_direct, answer_rag, AnswerScorer, BaselinePrompts};
use crate::rollout::RolloutEngine;
use crate::trajectory::{count_actions, Question, TerminationReason, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path} line {line}: duplicate id {id:?}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("unknown dataset format {0:?}")]
    UnknownFormat(String),
    #[error("unknown method {0:?} (expected direct, rag or planner)")]
    UnknownMethod(String),
    #[error("planner evaluation needs a rollout engine")]
    MissingPlanner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    #[default]
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DatasetFormat {
    /// One `{"id", "question", "golden_answers": [...]}` object per line.
    #[default]
    #[serde(rename = "jsonl-qa")]
    JsonlQa,
}

impl FromStr for DatasetFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl-qa" => Ok(Self::JsonlQa),
            other => Err(EvalError::UnknownFormat(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<Question>,
    pub split: Split,
    /// Lines skipped in lenient mode, with reasons.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

#[derive(Deserialize)]
struct QaLine {
    id: serde_json::Value,
    question: String,
    golden_answers: Vec<String>,
    #[serde(default)]
    domain: Option<String>,
}

fn split_from_name(name: &str) -> Split {
    let lower = name.to_lowercase();
    if lower.contains("train") {
        Split::Train
    } else if lower.contains("dev") || lower.contains("valid") {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Loads a dataset; the name is the file stem. Malformed lines are fatal
/// when `strict`, otherwise skipped with a warning. Duplicate ids are always
/// fatal.
pub fn load_dataset(path: &Path, format: DatasetFormat, strict: bool) -> Result<Dataset, EvalError> {
    let DatasetFormat::JsonlQa = format;
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: p.clone(),
        message: e.to_string(),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<QaLine>(line)
            .map_err(|e| e.to_string())
            .and_then(|qa| {
                let id = match qa.id {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    other => return Err(format!("id must be a string or number, got {other}")),
                };
                let q = Question::new(id, qa.question, qa.golden_answers).map_err(|e| e.to_string())?;
                Ok(match qa.domain {
                    Some(d) => q.with_domain(d),
                    None => q,
                })
            });
        match parsed {
            Ok(q) => {
                if !seen.insert(q.id.clone()) {
                    return Err(EvalError::DuplicateId {
                        path: p,
                        line: line_no,
                        id: q.id,
                    });
                }
                items.push(q);
            }
            Err(message) if strict => {
                return Err(EvalError::Parse {
                    path: p,
                    line: line_no,
                    message,
                })
            }
            Err(message) => {
                tracing::warn!("{p} line {line_no}: skipped: {message}");
                skipped.push(format!("line {line_no}: {message}"));
            }
        }
    }
    Ok(Dataset {
        split: split_from_name(&name),
        name,
        items,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "direct")]
    DirectInference,
    #[serde(rename = "rag")]
    NaiveRag,
    #[serde(rename = "planner")]
    Planner,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::DirectInference => "direct",
            Method::NaiveRag => "rag",
            Method::Planner => "planner",
        }
    }
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "direct" | "direct_inference" | "directinference" => Ok(Method::DirectInference),
            "rag" | "naive_rag" | "naiverag" => Ok(Method::NaiveRag),
            "planner" => Ok(Method::Planner),
            other => Err(EvalError::UnknownMethod(other.into())),
        }
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>, EvalError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Method::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub method: Method,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Items whose generation, search or judging failed; scored incorrect.
    pub failures: usize,
    /// Planner only: mean planning turns over completed trajectories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_turns: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_subqueries: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_rate: Option<f64>,
}

/// Services shared by all methods.
pub struct EvalContext {
    pub generator: Arc<dyn ChatModel>,
    pub search: Arc<SearchClient>,
    pub scorer: AnswerScorer,
    pub prompts: BaselinePrompts,
    pub planner: Option<RolloutEngine>,
    pub parallelism: usize,
}

/// Per-item outcome; `None` marks a failure.
fn score_items<F>(ds: &Dataset, ctx: &EvalContext, answer: F) -> Vec<Option<u8>>
where
    F: Fn(&Question) -> Result<String, String> + Sync,
{
    map_bounded(&ds.items, ctx.parallelism, |_, q| {
        let result = answer(q).and_then(|a| ctx.scorer.score(q, &a).map_err(|e| e.to_string()));
        match result {
            Ok(v) => {
                if let Some(w) = v.warning {
                    tracing::warn!(question = %q.id, "{w}");
                }
                Some(v.score)
            }
            Err(e) => {
                tracing::warn!(question = %q.id, "item failed: {e}");
                None
            }
        }
    })
}

fn accuracy_row(ds: &Dataset, method: Method, scores: &[Option<u8>]) -> EvalRow {
    let correct = scores.iter().filter(|s| **s == Some(1)).count();
    let total = ds.items.len();
    EvalRow {
        dataset: ds.name.clone(),
        method,
        total,
        correct,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        failures: scores.iter().filter(|s| s.is_none()).count(),
        mean_turns: None,
        mean_subqueries: None,
        completion_rate: None,
    }
}

/// Evaluates one method. Planner runs also return their trajectories.
pub fn evaluate_method(
    ds: &Dataset,
    method: Method,
    ctx: &EvalContext,
) -> Result<(EvalRow, Vec<Trajectory>), EvalError> {
    match method {
        Method::DirectInference => {
            let scores = score_items(ds, ctx, |q| {
                answer_direct(ctx.generator.as_ref(), q, &ctx.prompts.direct).map_err(|e| e.to_string())
            });
            Ok((accuracy_row(ds, method, &scores), Vec::new()))
        }
        Method::NaiveRag => {
            let scores = score_items(ds, ctx, |q| {
                answer_rag(ctx.generator.as_ref(), &ctx.search, q, &ctx.prompts.rag)
                    .map(|(a, _)| a)
                    .map_err(|e| e.to_string())
            });
            Ok((accuracy_row(ds, method, &scores), Vec::new()))
        }
        Method::Planner => {
            let engine = ctx.planner.as_ref().ok_or(EvalError::MissingPlanner)?;
            let trajectories = engine.run_batch(&ds.items, ctx.parallelism);
            let scores: Vec<Option<u8>> = map_bounded(&trajectories, ctx.parallelism, |_, t| {
                match (&t.answer, t.terminated_by) {
                    (Some(a), _) => match ctx.scorer.score(&t.question, a) {
                        Ok(v) => Some(v.score),
                        Err(e) => {
                            tracing::warn!(question = %t.question.id, "judge failed: {e}");
                            None
                        }
                    },
                    (None, TerminationReason::ClientError) => None,
                    (None, _) => Some(0),
                }
            });
            let mut row = accuracy_row(ds, method, &scores);
            let completed: Vec<&Trajectory> = trajectories
                .iter()
                .filter(|t| t.terminated_by == TerminationReason::GeneratorCall)
                .collect();
            let n = completed.len();
            if n > 0 {
                let counts: Vec<_> = completed.iter().map(|t| count_actions(t)).collect();
                row.mean_turns = Some(counts.iter().map(|c| c.planning_turns as f64).sum::<f64>() / n as f64);
                row.mean_subqueries =
                    Some(counts.iter().map(|c| c.total_subqueries as f64).sum::<f64>() / n as f64);
            }
            row.completion_rate = Some(if ds.items.is_empty() {
                0.0
            } else {
                n as f64 / ds.items.len() as f64
            });
            Ok((row, trajectories))
        }
    }
}

fn opt3(v: Option<f64>, bracket: bool) -> String {
    match v {
        Some(x) if bracket => format!("[{x:.3}]"),
        Some(x) => format!("{x:.3}"),
        None => "-".into(),
    }
}

/// Aligned text table and JSON Lines, both ordered by (dataset, method).
pub fn render_report(rows: &[EvalRow]) -> (String, String) {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| (&a.dataset, a.method).cmp(&(&b.dataset, b.method)));
    if sorted.is_empty() {
        tracing::warn!("report has no rows");
    }
    let header = ["dataset", "method", "n", "accuracy", "turns", "subqueries", "completed", "failures"];
    let body: Vec<[String; 8]> = sorted
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.method.label().to_string(),
                r.total.to_string(),
                format!("{:.3}", r.accuracy),
                opt3(r.mean_turns, true),
                opt3(r.mean_subqueries, false),
                opt3(r.completion_rate, false),
                r.failures.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut table = String::new();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(table, "{}", line(header.to_vec()));
    let _ = writeln!(
        table,
        "{}",
        widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")
    );
    for row in &body {
        let _ = writeln!(table, "{}", line(row.iter().map(String::as_str).collect()));
    }
    let jsonl = sorted
        .iter()
        .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
        .collect();
    (table, jsonl)
}
