//! Prompt templates with `{name}` placeholders.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template is missing placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("no value supplied for placeholder {{{0}}}")]
    MissingValue(String),
    #[error("failed to read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn from_file(path: &Path) -> Result<Self, TemplateError> {
        std::fs::read_to_string(path)
            .map(Self::new)
            .map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn has_placeholder(&self, name: &str) -> bool {
        self.text.contains(&format!("{{{name}}}"))
    }

    pub fn require(&self, names: &[&str]) -> Result<(), TemplateError> {
        match names.iter().find(|n| !self.has_placeholder(n)) {
            Some(n) => Err(TemplateError::MissingPlaceholder((*n).to_string())),
            None => Ok(()),
        }
    }

    /// Substitutes `{name}` occurrences in a single left-to-right pass, so
    /// values that themselves contain braces are inserted verbatim.
    /// Unknown placeholders are an error; text in braces that is not an
    /// identifier is left alone.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let map: BTreeMap<&str, &str> = values.iter().copied().collect();
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let name = close.map(|c| &after[..c]);
            match name {
                Some(n) if is_ident(n) => {
                    let v = map
                        .get(n)
                        .ok_or_else(|| TemplateError::MissingValue(n.to_string()))?;
                    out.push_str(v);
                    rest = &after[n.len() + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !s.starts_with(|c: char| c.is_ascii_digit())
}

/// Built-in defaults. Deployments normally load their own wording from files.
pub mod defaults {
    use super::PromptTemplate;

    pub fn planner_system() -> PromptTemplate {
        PromptTemplate::new(
            "You plan web and document searches for a separate answering model.\n\
Each turn, think briefly, then emit exactly one tool call:\n\
<tool_call>{\"name\": \"search\", \"arguments\": {\"queries\": [\"...\"]}}</tool_call>\n\
to retrieve documents for one or more self-contained sub-queries, or\n\
<tool_call>{\"name\": \"call_answer_llm\", \"arguments\": {}}</tool_call>\n\
once the gathered evidence is enough for the answering model.\n\
Search at least once and use at most {max_turns} search turns.",
        )
    }

    pub fn generator() -> PromptTemplate {
        PromptTemplate::new(
            "Answer the question using the search planning record below.\n\
Reply with a short answer only.\n\n\
Question: {question}\n\nRecord:\n{trajectory}",
        )
    }

    pub fn direct_answer() -> PromptTemplate {
        PromptTemplate::new("Answer the question with a short answer only.\n\nQuestion: {question}")
    }

    pub fn rag_answer() -> PromptTemplate {
        PromptTemplate::new(
            "Answer the question using the documents below. Reply with a short answer only.\n\n\
Documents:\n{documents}\n\nQuestion: {question}",
        )
    }

    pub fn answer_judge() -> PromptTemplate {
        PromptTemplate::new(
            "Decide whether a response agrees in meaning with the reference answer.\n\n\
Question: {question}\n\
Reference answer: {ground_truth}\n\
Response: {answer}\n\n\
Reply with \"yes\" or \"no\" only.",
        )
    }

    /// The serialized trajectory is sent as the user message.
    pub fn process_judge() -> PromptTemplate {
        PromptTemplate::new(
            "You grade multi-turn search plans produced for a retrieval-augmented QA system.\n\
The user message holds the question, each search round with its sub-queries and results, \
and the final hand-off to the answering model.\n\n\
Deduct for: sub-queries with unresolved references; rounds that repeat earlier queries \
or ignore earlier results; queries that are too broad or too narrow; evidence that was \
found but not used; stopping too early or searching after the evidence was sufficient.\n\n\
Levels: 5 = no notable defects; 4 = at most one point deducted; 3 = about two points; \
2 = about three points; 1 = four or more points.\n\n\
Output format:\n[Score]\n<integer from 1 to 5, nothing else>",
        )
    }
}
