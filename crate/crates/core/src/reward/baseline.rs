//! Non-planning baseline answers and their cached judge scores.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{AnswerScorer, RewardError};
use crate::clients::{ChatMessage, ChatModel, SearchClient};
use crate::prompt::{defaults, PromptTemplate};
use crate::trajectory::{Question, RetrievedDoc};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub score_direct: u8,
    pub score_rag: u8,
    pub answer_direct: String,
    pub answer_rag: String,
    pub cached_at: DateTime<Utc>,
}

impl BaselineScores {
    pub fn new(score_direct: u8, score_rag: u8, answer_direct: String, answer_rag: String) -> Self {
        Self {
            score_direct,
            score_rag,
            answer_direct,
            answer_rag,
            cached_at: Utc::now(),
        }
    }

    pub fn best(&self) -> u8 {
        self.score_direct.max(self.score_rag)
    }
}

/// Baselines depend on the question and on which generator and search
/// service produced them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BaselineKey {
    pub question_id: String,
    pub generator_id: String,
    pub search_id: String,
}

#[derive(Serialize, Deserialize)]
struct StoredBaseline {
    key: BaselineKey,
    scores: BaselineScores,
}

/// Shared baseline cache, optionally persisted as append-only JSONL.
/// Later lines for the same key win.
#[derive(Default)]
pub struct BaselineStore {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<BaselineKey, BaselineScores>>,
    locks: Mutex<HashMap<BaselineKey, Arc<Mutex<()>>>>,
    file: Mutex<()>,
}

impl BaselineStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, RewardError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| RewardError::Store(format!("{}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: StoredBaseline = serde_json::from_str(line).map_err(|e| {
                    RewardError::Store(format!("{} line {}: {e}", path.display(), i + 1))
                })?;
                entries.insert(rec.key, rec.scores);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            ..Default::default()
        })
    }

    pub fn get(&self, key: &BaselineKey) -> Option<BaselineScores> {
        self.entries.lock().expect("lock").get(key).cloned()
    }

    pub fn put(&self, key: BaselineKey, scores: BaselineScores) -> Result<(), RewardError> {
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&StoredBaseline {
                key: key.clone(),
                scores: scores.clone(),
            })
            .map_err(|e| RewardError::Store(e.to_string()))?;
            let _guard = self.file.lock().expect("lock");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| RewardError::Store(format!("{}: {e}", path.display())))?;
            writeln!(f, "{line}").map_err(|e| RewardError::Store(e.to_string()))?;
        }
        self.entries.lock().expect("lock").insert(key, scores);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key_lock(&self, key: &BaselineKey) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("lock")
            .entry(key.clone())
            .or_default()
            .clone()
    }
}

#[derive(Debug, Clone)]
pub struct BaselinePrompts {
    pub direct: PromptTemplate,
    pub rag: PromptTemplate,
}

impl Default for BaselinePrompts {
    fn default() -> Self {
        Self {
            direct: defaults::direct_answer(),
            rag: defaults::rag_answer(),
        }
    }
}

/// `1. [title] content` per line.
pub fn render_documents(docs: &[RetrievedDoc]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| format!("{}. [{}] {}", i + 1, d.title, d.content.replace('\n', " ")))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn answer_direct(
    generator: &dyn ChatModel,
    q: &Question,
    template: &PromptTemplate,
) -> Result<String, RewardError> {
    let prompt = template
        .render(&[("question", &q.text)])
        .map_err(|e| RewardError::Template(e.to_string()))?;
    Ok(generator.complete(&[ChatMessage::user(prompt)])?)
}

/// Retrieves once with the question itself as the query, then answers.
pub fn answer_rag(
    generator: &dyn ChatModel,
    search: &SearchClient,
    q: &Question,
    template: &PromptTemplate,
) -> Result<(String, Vec<RetrievedDoc>), RewardError> {
    let docs = search
        .search(std::slice::from_ref(&q.text))
        .map_err(|e| RewardError::Search(e.to_string()))?;
    let prompt = template
        .render(&[("documents", &render_documents(&docs)), ("question", &q.text)])
        .map_err(|e| RewardError::Template(e.to_string()))?;
    Ok((generator.complete(&[ChatMessage::user(prompt)])?, docs))
}

/// Computes baselines once per (question, generator, search) key.
#[derive(Clone)]
pub struct BaselineRunner {
    pub generator: Arc<dyn ChatModel>,
    pub search: Arc<SearchClient>,
    pub scorer: AnswerScorer,
    pub prompts: BaselinePrompts,
    pub store: Arc<BaselineStore>,
}

impl BaselineRunner {
    pub fn key(&self, q: &Question) -> BaselineKey {
        BaselineKey {
            question_id: q.id.clone(),
            generator_id: self.generator.id().to_string(),
            search_id: self.search.id().to_string(),
        }
    }

    /// Cached scores when present; otherwise both baseline answers are
    /// generated and judged. Concurrent callers for one key compute once.
    pub fn compute_baselines(&self, q: &Question) -> Result<BaselineScores, RewardError> {
        let key = self.key(q);
        let lock = self.store.key_lock(&key);
        let _guard = lock.lock().expect("lock");
        if let Some(hit) = self.store.get(&key) {
            return Ok(hit);
        }
        let a_direct = answer_direct(self.generator.as_ref(), q, &self.prompts.direct)?;
        let (a_rag, _) = answer_rag(self.generator.as_ref(), &self.search, q, &self.prompts.rag)?;
        let s_direct = self.scorer.score(q, &a_direct)?;
        let s_rag = self.scorer.score(q, &a_rag)?;
        for w in s_direct.warning.iter().chain(&s_rag.warning) {
            tracing::warn!(question = %q.id, "{w}");
        }
        let scores = BaselineScores::new(s_direct.score, s_rag.score, a_direct, a_rag);
        self.store.put(key, scores.clone())?;
        Ok(scores)
    }
}
