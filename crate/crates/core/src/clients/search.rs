use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::http::{agent, classify_error, resolve_api_key};
use crate::trajectory::RetrievedDoc;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("empty sub-query")]
    EmptyQuery,
    #[error("search service {endpoint} unavailable: {message}")]
    SearchUnavailable { endpoint: String, message: String },
    #[error("invalid search endpoint: {0}")]
    InvalidEndpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchKind {
    /// Dense-retriever server (`POST {base_url}/retrieve`).
    LocalRetriever,
    /// Serper-style web search API.
    WebSearch,
    /// In-process corpus loaded from a JSON Lines file.
    MockCorpus,
}

fn default_top_k() -> usize {
    3
}
fn default_search_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEndpoint {
    pub kind: SearchKind,
    /// Base URL for HTTP kinds, corpus path for `mock_corpus`.
    pub location: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_search_timeout")]
    pub timeout_secs: f64,
}

impl SearchEndpoint {
    pub fn mock(path: impl Into<String>, top_k: usize) -> Self {
        Self {
            kind: SearchKind::MockCorpus,
            location: path.into(),
            top_k,
            api_key_env: None,
            timeout_secs: default_search_timeout(),
        }
    }

    pub fn identity(&self) -> String {
        let kind = match self.kind {
            SearchKind::LocalRetriever => "retriever",
            SearchKind::WebSearch => "web",
            SearchKind::MockCorpus => "mock",
        };
        format!("{kind}:{}:k{}", self.location, self.top_k)
    }

    pub fn problems(&self, field: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.top_k < 1 {
            out.push(format!("{field}.top_k must be >= 1"));
        }
        if self.location.trim().is_empty() {
            out.push(format!("{field}.location is required"));
        } else if self.kind == SearchKind::MockCorpus && !Path::new(&self.location).exists() {
            out.push(format!("{field}.location {} does not exist", self.location));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            out.push(format!("{field}.timeout_secs must be > 0"));
        }
        out
    }
}

/// One search result before ranking and provenance are attached.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub content: String,
}

/// A retrieval service answering one query at a time.
pub trait SearchBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Up to `top_k` hits, best first.
    fn lookup(&self, query: &str, top_k: usize) -> Result<Vec<SearchHit>, SearchError>;
}

/// Runs sub-queries against a backend and merges the results.
#[derive(Clone)]
pub struct SearchClient {
    top_k: usize,
    backend: Arc<dyn SearchBackend>,
}

impl SearchClient {
    pub fn new(backend: Arc<dyn SearchBackend>, top_k: usize) -> Self {
        Self {
            top_k: top_k.max(1),
            backend,
        }
    }

    pub fn id(&self) -> &str {
        self.backend.id()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Documents for every sub-query, concatenated in query order and
    /// de-duplicated on exact `(title, content)`; the first occurrence
    /// keeps its per-query rank.
    pub fn search(&self, sub_queries: &[String]) -> Result<Vec<RetrievedDoc>, SearchError> {
        if sub_queries.iter().any(|q| q.trim().is_empty()) {
            return Err(SearchError::EmptyQuery);
        }
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for query in sub_queries {
            let hits = self.backend.lookup(query, self.top_k)?;
            for (i, hit) in hits.into_iter().take(self.top_k).enumerate() {
                if !seen.insert((hit.title.clone(), hit.content.clone())) {
                    continue;
                }
                out.push(RetrievedDoc {
                    source_query: query.clone(),
                    title: hit.title,
                    content: hit.content,
                    rank: i as u32 + 1,
                    retriever_id: self.backend.id().to_string(),
                });
            }
        }
        Ok(out)
    }
}

pub fn connect_search(endpoint: &SearchEndpoint) -> Result<SearchClient, SearchError> {
    let problems = endpoint.problems("search");
    if !problems.is_empty() {
        return Err(SearchError::InvalidEndpoint(problems.join("; ")));
    }
    let backend: Arc<dyn SearchBackend> = match endpoint.kind {
        SearchKind::MockCorpus => Arc::new(MockCorpus::from_file(Path::new(&endpoint.location))?),
        SearchKind::LocalRetriever => Arc::new(HttpRetriever::new(endpoint)),
        SearchKind::WebSearch => Arc::new(WebSearch::new(endpoint)?),
    };
    Ok(SearchClient::new(backend, endpoint.top_k))
}

#[derive(Debug, Clone, Deserialize)]
struct CorpusRecord {
    query_key: String,
    #[serde(default)]
    title: String,
    content: String,
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Keyed in-memory corpus. A record matches a query when its normalized key
/// equals the normalized query or appears in it as a whole-word phrase.
/// Hits come back in file order.
#[derive(Debug, Clone)]
pub struct MockCorpus {
    id: String,
    records: Vec<(String, SearchHit)>,
}

impl MockCorpus {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            records: Vec::new(),
        }
    }

    pub fn with_doc(mut self, key: &str, title: &str, content: &str) -> Self {
        self.insert(key, title, content);
        self
    }

    pub fn insert(&mut self, key: &str, title: &str, content: &str) {
        self.records.push((
            normalize(key),
            SearchHit {
                title: title.into(),
                content: content.into(),
            },
        ));
    }

    pub fn from_file(path: &Path) -> Result<Self, SearchError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SearchError::InvalidEndpoint(format!("cannot read corpus {}: {e}", path.display()))
        })?;
        Self::from_jsonl(&format!("mock:{}", path.display()), &text)
    }

    pub fn from_jsonl(id: &str, text: &str) -> Result<Self, SearchError> {
        let mut corpus = Self::new(id);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| {
                SearchError::InvalidEndpoint(format!("corpus line {}: {e}", i + 1))
            })?;
            corpus.insert(&rec.query_key, &rec.title, &rec.content);
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn phrase_in(query: &str, key: &str) -> bool {
    if key.is_empty() {
        return false;
    }
    query == key
        || query.starts_with(&format!("{key} "))
        || query.ends_with(&format!(" {key}"))
        || query.contains(&format!(" {key} "))
}

impl SearchBackend for MockCorpus {
    fn id(&self) -> &str {
        &self.id
    }

    fn lookup(&self, query: &str, top_k: usize) -> Result<Vec<SearchHit>, SearchError> {
        let q = normalize(query);
        Ok(self
            .records
            .iter()
            .filter(|(key, _)| phrase_in(&q, key))
            .map(|(_, hit)| hit.clone())
            .take(top_k)
            .collect())
    }
}

/// Client for the common dense-retrieval server protocol:
/// `POST /retrieve {"queries": [q], "topk": k}` returning
/// `{"result": [[{"document": {"contents": "title\nbody"}} | {"contents": ..} | {"title", "text"}]]}`.
pub struct HttpRetriever {
    id: String,
    url: String,
    timeout: Duration,
    agent: ureq::Agent,
}

impl HttpRetriever {
    pub fn new(endpoint: &SearchEndpoint) -> Self {
        Self {
            id: endpoint.identity(),
            url: format!("{}/retrieve", endpoint.location.trim_end_matches('/')),
            timeout: Duration::from_secs_f64(endpoint.timeout_secs),
            agent: agent(),
        }
    }
}

fn hit_from_value(v: &serde_json::Value) -> Option<SearchHit> {
    let doc = v.get("document").unwrap_or(v);
    if let Some(contents) = doc.get("contents").and_then(|c| c.as_str()) {
        let (title, body) = contents.split_once('\n').unwrap_or(("", contents));
        return Some(SearchHit {
            title: title.trim().trim_matches('"').to_string(),
            content: body.trim().to_string(),
        });
    }
    let text = doc
        .get("text")
        .or_else(|| doc.get("snippet"))
        .and_then(|t| t.as_str())?;
    Some(SearchHit {
        title: doc
            .get("title")
            .and_then(|t| t.as_str())
            .unwrap_or_default()
            .to_string(),
        content: text.to_string(),
    })
}

fn unavailable(id: &str, message: impl Into<String>) -> SearchError {
    SearchError::SearchUnavailable {
        endpoint: id.to_string(),
        message: message.into(),
    }
}

impl SearchBackend for HttpRetriever {
    fn id(&self) -> &str {
        &self.id
    }

    fn lookup(&self, query: &str, top_k: usize) -> Result<Vec<SearchHit>, SearchError> {
        let body = serde_json::json!({"queries": [query], "topk": top_k, "return_scores": false});
        let mut resp = self
            .agent
            .post(&self.url)
            .config()
            .timeout_global(Some(self.timeout))
            .build()
            .send_json(&body)
            .map_err(|e| unavailable(&self.id, format!("{:?}: {e}", classify_error(&e))))?;
        if resp.status().as_u16() != 200 {
            return Err(unavailable(&self.id, format!("HTTP {}", resp.status())));
        }
        let v: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| unavailable(&self.id, e.to_string()))?;
        let list = v
            .get("result")
            .and_then(|r| r.get(0))
            .and_then(|r| r.as_array())
            .ok_or_else(|| unavailable(&self.id, "response has no result list"))?;
        Ok(list.iter().filter_map(hit_from_value).take(top_k).collect())
    }
}

/// Serper-compatible web search: `POST {location}` with `{"q", "num"}` and
/// an `X-API-KEY` header; results under `organic[].{title, snippet}`.
pub struct WebSearch {
    id: String,
    url: String,
    api_key: Option<String>,
    timeout: Duration,
    agent: ureq::Agent,
}

impl WebSearch {
    pub fn new(endpoint: &SearchEndpoint) -> Result<Self, SearchError> {
        Ok(Self {
            id: endpoint.identity(),
            url: endpoint.location.clone(),
            api_key: resolve_api_key(endpoint.api_key_env.as_deref())
                .map_err(SearchError::InvalidEndpoint)?,
            timeout: Duration::from_secs_f64(endpoint.timeout_secs),
            agent: agent(),
        })
    }
}

impl SearchBackend for WebSearch {
    fn id(&self) -> &str {
        &self.id
    }

    fn lookup(&self, query: &str, top_k: usize) -> Result<Vec<SearchHit>, SearchError> {
        let mut req = self
            .agent
            .post(&self.url)
            .config()
            .timeout_global(Some(self.timeout))
            .build();
        if let Some(key) = &self.api_key {
            req = req.header("X-API-KEY", key.as_str());
        }
        let mut resp = req
            .send_json(serde_json::json!({"q": query, "num": top_k}))
            .map_err(|e| unavailable(&self.id, e.to_string()))?;
        if resp.status().as_u16() != 200 {
            return Err(unavailable(&self.id, format!("HTTP {}", resp.status())));
        }
        let v: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| unavailable(&self.id, e.to_string()))?;
        let organic = v
            .get("organic")
            .and_then(|o| o.as_array())
            .cloned()
            .unwrap_or_default();
        Ok(organic.iter().filter_map(hit_from_value).take(top_k).collect())
    }
}
