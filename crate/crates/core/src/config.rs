//! Layered TOML configuration, service construction and run directories.
//!
//! Files are merged in order (later tables override earlier keys), then
//! `key.path=value` overrides are applied. Relative file paths inside a
//! config file are resolved against that file's directory; API keys are
//! only ever named by environment variable.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::clients::{
    connect_model, connect_search, ChatModel, ModelEndpoint, SearchClient, SearchEndpoint, SearchKind,
};
use crate::eval::{Method, DatasetFormat};
use crate::prompt::{defaults, PromptTemplate};
use crate::reward::{AnswerScorer, BaselinePrompts, BaselineRunner, BaselineStore, RewardConfig, RewardEngine, RewardError};
use crate::rollout::{RolloutConfig, RolloutEngine};
use crate::seed::derive_seed;
use crate::toy::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid override {0:?}: expected key.path=value")]
    Override(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("cannot connect {field}: {message}")]
    Connect { field: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub planner: ModelEndpoint,
    pub generator: ModelEndpoint,
    /// Defaults to the generator endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<ModelEndpoint>,
    pub search: SearchEndpoint,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardSection {
    #[serde(flatten)]
    pub params: RewardConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_judge_template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process_judge_template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag_template: Option<PathBuf>,
    /// Persistent baseline cache (JSON Lines).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_cache: Option<PathBuf>,
}

fn default_parallelism() -> usize {
    4
}
fn default_parse_errors() -> usize {
    2
}
fn default_wall_clock() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSection {
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_parse_errors")]
    pub parse_error_threshold: usize,
    #[serde(default = "default_wall_clock")]
    pub wall_clock_secs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planner_system_template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_template: Option<PathBuf>,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            parallelism: default_parallelism(),
            parse_error_threshold: default_parse_errors(),
            wall_clock_secs: default_wall_clock(),
            planner_system_template: None,
            generator_template: None,
        }
    }
}

fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.005, 0.05, 0.125, 0.25]
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySection {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            alphas: default_alphas(),
            seeds: default_seeds(),
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::DirectInference, Method::NaiveRag, Method::Planner]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub format: DatasetFormat,
    /// Abort on malformed dataset lines instead of skipping them.
    #[serde(default)]
    pub strict: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: default_methods(),
            format: DatasetFormat::JsonlQa,
            strict: false,
        }
    }
}

fn default_run_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
    pub endpoints: Endpoints,
    #[serde(default)]
    pub reward: RewardSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub toy: ToySection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Keys holding file paths, resolved per file against its directory.
const PATH_KEYS: &[&[&str]] = &[
    &["run_dir"],
    &["endpoints", "planner", "rules_path"],
    &["endpoints", "generator", "rules_path"],
    &["endpoints", "judge", "rules_path"],
    &["reward", "answer_judge_template"],
    &["reward", "process_judge_template"],
    &["reward", "direct_template"],
    &["reward", "rag_template"],
    &["reward", "baseline_cache"],
    &["rollout", "planner_system_template"],
    &["rollout", "generator_template"],
];

fn lookup_mut<'a>(table: &'a mut Table, path: &[&str]) -> Option<&'a mut Value> {
    let (last, parents) = path.split_last()?;
    let mut t = table;
    for key in parents {
        t = t.get_mut(*key)?.as_table_mut()?;
    }
    t.get_mut(*last)
}

fn resolve_paths(table: &mut Table, base: &Path) {
    let rebase = |v: &mut Value| {
        if let Value::String(s) = v {
            if !s.is_empty() && Path::new(s.as_str()).is_relative() {
                *s = base.join(s.as_str()).display().to_string();
            }
        }
    };
    for path in PATH_KEYS {
        if let Some(v) = lookup_mut(table, path) {
            rebase(v);
        }
    }
    // A mock corpus location is a file; HTTP locations are left alone.
    let is_mock = table
        .get("endpoints")
        .and_then(|e| e.get("search"))
        .and_then(|s| s.get("kind"))
        .and_then(Value::as_str)
        == Some("mock_corpus");
    if is_mock {
        if let Some(v) = lookup_mut(table, &["endpoints", "search", "location"]) {
            rebase(v);
        }
    }
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn parse_override_value(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Sets `a.b.c=value`; the value is read as TOML, falling back to a string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut t = table;
    for p in parents {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    }
    t.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Merges `paths` in order, applies `overrides`, and validates the result.
pub fn load_config(paths: &[PathBuf], overrides: &[String]) -> Result<AppConfig, ConfigError> {
    if paths.is_empty() {
        return Err(ConfigError::Validation(vec!["at least one config file is required".into()]));
    }
    let mut merged = Table::new();
    for path in paths {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: p.clone(),
            message: e.to_string(),
        })?;
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: p.clone(),
            message: e.message().to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        resolve_paths(&mut table, &base);
        merge(&mut merged, table);
    }
    for o in overrides {
        apply_override(&mut merged, o)?;
    }
    let cfg: AppConfig = Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse {
            path: paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            message: e.message().to_string(),
        })?;
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Validation(problems))
    }
}

fn template_problem(field: &str, path: &Option<PathBuf>, required: &[&str]) -> Option<String> {
    let path = path.as_ref()?;
    match PromptTemplate::from_file(path) {
        Err(_) if !path.exists() => Some(format!("{field}: file {} does not exist", path.display())),
        Err(e) => Some(format!("{field}: {e}")),
        Ok(t) => t.require(required).err().map(|e| format!("{field}: {e}")),
    }
}

fn load_template(path: &Option<PathBuf>, default: fn() -> PromptTemplate) -> PromptTemplate {
    path.as_ref()
        .and_then(|p| PromptTemplate::from_file(p).ok())
        .unwrap_or_else(default)
}

/// All prompt templates, from files where configured.
#[derive(Debug, Clone)]
pub struct Templates {
    pub planner_system: PromptTemplate,
    pub generator: PromptTemplate,
    pub answer_judge: PromptTemplate,
    pub process_judge: PromptTemplate,
    pub baselines: BaselinePrompts,
}

impl AppConfig {
    /// Every violated constraint, each naming its field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.endpoints.planner.problems("endpoints.planner"));
        out.extend(self.endpoints.generator.problems("endpoints.generator"));
        if let Some(j) = &self.endpoints.judge {
            out.extend(j.problems("endpoints.judge"));
        }
        out.extend(self.endpoints.search.problems("endpoints.search"));
        out.extend(self.reward.params.problems());
        if self.rollout.parallelism < 1 {
            out.push("rollout.parallelism must be >= 1".into());
        }
        if self.rollout.parse_error_threshold < 1 {
            out.push("rollout.parse_error_threshold must be >= 1".into());
        }
        if self.rollout.wall_clock_secs < 1 {
            out.push("rollout.wall_clock_secs must be >= 1".into());
        }
        let templates = [
            ("reward.answer_judge_template", &self.reward.answer_judge_template, &["question", "ground_truth", "answer"][..]),
            ("reward.process_judge_template", &self.reward.process_judge_template, &[][..]),
            ("reward.direct_template", &self.reward.direct_template, &["question"][..]),
            ("reward.rag_template", &self.reward.rag_template, &["documents", "question"][..]),
            ("rollout.planner_system_template", &self.rollout.planner_system_template, &[][..]),
            ("rollout.generator_template", &self.rollout.generator_template, &["trajectory"][..]),
        ];
        for (field, path, required) in templates {
            out.extend(template_problem(field, path, required));
        }
        out.extend(self.toy.train.problems());
        if self.toy.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            out.push("toy.alphas must all be finite values >= 0".into());
        }
        if self.toy.seeds.is_empty() {
            out.push("toy.seeds must not be empty".into());
        }
        out
    }

    pub fn templates(&self) -> Templates {
        Templates {
            planner_system: load_template(&self.rollout.planner_system_template, defaults::planner_system),
            generator: load_template(&self.rollout.generator_template, defaults::generator),
            answer_judge: load_template(&self.reward.answer_judge_template, defaults::answer_judge),
            process_judge: load_template(&self.reward.process_judge_template, defaults::process_judge),
            baselines: BaselinePrompts {
                direct: load_template(&self.reward.direct_template, defaults::direct_answer),
                rag: load_template(&self.reward.rag_template, defaults::rag_answer),
            },
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        let t = self.templates();
        RolloutConfig {
            max_turns: self.reward.params.max_turns,
            max_subqueries: self.reward.params.max_subqueries,
            parse_error_threshold: self.rollout.parse_error_threshold,
            wall_clock_secs: self.rollout.wall_clock_secs,
            planner_system_prompt: t.planner_system,
            generator_prompt: t.generator,
        }
    }

    pub fn judge_endpoint(&self) -> &ModelEndpoint {
        self.endpoints.judge.as_ref().unwrap_or(&self.endpoints.generator)
    }

    /// Resolved configuration as TOML. Only environment variable names of
    /// secrets appear.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn seeded(mut ep: ModelEndpoint, seed: u64, label: &str) -> ModelEndpoint {
    ep.seed.get_or_insert(derive_seed(seed, label));
    ep
}

/// Connected services for one run.
#[derive(Clone)]
pub struct Services {
    pub planner: Arc<dyn ChatModel>,
    pub generator: Arc<dyn ChatModel>,
    pub judge: Arc<dyn ChatModel>,
    pub search: Arc<SearchClient>,
}

impl Services {
    /// Unset endpoint seeds are derived from the run seed.
    pub fn connect(cfg: &AppConfig) -> Result<Self, ConfigError> {
        let model = |field: &str, ep: &ModelEndpoint| {
            connect_model(&seeded(ep.clone(), cfg.seed, field)).map_err(|e| ConfigError::Connect {
                field: field.into(),
                message: e.to_string(),
            })
        };
        let search = connect_search(&cfg.endpoints.search).map_err(|e| ConfigError::Connect {
            field: "endpoints.search".into(),
            message: e.to_string(),
        })?;
        Ok(Self {
            planner: model("endpoints.planner", &cfg.endpoints.planner)?,
            generator: model("endpoints.generator", &cfg.endpoints.generator)?,
            judge: model("endpoints.judge", cfg.judge_endpoint())?,
            search: Arc::new(search),
        })
    }

    pub fn rollout_engine(&self, cfg: &AppConfig) -> RolloutEngine {
        RolloutEngine::new(
            cfg.rollout_config(),
            self.planner.clone(),
            self.generator.clone(),
            self.search.clone(),
        )
    }

    pub fn reward_engine(&self, cfg: &AppConfig) -> RewardEngine {
        let t = cfg.templates();
        RewardEngine::new(cfg.reward.params.clone(), self.judge.clone())
            .with_templates(t.answer_judge, t.process_judge)
    }

    /// Baselines cached at `reward.baseline_cache` when set, else in memory.
    pub fn baseline_runner(&self, cfg: &AppConfig) -> Result<BaselineRunner, RewardError> {
        let store = match &cfg.reward.baseline_cache {
            Some(p) => BaselineStore::open(p)?,
            None => BaselineStore::in_memory(),
        };
        Ok(BaselineRunner {
            generator: self.generator.clone(),
            search: self.search.clone(),
            scorer: self.scorer(cfg),
            prompts: cfg.templates().baselines,
            store: Arc::new(store),
        })
    }

    pub fn scorer(&self, cfg: &AppConfig) -> AnswerScorer {
        AnswerScorer::new(
            self.judge.clone(),
            cfg.templates().answer_judge,
            cfg.reward.params.verdict_retries,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub seed: u64,
    pub version: String,
    pub started_at: DateTime<Utc>,
    pub endpoints: Vec<(String, String)>,
    pub alpha: f64,
}

/// Output directory of one run: `config.resolved`, `run.json`, `log.txt`
/// and the command's artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates the directory and records the resolved config and metadata.
    pub fn create(path: &Path, cfg: Option<&AppConfig>, command: &str, seed: u64) -> Result<Self, ConfigError> {
        let io = |p: &Path, e: std::io::Error| ConfigError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(path).map_err(|e| io(path, e))?;
        if let Some(cfg) = cfg {
            let resolved = path.join("config.resolved");
            std::fs::write(&resolved, cfg.to_toml()).map_err(|e| io(&resolved, e))?;
        }
        let endpoints = cfg
            .map(|c| {
                vec![
                    ("planner".to_string(), c.endpoints.planner.identity()),
                    ("generator".to_string(), c.endpoints.generator.identity()),
                    ("judge".to_string(), c.judge_endpoint().identity()),
                    ("search".to_string(), c.endpoints.search.identity()),
                ]
            })
            .unwrap_or_default();
        let meta = RunMetadata {
            command: command.into(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_at: Utc::now(),
            endpoints,
            alpha: cfg.map_or(0.0, |c| c.reward.params.alpha),
        };
        let meta_path = path.join("run.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("metadata serializes"))
            .map_err(|e| io(&meta_path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn log_path(&self) -> PathBuf {
        self.file("log.txt")
    }
}

/// Whether the search endpoint runs in-process.
pub fn is_hermetic(cfg: &AppConfig) -> bool {
    use crate::clients::Provider;
    let local = |e: &ModelEndpoint| e.provider != Provider::Openai;
    local(&cfg.endpoints.planner)
        && local(&cfg.endpoints.generator)
        && local(cfg.judge_endpoint())
        && cfg.endpoints.search.kind == SearchKind::MockCorpus
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 7
run_dir = "out"

[endpoints.planner]
provider = "echo"

[endpoints.generator]
provider = "rules"
rules_path = "gen.jsonl"

[endpoints.search]
kind = "mock_corpus"
location = "corpus.jsonl"

[reward]
alpha = 0.0
"#;

    fn setup() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("gen.jsonl"), "{\"reply\":\"x\"}\n").unwrap();
        std::fs::write(dir.path().join("corpus.jsonl"), "").unwrap();
        let base = dir.path().join("base.toml");
        std::fs::write(&base, BASE).unwrap();
        (dir, base)
    }

    #[test]
    fn base_with_override() {
        let (_dir, base) = setup();
        let cfg = load_config(std::slice::from_ref(&base), &["reward.alpha=0.05".into()]).unwrap();
        assert_eq!(cfg.reward.params.alpha, 0.05);
        assert_eq!(cfg.reward.params.max_turns, 5);
        assert_eq!(cfg.seed, 7);
        assert!(cfg.endpoints.generator.rules_path.as_ref().unwrap().is_absolute());
        assert_eq!(cfg.judge_endpoint(), &cfg.endpoints.generator);
        assert!(is_hermetic(&cfg));
        let cfg = load_config(&[base], &["rollout.parallelism=9".into(), "endpoints.planner.model_name=small".into()]).unwrap();
        assert_eq!(cfg.rollout.parallelism, 9);
        assert_eq!(cfg.endpoints.planner.model_name, "small");
    }

    #[test]
    fn later_files_win() {
        let (dir, base) = setup();
        let extra = dir.path().join("extra.toml");
        std::fs::write(&extra, "[reward]\nalpha = 0.125\nmax_subqueries = 8\n").unwrap();
        let cfg = load_config(&[base, extra], &[]).unwrap();
        assert_eq!(cfg.reward.params.alpha, 0.125);
        assert_eq!(cfg.reward.params.max_subqueries, 8);
        assert_eq!(cfg.endpoints.search.kind, SearchKind::MockCorpus);
    }

    #[test]
    fn validation_lists_every_problem() {
        let (_dir, base) = setup();
        let err = load_config(
            &[base],
            &[
                "reward.alpha=-1".into(),
                "reward.max_turns=0".into(),
                "reward.answer_judge_template=missing.txt".into(),
            ],
        )
        .unwrap_err();
        match err {
            ConfigError::Validation(p) => {
                assert_eq!(p.len(), 3, "{p:?}");
                assert!(p.iter().any(|m| m.starts_with("reward.answer_judge_template")));
                assert!(p.iter().any(|m| m.starts_with("reward.alpha")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_overrides_and_files() {
        let (dir, base) = setup();
        assert!(matches!(load_config(std::slice::from_ref(&base), &["noequals".into()]), Err(ConfigError::Override(_))));
        assert!(matches!(load_config(&[base], &["seed.x=1".into()]), Err(ConfigError::Override(_))));
        let broken = dir.path().join("broken.toml");
        std::fs::write(&broken, "seed = [").unwrap();
        assert!(matches!(load_config(&[broken], &[]), Err(ConfigError::Parse { .. })));
        assert!(matches!(load_config(&[], &[]), Err(ConfigError::Validation(_))));
    }

    #[test]
    fn run_dir_records_config_without_secrets() {
        let (dir, base) = setup();
        std::env::set_var("SP_TEST_SECRET_KEY", "sk-very-secret");
        let cfg = load_config(&[base], &["endpoints.planner.api_key_env=\"SP_TEST_SECRET_KEY\"".into()]).unwrap();
        let run = RunDir::create(&dir.path().join("run"), Some(&cfg), "rollout", cfg.seed).unwrap();
        let resolved = std::fs::read_to_string(run.file("config.resolved")).unwrap();
        assert!(resolved.contains("SP_TEST_SECRET_KEY"));
        assert!(!resolved.contains("sk-very-secret"));
        let back: AppConfig = toml::from_str(&resolved).unwrap();
        assert_eq!(back, cfg);
        let meta: RunMetadata = serde_json::from_str(&std::fs::read_to_string(run.file("run.json")).unwrap()).unwrap();
        assert_eq!(meta.seed, 7);
    }

    #[test]
    fn services_connect_with_derived_seeds() {
        let (_dir, base) = setup();
        let cfg = load_config(&[base], &[]).unwrap();
        let s = Services::connect(&cfg).unwrap();
        assert_eq!(s.planner.id(), "echo");
        assert_eq!(s.rollout_engine(&cfg).config().max_turns, 5);
    }
}
