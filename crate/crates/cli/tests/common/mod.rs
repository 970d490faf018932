//! Hermetic mock world: a keyed corpus, rule-table planner, generator and
//! judge, a 20-question dataset and a config tying them together.
//!
//! Single-hop questions name the entity whose document holds the answer, so
//! retrieval with the raw question finds it. Two-hop answers sit in a second
//! document that only a follow-up query reaches.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

pub const N_EACH: usize = 10;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_searchplanner"))
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn search(q: &str) -> String {
    format!(
        "Look it up.\n<tool_call>{{\"name\": \"search\", \"arguments\": {{\"queries\": [\"{q}\"]}}}}</tool_call>"
    )
}

fn answer() -> String {
    "Enough evidence.\n<tool_call>{\"name\": \"call_answer_llm\", \"arguments\": {}}</tool_call>".into()
}

fn rule(all: &[&str], none: &[&str], reply: &str) -> serde_json::Value {
    json!({"all": all, "none": none, "reply": reply})
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).unwrap();
}

pub struct Item {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub hops: usize,
}

pub fn items() -> Vec<Item> {
    let mut out = Vec::new();
    for i in 0..N_EACH {
        out.push(Item {
            id: format!("s{i}"),
            question: format!("Where was inventor S{i} born?"),
            answer: format!("Town{i}"),
            hops: 1,
        });
    }
    for i in 0..N_EACH {
        out.push(Item {
            id: format!("t{i}"),
            question: format!("Which city is the capital of the home country of inventor T{i}?"),
            answer: format!("Harbor{i}"),
            hops: 2,
        });
    }
    out
}

fn birth_fact(i: usize) -> String {
    format!("Inventor S{i} was born in Town{i}.")
}
fn citizen_fact(i: usize) -> String {
    format!("Inventor T{i} is a citizen of Country Q{i}.")
}
fn capital_fact(i: usize) -> String {
    format!("The capital of Country Q{i} is Harbor{i}.")
}

pub struct MockWorld {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub dataset: PathBuf,
}

impl MockWorld {
    pub fn build() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = |name: &str| dir.path().join(name);
        let items = items();

        let mut corpus = Vec::new();
        let mut planner = Vec::new();
        let mut generator = Vec::new();
        let mut judge = vec![rule(&["grade multi-turn search plans"], &[], "5")];
        for i in 0..N_EACH {
            corpus.push(json!({"query_key": format!("inventor s{i}"), "title": format!("S{i}"), "content": birth_fact(i)}));
            corpus.push(json!({"query_key": format!("inventor t{i}"), "title": format!("T{i}"), "content": citizen_fact(i)}));
            corpus.push(json!({"query_key": format!("country q{i} capital"), "title": format!("Q{i}"), "content": capital_fact(i)}));

            let sq = format!("Where was inventor S{i} born?");
            planner.push(rule(&[&sq, &birth_fact(i)], &[], &answer()));
            planner.push(rule(&[&sq], &[], &search(&format!("inventor s{i}"))));
            let tq = format!("home country of inventor T{i}?");
            planner.push(rule(&[&tq, &capital_fact(i)], &[], &answer()));
            planner.push(rule(&[&tq, &citizen_fact(i)], &[], &search(&format!("country q{i} capital"))));
            planner.push(rule(&[&tq], &[], &search(&format!("inventor t{i}"))));

            generator.push(rule(&[&birth_fact(i)], &[], &format!("Town{i}")));
            generator.push(rule(&[&capital_fact(i)], &[], &format!("Harbor{i}")));
        }
        generator.push(rule(&[], &[], "I do not know"));
        for it in &items {
            let pair = format!("Reference answer: {}\nResponse: {}\n", it.answer, it.answer);
            judge.push(rule(&[&pair], &[], "yes"));
        }
        judge.push(rule(&[], &[], "no"));

        write_lines(&p("corpus.jsonl"), &corpus);
        write_lines(&p("planner.jsonl"), &planner);
        write_lines(&p("generator.jsonl"), &generator);
        write_lines(&p("judge.jsonl"), &judge);
        let qa: Vec<_> = items
            .iter()
            .map(|it| json!({"id": it.id, "question": it.question, "golden_answers": [it.answer]}))
            .collect();
        let dataset = p("mockqa.jsonl");
        write_lines(&dataset, &qa);

        let config = p("config.toml");
        std::fs::write(
            &config,
            r#"seed = 11
run_dir = "run"

[endpoints.planner]
provider = "rules"
rules_path = "planner.jsonl"

[endpoints.generator]
provider = "rules"
rules_path = "generator.jsonl"

[endpoints.judge]
provider = "rules"
rules_path = "judge.jsonl"

[endpoints.search]
kind = "mock_corpus"
location = "corpus.jsonl"
top_k = 3

[reward]
alpha = 0.0

[rollout]
parallelism = 4
"#,
        )
        .unwrap();
        Self { dir, config, dataset }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}
