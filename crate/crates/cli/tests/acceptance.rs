//! Acceptance gate. Each test prints one `ACCEPTANCE` line with its verdict
//! straight to stderr, so the lines survive test output capture.

mod common;
#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

use searchplanner::clients::doubles::{FnModel, ScriptedModel};
use searchplanner::clients::{ChatMessage, ClientError, ClientErrorKind, MockCorpus, SearchClient};
use searchplanner::masking::build_mask;
use searchplanner::record::{read_records, write_records, TrajectoryRecord};
use searchplanner::reward::{
    cost_reward, format_ok, outcome_from_scores, outcome_reward, BaselineScores, RewardConfig,
    RewardEngine,
};
use searchplanner::rollout::{RolloutConfig, RolloutEngine};
use searchplanner::seed::stream;
use searchplanner::toy::{
    clipped_objective, clipped_objective_grad, summarize_sweep, sweep_runs, updates_to_fraction,
    FeatureKind, FeatureMap, LinearPolicy, PpoStep, TrainConfig,
};
use searchplanner::trajectory::{
    count_actions, parse_serialized, serialize_trajectory, Question, SpanOrigin, TerminationReason,
    ToolKind,
};

fn report(n: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "ACCEPTANCE criterion {n} [{name}]: {verdict} ({:.2}s) {detail}\n",
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn gate(n: u32, name: &str, limit: Duration, started: Instant, failures: Vec<String>, detail: String) {
    let elapsed = started.elapsed();
    let mut failures = failures;
    if elapsed > limit {
        failures.push(format!("runtime {:.1}s over {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()));
    }
    let detail = if failures.is_empty() {
        detail
    } else {
        format!("{detail}; {}", failures.join("; "))
    };
    report(n, name, failures.is_empty(), elapsed, &detail);
    assert!(failures.is_empty(), "criterion {n}: {detail}");
}

#[test]
fn criterion_1_outcome_reward_exhaustive() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    // Gain of the planned answer over the better baseline, by hand.
    let expected = |a: u8, best: u8| match (a, best) {
        (1, 0) => 1.5,
        (1, 1) => 1.0,
        (0, 0) => 0.5,
        _ => 0.0,
    };
    for a in 0..=1u8 {
        for d in 0..=1u8 {
            for r in 0..=1u8 {
                let want = expected(a, d.max(r));
                let got = outcome_from_scores(a, d, r);
                let via_store = outcome_reward(a, &BaselineScores::new(d, r, String::new(), String::new()));
                if got != want || via_store != want {
                    failures.push(format!("({a},{d},{r}) -> {got}/{via_store}, want {want}"));
                }
            }
        }
    }
    let order = [
        outcome_from_scores(1, 0, 0),
        outcome_from_scores(1, 1, 0),
        outcome_from_scores(0, 0, 0),
        outcome_from_scores(0, 0, 1),
    ];
    if !order.windows(2).all(|w| w[0] > w[1]) {
        failures.push(format!("ordering violated: {order:?}"));
    }
    gate(1, "outcome oracle", Duration::from_secs(1), t0, failures, "8/8 combinations".into());
}

#[test]
fn criterion_2_cost_reward_boundaries() {
    let t0 = Instant::now();
    let cfg = RewardConfig::default();
    assert_eq!((cfg.max_turns, cfg.max_subqueries), (5, 10));
    let mut failures = Vec::new();
    for (l, q, want) in [(2, 3, (0.6, 0.7)), (5, 10, (0.0, 0.0)), (7, 12, (0.0, 0.0))] {
        let c = cost_reward(l, q, &cfg);
        if (c.turn, c.query) != want || c.total != c.turn + c.query {
            failures.push(format!("(L={l}, sum={q}) -> ({}, {}), want {want:?}", c.turn, c.query));
        }
    }
    gate(2, "cost boundaries", Duration::from_secs(1), t0, failures, "3/3 cases exact".into());
}

fn sample<S: Strategy>(strategy: &S, runner: &mut TestRunner) -> S::Value {
    strategy.new_tree(runner).expect("strategy generates").current()
}

fn answer_judge() -> Arc<FnModel> {
    Arc::new(FnModel::new("judge", |m: &[ChatMessage]| {
        let all: String = m.iter().map(|x| x.content.as_str()).collect();
        Ok(if all.contains("Reference answer:") { "yes" } else { "4" }.into())
    }))
}

#[test]
fn criterion_3_format_gate() {
    let t0 = Instant::now();
    let mut runner = TestRunner::new(Config::with_cases(1000));
    let strategy = support::arb_trajectory();
    let engine = RewardEngine::new(RewardConfig::default().with_alpha(0.1), answer_judge());
    let baselines = BaselineScores::new(0, 0, String::new(), String::new());
    let mut failures = Vec::new();
    let (mut valid, mut invalid) = (0, 0);
    for _ in 0..1000 {
        let t = sample(&strategy, &mut runner);
        let c = count_actions(&t);
        let should_fail = c.n_search == 0 || c.n_answer == 0 || !t.malformed_outputs.is_empty();
        let b = engine.compute_reward(&t, &baselines).expect("judge double answers");
        if should_fail {
            invalid += 1;
            if b.total != -1.0 || format_ok(&t) {
                failures.push(format!("invalid trajectory scored {}", b.total));
            }
        } else {
            valid += 1;
            if b.r_format != 0.0 || b.total < 0.0 {
                failures.push(format!("valid trajectory got format {} total {}", b.r_format, b.total));
            }
        }
    }
    if valid < 100 || invalid < 100 {
        failures.push(format!("unbalanced sample: {valid} valid, {invalid} invalid"));
    }
    failures.truncate(5);
    gate(
        3,
        "format gate",
        Duration::from_secs(10),
        t0,
        failures,
        format!("1000 trajectories ({valid} valid, {invalid} invalid)"),
    );
}

#[test]
fn criterion_4_loss_mask() {
    let t0 = Instant::now();
    let mut runner = TestRunner::new(Config::with_cases(1000));
    let strategy = support::arb_trajectory();
    let filler = proptest::collection::vec(support::words(1, 15), 1..6);
    let mut failures = Vec::new();
    for _ in 0..1000 {
        let t = sample(&strategy, &mut runner);
        let s = serialize_trajectory(&t).unwrap();
        let mask = build_mask(&t).unwrap();
        for span in &t.spans {
            let want = span.origin == SpanOrigin::ModelGenerated;
            if mask.bits[span.start..span.end].iter().any(|b| *b != want) {
                failures.push(format!("{:?} span {}..{} mis-masked", span.origin, span.start, span.end));
            }
        }
        let included = |t: &searchplanner::trajectory::Trajectory| -> Vec<String> {
            let s = serialize_trajectory(t).unwrap();
            let m = build_mask(t).unwrap();
            (0..s.token_count()).filter(|&i| m.bits[i]).map(|i| s.token_text(i).to_string()).collect()
        };
        let p = support::perturb_retrieved(&t, &sample(&filler, &mut runner));
        if included(&t) != included(&p) {
            failures.push("perturbing retrieved text changed an included token".into());
        }
        if mask.len() != s.token_count() {
            failures.push("mask length differs from token count".into());
        }
    }
    failures.truncate(5);
    gate(4, "loss mask", Duration::from_secs(30), t0, failures, "1000 trajectories".into());
}

#[test]
fn criterion_5_ppo_gradient_check() {
    let t0 = Instant::now();
    let map = FeatureMap::new(FeatureKind::Compact, 5, 10);
    let n_params = LinearPolicy::zeros(map).n_params();
    assert!(n_params <= 10);
    let mut rng = stream(5, "acceptance/gradcheck");
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let w: Vec<f64> = (0..n_params).map(|_| rng.random_range(-0.8..0.8)).collect();
        // The behaviour policy differs from `w`, so some ratios fall outside
        // the clip range.
        let old: Vec<f64> = w.iter().map(|x| x + rng.random_range(-0.4..0.4)).collect();
        let steps: Vec<PpoStep> = (0..16)
            .map(|_| {
                let phi = vec![1.0, f64::from(rng.random_range(0..2u8)), rng.random_range(0.0..1.0)];
                let old_probs = LinearPolicy::probs_with(&old, &phi);
                let action = rng.random_range(0..3usize);
                PpoStep {
                    old_logp: old_probs[action].ln(),
                    old_probs,
                    phi,
                    action,
                    advantage: rng.random_range(-2.0..2.0),
                    mask: rng.random_range(0.0..1.0) < 0.9,
                }
            })
            .collect();
        for kl in [0.0, 0.05] {
            let (_, g) = clipped_objective_grad(&w, &steps, 0.2, kl);
            let h = 1e-6;
            for i in 0..n_params {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                let fd = (clipped_objective(&wp, &steps, 0.2, kl) - clipped_objective(&wm, &steps, 0.2, kl))
                    / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
                if rel >= 1e-5 {
                    failures.push(format!("trial {trial} kl {kl} param {i}: analytic {} fd {fd}", g[i]));
                }
            }
        }
    }
    failures.truncate(5);
    gate(
        5,
        "ppo gradient check",
        Duration::from_secs(10),
        t0,
        failures,
        format!("{n_params} params, 40 objectives, worst relative error {worst:.2e}"),
    );
}

const SWEEP_ALPHAS: [f64; 5] = [0.0, 0.005, 0.05, 0.125, 0.25];
const SWEEP_SEEDS: [u64; 3] = [1, 2, 3];
const SWEEP_UPDATES: usize = 8000;

/// Criteria 6 and 7 share one sweep.
#[test]
fn criteria_6_and_7_toy_training() {
    let t0 = Instant::now();
    let cfg = TrainConfig {
        updates: SWEEP_UPDATES,
        ..TrainConfig::default()
    };
    let parallelism = std::thread::available_parallelism().map_or(1, |n| n.get());
    let results = sweep_runs(&RewardConfig::default(), &cfg, &SWEEP_ALPHAS, &SWEEP_SEEDS, parallelism)
        .expect("training succeeds");
    let rows = summarize_sweep(&SWEEP_ALPHAS, &SWEEP_SEEDS, &results);

    // Criterion 6: non-increasing mean L in α with at most one adjacent tie,
    // and the largest α at the one-search minimum.
    let turns: Vec<f64> = rows.iter().map(|r| r.mean_turns).collect();
    let eps = 1e-9;
    let mut f6 = Vec::new();
    let increases = turns.windows(2).filter(|w| w[1] > w[0] + eps).count();
    let ties = turns.windows(2).filter(|w| (w[1] - w[0]).abs() <= eps).count();
    if increases > 0 {
        f6.push(format!("mean L increases with alpha: {turns:?}"));
    }
    if ties > 1 {
        f6.push(format!("{ties} adjacent ties: {turns:?}"));
    }
    let last = *turns.last().unwrap();
    if (last - 1.0).abs() > eps {
        f6.push(format!("largest alpha converged to L={last}, want 1"));
    }
    let detail6 = rows
        .iter()
        .map(|r| format!("a={} L={:.3} {:?}", r.alpha, r.mean_turns, r.per_seed_turns))
        .collect::<Vec<_>>()
        .join(", ");
    gate(6, "pareto trend", Duration::from_secs(600), t0, f6, format!("{SWEEP_UPDATES} updates x 3 seeds: {detail6}"));

    // Criterion 7: in every α=0 run the format curve reaches 95% of its final
    // value in fewer updates than the outcome curve.
    let t7 = Instant::now();
    let mut f7 = Vec::new();
    let mut details = Vec::new();
    for r in results.iter().filter(|r| r.alpha == 0.0) {
        let format: Vec<f64> = r.log.iter().map(|l| l.mean_format).collect();
        let outcome: Vec<f64> = r.log.iter().map(|l| l.mean_outcome).collect();
        let uf = updates_to_fraction(&format, 0.95, 20);
        let uo = updates_to_fraction(&outcome, 0.95, 20);
        details.push(format!("seed {}: format {uf:?} outcome {uo:?}", r.seed));
        match (uf, uo) {
            (Some(f), Some(o)) if f < o => {}
            _ => f7.push(format!("seed {}: format {uf:?} not before outcome {uo:?}", r.seed)),
        }
    }
    gate(7, "training dynamics", Duration::from_secs(600), t7, f7, details.join(", "));
}

fn search_reply(q: &str) -> String {
    format!("Need more.\n<tool_call>{{\"name\": \"search\", \"arguments\": {{\"queries\": [\"{q}\"]}}}}</tool_call>")
}
const ANSWER: &str = "Done.\n<tool_call>{\"name\": \"call_answer_llm\", \"arguments\": {}}</tool_call>";
const GARBAGE: &str = "I will think about it.";
const BROKEN_THEN_VALID: &str = "<tool_call>{\"name\": \"search\"</tool_call>\n<tool_call>{\"name\": \"search\", \"arguments\": {\"queries\": [\"alpha\"]}}</tool_call>";

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ending {
    Answer,
    ParseFailure,
    GeneratorError,
}

#[test]
fn criterion_8_rollout_protocol() {
    let t0 = Instant::now();
    let corpus = MockCorpus::new("acceptance")
        .with_doc("alpha", "A", "alpha fact")
        .with_doc("beta", "B", "beta fact one")
        .with_doc("beta", "B2", "beta fact two");
    let search = Arc::new(SearchClient::new(Arc::new(corpus), 3));
    let cfg = RolloutConfig::default();
    let mut rng = stream(8, "acceptance/rollout");
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut records = Vec::new();
    let mut by_reason = std::collections::BTreeMap::new();
    for i in 0..200 {
        let n_search = rng.random_range(0..=7usize);
        let ending = match rng.random_range(0..10) {
            0..=6 => Ending::Answer,
            7 | 8 => Ending::ParseFailure,
            _ => Ending::GeneratorError,
        };
        let mut script = Vec::new();
        for _ in 0..n_search {
            match rng.random_range(0..10) {
                0 => script.push(GARBAGE.to_string()),
                1 => {
                    script.push(BROKEN_THEN_VALID.to_string());
                    continue;
                }
                _ => {}
            }
            let q = ["alpha", "beta", "gamma"][rng.random_range(0..3)];
            script.push(search_reply(q));
        }
        match ending {
            Ending::Answer | Ending::GeneratorError => script.push(ANSWER.into()),
            Ending::ParseFailure => script.extend([GARBAGE.to_string(), GARBAGE.to_string()]),
        }
        let planner = Arc::new(ScriptedModel::new("planner", script));
        let generator: Arc<FnModel> = if ending == Ending::GeneratorError {
            Arc::new(FnModel::new("gen", |_| {
                Err(ClientError::new(ClientErrorKind::Unavailable, "gen", 3, "down"))
            }))
        } else {
            Arc::new(FnModel::new("gen", |_| Ok("  the answer \n".into())))
        };
        let engine = RolloutEngine::new(cfg.clone(), planner, generator, search.clone());
        let q = Question::new(format!("p{i}"), format!("Protocol question {i}?"), vec!["x".into()]).unwrap();
        let t = match engine.run_rollout(&q) {
            Ok(t) => t,
            Err(e) => *e.partial,
        };

        let c = count_actions(&t);
        let want = if n_search >= cfg.max_turns {
            TerminationReason::TurnLimit
        } else {
            match ending {
                Ending::Answer => TerminationReason::GeneratorCall,
                Ending::ParseFailure => TerminationReason::ParseFailure,
                Ending::GeneratorError => TerminationReason::ClientError,
            }
        };
        *by_reason.entry(format!("{:?}", t.terminated_by)).or_insert(0) += 1;
        let mut bad = Vec::new();
        if c.planning_turns > cfg.max_turns {
            bad.push(format!("L={} > {}", c.planning_turns, cfg.max_turns));
        }
        if t.terminated_by != want {
            bad.push(format!("terminated by {:?}, want {want:?}", t.terminated_by));
        }
        let answered = t.terminated_by == TerminationReason::GeneratorCall;
        let last_is_answer = t.last_turn().is_some_and(|x| x.tool_call.kind == ToolKind::CallAnswerLlm);
        if answered != (t.answer.is_some() && last_is_answer) {
            bad.push("answer presence disagrees with termination".into());
        }
        if t.answer.as_deref().is_some_and(|a| a != "the answer") {
            bad.push("generator answer not trimmed".into());
        }
        if want == TerminationReason::TurnLimit && c.planning_turns != cfg.max_turns {
            bad.push(format!("turn limit hit at L={}", c.planning_turns));
        }
        if want == TerminationReason::ClientError && t.notes.is_empty() {
            bad.push("client error without a note".into());
        }
        let s = serialize_trajectory(&t).unwrap();
        let parsed = parse_serialized(&s.text).unwrap();
        let same_turns = parsed.turns.len() == t.turns.len()
            && parsed.turns.iter().zip(&t.turns).all(|(p, o)| {
                p.planner_reasoning == o.planner_reasoning
                    && p.tool_call == o.tool_call
                    && p.observations.len() == o.observations.len()
            });
        if !same_turns || parsed.answer != t.answer || parsed.question_text != t.question.text {
            bad.push("text round trip differs".into());
        }
        if !bad.is_empty() {
            failures.push(format!("{} (script n_search={n_search}, {ending:?}): {}", t.id(), bad.join(", ")));
        }
        records.push(TrajectoryRecord::new(t).unwrap());
    }
    let path = dir.path().join("protocol.jsonl");
    write_records(&path, &records).unwrap();
    if read_records(&path).unwrap() != records {
        failures.push("JSON Lines round trip differs".into());
    }
    failures.truncate(5);
    gate(8, "rollout protocol", Duration::from_secs(30), t0, failures, format!("200 episodes {by_reason:?}"));
}

#[test]
fn criterion_9_end_to_end_mock_evaluate() {
    let t0 = Instant::now();
    let w = common::MockWorld::build();
    let out_dir = w.path("eval");
    let out = common::run(&[
        "evaluate",
        "--config",
        w.config.to_str().unwrap(),
        "--dataset",
        w.dataset.to_str().unwrap(),
        "--methods",
        "planner,rag,direct",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    let mut failures = Vec::new();
    if !out.status.success() {
        failures.push(format!("evaluate failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(out_dir.join("report.jsonl"))
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let acc = |m: &str| {
        rows.iter()
            .find(|r| r["method"] == m)
            .and_then(|r| r["accuracy"].as_f64())
            .unwrap_or(f64::NAN)
    };
    let (planner, rag, direct) = (acc("planner"), acc("rag"), acc("direct"));
    if rows.iter().map(|r| r["total"].as_u64()).any(|n| n != Some(20)) {
        failures.push("every row must cover 20 questions".into());
    }
    if !(planner > rag && planner > direct) {
        failures.push(format!("planner {planner} not above rag {rag} and direct {direct}"));
    }
    gate(
        9,
        "mock end-to-end",
        Duration::from_secs(60),
        t0,
        failures,
        format!("accuracy planner {planner:.3}, rag {rag:.3}, direct {direct:.3}"),
    );
}
