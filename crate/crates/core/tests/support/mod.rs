//! Random trajectory generators shared by property and acceptance suites.

#![allow(dead_code)]

use proptest::prelude::*;
use searchplanner::trajectory::{Question, RetrievedDoc, TerminationReason, ToolCall, Trajectory, Turn};

pub fn words(min: usize, max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,7}[.,?]?", min..=max).prop_map(|w| w.join(" "))
}

fn doc(query: String, rank: u32) -> impl Strategy<Value = RetrievedDoc> {
    (words(0, 3), words(1, 12)).prop_map(move |(title, content)| RetrievedDoc {
        source_query: query.clone(),
        title,
        content,
        rank,
        retriever_id: "mock".into(),
    })
}

fn search_turn(index: u32) -> impl Strategy<Value = Turn> {
    (words(0, 8), prop::collection::vec(words(1, 4), 1..=3), 0usize..=3).prop_flat_map(
        move |(reasoning, queries, n_docs)| {
            let q0 = queries[0].clone();
            let docs: Vec<_> = (1..=n_docs as u32).map(|r| doc(q0.clone(), r)).collect();
            (Just(reasoning), Just(queries), docs).prop_map(move |(reasoning, queries, observations)| Turn {
                index,
                planner_reasoning: reasoning,
                tool_call: ToolCall::search(queries),
                observations,
            })
        },
    )
}

#[derive(Debug, Clone, Copy)]
pub enum Ending {
    Answer,
    TurnLimit,
    ParseFailure,
    ClientError,
}

fn ending() -> impl Strategy<Value = Ending> {
    prop_oneof![
        3 => Just(Ending::Answer),
        1 => Just(Ending::TurnLimit),
        1 => Just(Ending::ParseFailure),
        1 => Just(Ending::ClientError),
    ]
}

/// Valid trajectories with 0..=6 searches, any termination, and sometimes
/// recorded malformed planner outputs.
pub fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
    (0usize..=6, ending(), words(1, 10), words(1, 4), words(0, 6), 0usize..=2)
        .prop_flat_map(|(n_search, end, qtext, gt, reasoning, n_bad)| {
            let turns: Vec<_> = (1..=n_search as u32).map(search_turn).collect();
            let bad = prop::collection::vec(words(1, 5), n_bad);
            (turns, Just(end), Just(qtext), Just(gt), Just(reasoning), words(1, 5), bad)
        })
        .prop_map(|(mut turns, end, qtext, gt, reasoning, answer, bad)| {
            let q = Question::new("q", qtext, vec![gt]).unwrap();
            let (answer, reason) = match end {
                Ending::Answer => {
                    turns.push(Turn {
                        index: turns.len() as u32 + 1,
                        planner_reasoning: reasoning,
                        tool_call: ToolCall::call_answer(),
                        observations: vec![],
                    });
                    (Some(answer), TerminationReason::GeneratorCall)
                }
                Ending::TurnLimit => (None, TerminationReason::TurnLimit),
                Ending::ParseFailure => (None, TerminationReason::ParseFailure),
                Ending::ClientError => (None, TerminationReason::ClientError),
            };
            Trajectory::new(q, turns, answer, reason)
                .unwrap()
                .with_malformed_outputs(bad)
        })
}

/// Same trajectory with every retrieved title, content and generator answer
/// replaced by `filler` text of arbitrary length.
pub fn perturb_retrieved(t: &Trajectory, filler: &[String]) -> Trajectory {
    let mut k = 0;
    let mut next = || {
        let s = filler[k % filler.len()].clone();
        k += 1;
        s
    };
    let turns: Vec<Turn> = t
        .turns
        .iter()
        .map(|turn| Turn {
            observations: turn
                .observations
                .iter()
                .map(|d| RetrievedDoc {
                    title: next(),
                    content: next(),
                    ..d.clone()
                })
                .collect(),
            ..turn.clone()
        })
        .collect();
    let answer = t.answer.as_ref().map(|_| next());
    Trajectory::new(t.question.clone(), turns, answer, t.terminated_by)
        .unwrap()
        .with_malformed_outputs(t.malformed_outputs.clone())
}
