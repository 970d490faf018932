//! Judge calls: binary answer accuracy and 1–5 process scores.

use thiserror::Error;

use super::{ChatMessage, ChatModel, ClientError};
use crate::prompt::{PromptTemplate, TemplateError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("unparseable verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("template: {0}")]
    Template(String),
}

impl From<TemplateError> for JudgeError {
    fn from(e: TemplateError) -> Self {
        Self::Template(e.to_string())
    }
}

/// `yes` → 1, `no` → 0, judged on the leading word only (case-insensitive,
/// ignoring leading quotes or markup).
pub fn parse_yes_no(reply: &str) -> Option<u8> {
    let s = reply
        .trim_start()
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    let word: String = s.chars().take_while(|c| c.is_alphabetic()).collect();
    match word.as_str() {
        "yes" => Some(1),
        "no" => Some(0),
        _ => None,
    }
}

/// First number after the `[Score]` marker (or in the whole reply when the
/// marker is absent); accepted only as an integer in 1..=5.
pub fn parse_process_score(reply: &str) -> Option<u8> {
    let section = match reply.find("[Score]") {
        Some(i) => &reply[i + "[Score]".len()..],
        None => reply,
    };
    let start = section.find(|c: char| c.is_ascii_digit())?;
    let tail = &section[start..];
    let end = tail
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(tail.len());
    let token = tail[..end].trim_end_matches('.');
    let value: u8 = token.parse().ok()?;
    (1..=5).contains(&value).then_some(value)
}

/// Asks the judge whether `answer` agrees with `ground_truth`.
pub fn judge_yes_no(
    judge: &dyn ChatModel,
    question: &str,
    ground_truth: &str,
    answer: &str,
    template: &PromptTemplate,
) -> Result<u8, JudgeError> {
    template.require(&["question", "ground_truth", "answer"])?;
    let prompt = template.render(&[
        ("question", question),
        ("ground_truth", ground_truth),
        ("answer", answer),
    ])?;
    let reply = judge.complete(&[ChatMessage::user(prompt)])?;
    parse_yes_no(&reply).ok_or(JudgeError::UnparseableVerdict(reply))
}

/// Scores a serialized trajectory from 1 to 5. A `{trajectory}` placeholder
/// inlines the trajectory; otherwise the template is the system message and
/// the trajectory the user message.
pub fn judge_process_score(
    judge: &dyn ChatModel,
    serialized_trajectory: &str,
    template: &PromptTemplate,
) -> Result<u8, JudgeError> {
    let messages = if template.has_placeholder("trajectory") {
        vec![ChatMessage::user(
            template.render(&[("trajectory", serialized_trajectory)])?,
        )]
    } else {
        vec![
            ChatMessage::system(template.text()),
            ChatMessage::user(serialized_trajectory),
        ]
    };
    let reply = judge.complete(&messages)?;
    parse_process_score(&reply).ok_or(JudgeError::UnparseableVerdict(reply))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::doubles::ScriptedModel;
    use crate::prompt::defaults;

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("yes"), Some(1));
        assert_eq!(parse_yes_no("No."), Some(0));
        assert_eq!(parse_yes_no("  \"YES\", clearly"), Some(1));
        assert_eq!(parse_yes_no("**no**"), Some(0));
        assert_eq!(parse_yes_no("maybe"), None);
        assert_eq!(parse_yes_no("yesterday"), None);
        assert_eq!(parse_yes_no("not sure"), None);
        assert_eq!(parse_yes_no("I think yes"), None);
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_process_score("[Score]\n5"), Some(5));
        assert_eq!(parse_process_score("3"), Some(3));
        assert_eq!(parse_process_score("Score: 9"), None);
        assert_eq!(parse_process_score("#### [Score]\n4."), Some(4));
        assert_eq!(parse_process_score("[Score] 2.5"), None);
        assert_eq!(parse_process_score("no digits"), None);
        assert_eq!(parse_process_score("0"), None);
        // Digits before the marker are ignored.
        assert_eq!(parse_process_score("round 7 ... [Score]\n1"), Some(1));
    }

    #[test]
    fn judge_yes_no_renders_and_parses() {
        let judge = ScriptedModel::new("judge", ["yes", "No.", "maybe"]);
        let t = defaults::answer_judge();
        assert_eq!(judge_yes_no(&judge, "q", "gt", "a", &t), Ok(1));
        assert_eq!(judge_yes_no(&judge, "q", "gt", "a", &t), Ok(0));
        assert!(matches!(
            judge_yes_no(&judge, "q", "gt", "a", &t),
            Err(JudgeError::UnparseableVerdict(_))
        ));
        let prompt = &judge.received()[0][0].content;
        assert!(prompt.contains("Reference answer: gt"));
        assert!(prompt.contains("Response: a"));

        let bad = PromptTemplate::new("{question}");
        assert!(matches!(
            judge_yes_no(&judge, "q", "gt", "a", &bad),
            Err(JudgeError::Template(_))
        ));
    }

    #[test]
    fn process_judge_message_layout() {
        let judge = ScriptedModel::new("judge", ["[Score]\n5", "4"]);
        assert_eq!(judge_process_score(&judge, "TRAJ", &defaults::process_judge()), Ok(5));
        let inline = PromptTemplate::new("Rate this:\n{trajectory}");
        assert_eq!(judge_process_score(&judge, "TRAJ", &inline), Ok(4));
        let rec = judge.received();
        assert_eq!(rec[0].len(), 2);
        assert_eq!(rec[0][1].content, "TRAJ");
        assert_eq!(rec[1].len(), 1);
        assert_eq!(rec[1][0].content, "Rate this:\nTRAJ");
    }
}
