//! Autorater grading of predicted answers.
//!
//! The harness trusts the autorater: there is no local string matching. A
//! grade is cached through the response cache, whose key covers the rendered
//! prompt and therefore the (question, gold, predicted, template) tuple.

use crate::backends::{BackendError, CallKind, LlmClient};
use crate::prompts::TemplateId;
use crate::types::{Dataset, GradeLabel};

#[derive(Debug, thiserror::Error)]
pub enum GradeError {
    #[error("unparseable autorater grade after retry: {0:?}")]
    Unparseable(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Reads the grade from the end of an autorater reply. Accepts the label
/// words and the letters A/B/C, case-insensitively.
pub fn parse_grade(reply: &str) -> Option<GradeLabel> {
    let line = reply.lines().rev().find(|l| !l.trim().is_empty())?;
    let token = line
        .split_whitespace()
        .last()?
        .trim_matches(|c: char| !(c.is_alphanumeric() || c == '_'))
        .to_ascii_uppercase();
    let token = token.strip_prefix("GRADE:").unwrap_or(&token);
    match token {
        "A" | "CORRECT" => Some(GradeLabel::Correct),
        "B" | "INCORRECT" => Some(GradeLabel::Incorrect),
        "C" | "NOT_ATTEMPTED" | "NOTATTEMPTED" => Some(GradeLabel::NotAttempted),
        _ => None,
    }
}

pub fn grading_prompt(
    client: &LlmClient,
    dataset: Dataset,
    question: &str,
    gold: &str,
    predicted: &str,
) -> String {
    client.prompts().render(
        TemplateId::grading(dataset),
        &[("question", question), ("target", gold), ("predicted_answer", predicted)],
    )
}

/// Grades one answer, reprompting once when the reply has no grade.
pub fn grade_answer(
    client: &LlmClient,
    dataset: Dataset,
    question: &str,
    gold: &str,
    predicted: &str,
) -> Result<GradeLabel, GradeError> {
    let prompt = grading_prompt(client, dataset, question, gold, predicted);
    let mut last = String::new();
    for attempt in 0..2 {
        last = client.complete_text(CallKind::Grade, &prompt, attempt)?;
        if let Some(label) = parse_grade(&last) {
            return Ok(label);
        }
    }
    Err(GradeError::Unparseable(last))
}
