//! Prompt templates. Defaults are compiled in from the repository's
//! `prompts/` directory; a run can point at an edited copy instead.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::types::Dataset;

const EXTRACT_FACTS: &str = include_str!("../../../prompts/extract_facts.txt");
const FILTER_QUESTION: &str = include_str!("../../../prompts/filter_question.txt");
const FILTER_ANSWER: &str = include_str!("../../../prompts/filter_answer.txt");
const FILTER_ANSWER_CONSERVATIVE: &str =
    include_str!("../../../prompts/filter_answer_conservative.txt");
const PARSE_FACTS: &str = include_str!("../../../prompts/parse_facts.txt");
const VERIFY_FACT: &str = include_str!("../../../prompts/verify_fact.txt");
const OFF_FACTS: &str = include_str!("../../../prompts/off_facts.txt");
const GRADE_SIMPLEQA: &str = include_str!("../../../prompts/grading/simpleqa_verified.txt");
const GRADE_ENTITY: &str = include_str!("../../../prompts/grading/entity_questions.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    ExtractFacts,
    FilterQuestion,
    FilterAnswer,
    FilterAnswerConservative,
    ParseFacts,
    VerifyFact,
    OffFacts,
    GradeSimpleQa,
    GradeEntity,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::ExtractFacts,
        TemplateId::FilterQuestion,
        TemplateId::FilterAnswer,
        TemplateId::FilterAnswerConservative,
        TemplateId::ParseFacts,
        TemplateId::VerifyFact,
        TemplateId::OffFacts,
        TemplateId::GradeSimpleQa,
        TemplateId::GradeEntity,
    ];

    /// Path relative to a prompts directory.
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::ExtractFacts => "extract_facts.txt",
            TemplateId::FilterQuestion => "filter_question.txt",
            TemplateId::FilterAnswer => "filter_answer.txt",
            TemplateId::FilterAnswerConservative => "filter_answer_conservative.txt",
            TemplateId::ParseFacts => "parse_facts.txt",
            TemplateId::VerifyFact => "verify_fact.txt",
            TemplateId::OffFacts => "off_facts.txt",
            TemplateId::GradeSimpleQa => "grading/simpleqa_verified.txt",
            TemplateId::GradeEntity => "grading/entity_questions.txt",
        }
    }

    pub fn builtin(self) -> &'static str {
        match self {
            TemplateId::ExtractFacts => EXTRACT_FACTS,
            TemplateId::FilterQuestion => FILTER_QUESTION,
            TemplateId::FilterAnswer => FILTER_ANSWER,
            TemplateId::FilterAnswerConservative => FILTER_ANSWER_CONSERVATIVE,
            TemplateId::ParseFacts => PARSE_FACTS,
            TemplateId::VerifyFact => VERIFY_FACT,
            TemplateId::OffFacts => OFF_FACTS,
            TemplateId::GradeSimpleQa => GRADE_SIMPLEQA,
            TemplateId::GradeEntity => GRADE_ENTITY,
        }
    }

    /// Placeholders every version of the template must contain.
    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::ExtractFacts => &["thinking_content"],
            TemplateId::FilterQuestion => &["question", "summary"],
            TemplateId::FilterAnswer => &["question", "answer", "thinking_content"],
            TemplateId::FilterAnswerConservative => &["thinking_content", "answer"],
            TemplateId::ParseFacts => &["facts"],
            TemplateId::VerifyFact => &["fact"],
            TemplateId::OffFacts => &["question", "context"],
            TemplateId::GradeSimpleQa | TemplateId::GradeEntity => {
                &["question", "target", "predicted_answer"]
            }
        }
    }

    pub fn grading(dataset: Dataset) -> Self {
        match dataset {
            Dataset::SimpleQAVerified => TemplateId::GradeSimpleQa,
            Dataset::EntityQuestions => TemplateId::GradeEntity,
        }
    }
}

/// Replaces `{name}` placeholders in one left-to-right pass. Substituted text
/// is never rescanned, and braces that do not name a supplied value are kept.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {file} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { file: &'static str, placeholder: &'static str },
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    texts: HashMap<TemplateId, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self {
            texts: TemplateId::ALL
                .iter()
                .map(|id| (*id, id.builtin().to_string()))
                .collect(),
        }
    }

    /// Loads templates from `dir`, falling back to the built-in text for
    /// files that are absent.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(id.file_name());
            if path.is_file() {
                let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                set.texts.insert(id, text);
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for id in TemplateId::ALL {
            let text = self.get(id);
            for p in id.placeholders() {
                if !text.contains(&format!("{{{p}}}")) {
                    return Err(TemplateError::MissingPlaceholder {
                        file: id.file_name(),
                        placeholder: p,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: TemplateId) -> &str {
        &self.texts[&id]
    }

    pub fn render(&self, id: TemplateId, values: &[(&str, &str)]) -> String {
        render(self.get(id), values)
    }

    /// Short content hash of one template, recorded in manifests.
    pub fn hash(&self, id: TemplateId) -> String {
        hex::encode(&Sha256::digest(self.get(id).as_bytes())[..8])
    }
}
