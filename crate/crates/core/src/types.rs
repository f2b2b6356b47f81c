//! Domain records shared by every stage of an experiment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// EntityQuestions relations that are both hard to guess and well defined.
pub const ENTITY_RELATIONS: [&str; 4] = ["P176", "P264", "P50", "P26"];

/// Question template for each supported EntityQuestions relation.
pub fn relation_template(code: &str) -> Option<&'static str> {
    match code {
        "P176" => Some("Which company is [X] produced by?"),
        "P264" => Some("What music label is [X] represented by?"),
        "P50" => Some("Who is the author of [X]?"),
        "P26" => Some("Who is [X] married to?"),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dataset {
    SimpleQAVerified,
    EntityQuestions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub dataset: Dataset,
    pub question_text: String,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requires_reasoning: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_step: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    /// Derived at load time: `requires_reasoning || multi_step`. Absent for
    /// datasets without complexity metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complex: Option<bool>,
}

impl QuestionRecord {
    pub fn simpleqa(
        id: impl Into<String>,
        question_text: impl Into<String>,
        gold_answer: impl Into<String>,
        requires_reasoning: Option<bool>,
        multi_step: Option<bool>,
        topic: Option<String>,
    ) -> Self {
        let complex = if requires_reasoning.is_none() && multi_step.is_none() {
            None
        } else {
            Some(requires_reasoning.unwrap_or(false) || multi_step.unwrap_or(false))
        };
        Self {
            id: id.into(),
            dataset: Dataset::SimpleQAVerified,
            question_text: question_text.into(),
            gold_answer: gold_answer.into(),
            relation: None,
            requires_reasoning,
            multi_step,
            topic,
            complex,
        }
    }

    pub fn entity(
        id: impl Into<String>,
        relation: impl Into<String>,
        question_text: impl Into<String>,
        gold_answer: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            dataset: Dataset::EntityQuestions,
            question_text: question_text.into(),
            gold_answer: gold_answer.into(),
            relation: Some(relation.into()),
            requires_reasoning: None,
            multi_step: None,
            topic: None,
            complex: None,
        }
    }

    /// `true` when the question is in the Complex subset; absent flags count as false.
    pub fn is_complex(&self) -> bool {
        self.requires_reasoning.unwrap_or(false) || self.multi_step.unwrap_or(false)
    }
}

/// Reasoning mode requested from a hybrid model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningMode {
    On,
    Off,
}

/// One experimental condition. The string form is the stable CLI identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantId {
    On,
    Off,
    OnDummy,
    OnSingleDummy,
    /// Dummy trace of a fixed token length.
    OnDummyX(u32),
    OnFacts,
    OffFacts,
    OffFactsConservative,
    OnDummyFacts,
    OffDummyFacts,
}

impl VariantId {
    pub const FIXED: [VariantId; 9] = [
        VariantId::On,
        VariantId::Off,
        VariantId::OnDummy,
        VariantId::OnSingleDummy,
        VariantId::OnFacts,
        VariantId::OffFacts,
        VariantId::OffFactsConservative,
        VariantId::OnDummyFacts,
        VariantId::OffDummyFacts,
    ];

    pub fn mode(self) -> ReasoningMode {
        match self {
            VariantId::Off
            | VariantId::OffFacts
            | VariantId::OffFactsConservative
            | VariantId::OffDummyFacts => ReasoningMode::Off,
            _ => ReasoningMode::On,
        }
    }

    /// Variants whose inputs are derived from a stored ON sample.
    pub fn needs_original_trace(self) -> bool {
        !matches!(
            self,
            VariantId::On | VariantId::Off | VariantId::OnSingleDummy | VariantId::OnDummyX(_)
        )
    }

    pub fn needs_facts(self) -> bool {
        matches!(
            self,
            VariantId::OnFacts
                | VariantId::OffFacts
                | VariantId::OffFactsConservative
                | VariantId::OnDummyFacts
                | VariantId::OffDummyFacts
        )
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantId::On => f.write_str("on"),
            VariantId::Off => f.write_str("off"),
            VariantId::OnDummy => f.write_str("on-dummy"),
            VariantId::OnSingleDummy => f.write_str("on-single-dummy"),
            VariantId::OnDummyX(len) => write!(f, "on-dummy-x:{len}"),
            VariantId::OnFacts => f.write_str("on-facts"),
            VariantId::OffFacts => f.write_str("off-facts"),
            VariantId::OffFactsConservative => f.write_str("off-facts-conservative"),
            VariantId::OnDummyFacts => f.write_str("on-dummy-facts"),
            VariantId::OffDummyFacts => f.write_str("off-dummy-facts"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown variant `{0}` (expected one of on, off, on-dummy, on-single-dummy, on-dummy-x:<len>, on-facts, off-facts, off-facts-conservative, on-dummy-facts, off-dummy-facts)")]
pub struct ParseVariantError(pub String);

impl FromStr for VariantId {
    type Err = ParseVariantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(len) = s.strip_prefix("on-dummy-x:") {
            return match len.parse::<u32>() {
                Ok(n) if n > 0 => Ok(VariantId::OnDummyX(n)),
                _ => Err(ParseVariantError(s.to_string())),
            };
        }
        VariantId::FIXED
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| ParseVariantError(s.to_string()))
    }
}

impl Serialize for VariantId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VariantId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GradeLabel {
    Correct,
    Incorrect,
    NotAttempted,
}

/// Outcome of a search-backed fact check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Correct,
    Incorrect,
    Illegal,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub question_id: String,
    pub variant: VariantId,
    pub sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_text: Option<String>,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_token_count: Option<u32>,
    pub answer_token_count: u32,
    /// True when token counts were estimated rather than reported by the backend.
    #[serde(default)]
    pub token_counts_estimated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<GradeLabel>,
    pub backend_profile_id: String,
}

impl SampleRecord {
    pub fn trace_ref(&self) -> TraceRef {
        TraceRef {
            question_id: self.question_id.clone(),
            variant: self.variant,
            sample_index: self.sample_index,
        }
    }
}

/// Identifies one stored sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TraceRef {
    pub question_id: String,
    pub variant: VariantId,
    pub sample_index: u32,
}

impl fmt::Display for TraceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.question_id, self.variant, self.sample_index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_identifiers_round_trip() {
        let mut all: Vec<VariantId> = VariantId::FIXED.to_vec();
        all.push(VariantId::OnDummyX(2048));
        for v in all {
            assert_eq!(v.to_string().parse::<VariantId>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<VariantId>(&json).unwrap(), v);
        }
    }

    #[test]
    fn dummy_x_requires_positive_length() {
        assert!("on-dummy-x:0".parse::<VariantId>().is_err());
        assert!("on-dummy-x:".parse::<VariantId>().is_err());
        assert!("on-dummy".parse::<VariantId>().is_ok());
        assert!("ON".parse::<VariantId>().is_err());
    }

    #[test]
    fn complex_is_either_flag() {
        let q = QuestionRecord::simpleqa("1", "q", "a", Some(false), Some(true), None);
        assert_eq!(q.complex, Some(true));
        let q = QuestionRecord::simpleqa("2", "q", "a", Some(false), None, None);
        assert_eq!(q.complex, Some(false));
        assert!(!q.is_complex());
    }

    #[test]
    fn modes() {
        assert_eq!(VariantId::OffDummyFacts.mode(), ReasoningMode::Off);
        assert_eq!(VariantId::OnDummyX(64).mode(), ReasoningMode::On);
        assert!(VariantId::OnDummy.needs_original_trace());
        assert!(!VariantId::OnDummy.needs_facts());
    }
}
