//! Experiment variants: dummy traces, length-scaled dummies, facts as trace,
//! facts as context, and their dummy controls.
//!
//! Lengths are compared with [`estimate_tokens`] on both sides, so an
//! original trace and its dummy replacement are measured the same way
//! regardless of what the backend reported.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, LlmClient};
use crate::estimators::{omega, pass_curve, EstimatorError, PassCurve};
use crate::exec::parallel_map;
use crate::prompts::{PromptSet, TemplateId};
use crate::tokens::estimate_tokens;
use crate::types::{GradeLabel, QuestionRecord, ReasoningMode, SampleRecord, VariantId};

pub const DUMMY_UNIT: &str = "Let me think.";
pub const NO_FACTS_UNIT: &str = "There is no factual information in the context.";

/// 2^6 through 2^14 tokens.
pub const DEFAULT_SWEEP: [u32; 9] = [64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384];

#[derive(Debug, thiserror::Error)]
pub enum InterventionError {
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// A unit string repeated, single-space joined, to approximate a token target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DummySpec {
    pub unit_text: String,
    pub target_tokens: u32,
}

impl DummySpec {
    pub fn new(target_tokens: u32) -> Self {
        Self {
            unit_text: DUMMY_UNIT.to_string(),
            target_tokens,
        }
    }

    pub fn render(&self) -> Result<String, InterventionError> {
        build_dummy_trace(self.target_tokens, &self.unit_text)
    }
}

fn joined_tokens(unit_len: usize, reps: usize) -> u32 {
    (reps * unit_len + reps.saturating_sub(1)).div_ceil(4) as u32
}

/// Repeats `unit` with single spaces (no trailing space) as many times as
/// brings the estimated token count of the whole string closest to
/// `target_tokens`, preferring fewer repetitions on ties. The result is
/// within one unit's token count of the target.
pub fn build_dummy_trace(target_tokens: u32, unit: &str) -> Result<String, InterventionError> {
    let unit_tokens = estimate_tokens(unit);
    if unit_tokens == 0 {
        return Err(InterventionError::Domain("dummy unit must be non-empty".into()));
    }
    if target_tokens < unit_tokens {
        return Err(InterventionError::Domain(format!(
            "target of {target_tokens} tokens is below one unit ({unit_tokens} tokens); use the single-dummy path"
        )));
    }
    let len = unit.len();
    // Each extra repetition adds len + 1 bytes, i.e. (len + 1) / 4 tokens.
    let guess = ((target_tokens as usize * 4) as f64 / (len + 1) as f64).round() as usize;
    let reps = (guess.saturating_sub(2).max(1)..=guess + 2)
        .min_by_key(|&r| (joined_tokens(len, r).abs_diff(target_tokens), r))
        .unwrap_or(1);
    Ok(vec![unit; reps].join(" "))
}

/// Like [`build_dummy_trace`] but falls back to one unit when the target is
/// shorter than a unit.
pub fn dummy_matching(target_tokens: u32, unit: &str) -> Result<String, InterventionError> {
    if target_tokens < estimate_tokens(unit) {
        return Ok(unit.to_string());
    }
    build_dummy_trace(target_tokens, unit)
}

/// Filtered facts for one trace, rendered one per line as `- fact`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactsContext {
    pub question_id: String,
    pub facts: Vec<String>,
    pub rendered_text: String,
}

impl FactsContext {
    pub fn new(question_id: impl Into<String>, facts: Vec<String>) -> Self {
        let rendered_text = render_facts(&facts);
        Self {
            question_id: question_id.into(),
            facts,
            rendered_text,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

pub fn render_facts(facts: &[String]) -> String {
    facts
        .iter()
        .map(|f| format!("- {f}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Stored artefacts a variant may depend on.
#[derive(Debug, Clone, Copy, Default)]
pub struct VariantInputs<'a> {
    /// The ON sample with the same question and sample index.
    pub original_on: Option<&'a SampleRecord>,
    /// Facts that survived the standard filters for that ON sample.
    pub facts: Option<&'a FactsContext>,
    /// Facts that survived the conservative filter for that ON sample.
    pub conservative_facts: Option<&'a FactsContext>,
}

/// The request a variant resolves to before any backend call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantPlan {
    pub variant: VariantId,
    pub mode: ReasoningMode,
    pub prompt: String,
    pub trace_override: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VariantOutcome {
    Sample(SampleRecord),
    Skipped(String),
}

pub fn off_facts_prompt(prompts: &PromptSet, question: &str, context: &str) -> String {
    prompts.render(TemplateId::OffFacts, &[("question", question), ("context", context)])
}

fn original_trace_tokens(inputs: &VariantInputs<'_>) -> Result<u32, String> {
    let original = inputs
        .original_on
        .ok_or("no paired ON sample to match length against")?;
    match original.trace_text.as_deref() {
        Some(t) if !t.is_empty() => Ok(estimate_tokens(t)),
        _ => Err("paired ON sample has no trace".to_string()),
    }
}

fn required_facts<'a>(facts: Option<&'a FactsContext>, what: &str) -> Result<&'a FactsContext, String> {
    match facts {
        Some(f) if !f.is_empty() => Ok(f),
        Some(_) => Err(format!("{what} list is empty after filtering")),
        None => Err(format!("no {what} extracted for the paired ON sample")),
    }
}

/// Resolves a variant to its prompt and override. `Err` carries the reason
/// the variant cannot run for this input; nothing is fabricated.
pub fn plan_variant(
    variant: VariantId,
    question: &QuestionRecord,
    inputs: &VariantInputs<'_>,
    prompts: &PromptSet,
) -> Result<VariantPlan, String> {
    let q = question.question_text.as_str();
    let dummy = |target: u32, unit: &str| dummy_matching(target, unit).map_err(|e| e.to_string());
    let (prompt, trace_override) = match variant {
        VariantId::On | VariantId::Off => (q.to_string(), None),
        VariantId::OnSingleDummy => (q.to_string(), Some(DUMMY_UNIT.to_string())),
        VariantId::OnDummy => {
            let target = original_trace_tokens(inputs)?;
            (q.to_string(), Some(dummy(target, DUMMY_UNIT)?))
        }
        VariantId::OnDummyX(len) => (q.to_string(), Some(dummy(len, DUMMY_UNIT)?)),
        VariantId::OnFacts => {
            let facts = required_facts(inputs.facts, "facts")?;
            (q.to_string(), Some(facts.rendered_text.clone()))
        }
        VariantId::OnDummyFacts => {
            let facts = required_facts(inputs.facts, "facts")?;
            let target = estimate_tokens(&facts.rendered_text);
            (q.to_string(), Some(dummy(target, DUMMY_UNIT)?))
        }
        VariantId::OffFacts => {
            let facts = required_facts(inputs.facts, "facts")?;
            (off_facts_prompt(prompts, q, &facts.rendered_text), None)
        }
        VariantId::OffFactsConservative => {
            let facts = required_facts(inputs.conservative_facts, "conservatively filtered facts")?;
            (off_facts_prompt(prompts, q, &facts.rendered_text), None)
        }
        VariantId::OffDummyFacts => {
            let facts = required_facts(inputs.facts, "facts")?;
            let target = estimate_tokens(&facts.rendered_text);
            (off_facts_prompt(prompts, q, &dummy(target, NO_FACTS_UNIT)?), None)
        }
    };
    Ok(VariantPlan {
        variant,
        mode: variant.mode(),
        prompt,
        trace_override,
    })
}

/// Plans and runs one variant for one sample index.
pub fn run_variant(
    variant: VariantId,
    question: &QuestionRecord,
    inputs: &VariantInputs<'_>,
    client: &LlmClient,
    sample_index: u32,
) -> Result<VariantOutcome, InterventionError> {
    let plan = match plan_variant(variant, question, inputs, client.prompts()) {
        Ok(p) => p,
        Err(reason) => return Ok(VariantOutcome::Skipped(reason)),
    };
    let result = client.generate(plan.mode, &plan.prompt, plan.trace_override.as_deref(), sample_index)?;
    Ok(VariantOutcome::Sample(SampleRecord {
        question_id: question.id.clone(),
        variant,
        sample_index,
        trace_text: result.trace_text,
        answer_text: result.answer_text,
        trace_token_count: result.trace_token_count,
        answer_token_count: result.answer_token_count,
        token_counts_estimated: result.token_counts_estimated,
        grade: None,
        backend_profile_id: client.profile().profile_id.clone(),
    }))
}

/// Runs ON_DUMMY_X for every length and returns one pass@k curve per length.
/// `grade` labels each generated sample; samples it returns `None` for are
/// excluded from the counts. Every question must keep at least `n_samples`
/// graded samples.
pub fn dummy_scaling_sweep<G>(
    lengths: &[u32],
    questions: &[QuestionRecord],
    client: &LlmClient,
    n_samples: u32,
    grade: G,
) -> Result<BTreeMap<u32, PassCurve>, InterventionError>
where
    G: Fn(&QuestionRecord, &SampleRecord) -> Option<GradeLabel> + Sync,
{
    if lengths.contains(&0) {
        return Err(InterventionError::Domain("sweep lengths must be positive".into()));
    }
    let workers = client.profile().max_concurrent_requests;
    let mut out = BTreeMap::new();
    for &len in lengths {
        let jobs: Vec<(usize, u32)> = (0..questions.len())
            .flat_map(|q| (0..n_samples).map(move |i| (q, i)))
            .collect();
        let results = parallel_map(&jobs, workers, |&(q, i)| {
            let question = &questions[q];
            match run_variant(VariantId::OnDummyX(len), question, &VariantInputs::default(), client, i)? {
                VariantOutcome::Sample(s) => Ok::<_, InterventionError>(grade(question, &s)),
                VariantOutcome::Skipped(reason) => Err(InterventionError::Domain(reason)),
            }
        });
        let mut counts = vec![(0u64, 0u64); questions.len()];
        for ((q, _), r) in jobs.iter().zip(results) {
            if let Some(label) = r? {
                counts[*q].0 += 1;
                if label == GradeLabel::Correct {
                    counts[*q].1 += 1;
                }
            }
        }
        out.insert(len, pass_curve(&counts, n_samples as usize)?);
    }
    Ok(out)
}

/// Ω of each sweep length against the OFF curve, as `length,omega` lines.
pub fn omega_by_length(
    sweep: &BTreeMap<u32, PassCurve>,
    off: &PassCurve,
) -> Result<Vec<(u32, f64)>, InterventionError> {
    sweep
        .iter()
        .map(|(&len, curve)| Ok((len, omega(curve, off)?.omega)))
        .collect()
}

pub fn omega_table_delimited(rows: &[(u32, f64)]) -> String {
    let mut out = String::from("length,omega\n");
    for (len, w) in rows {
        out.push_str(&format!("{len},{w}\n"));
    }
    out
}
