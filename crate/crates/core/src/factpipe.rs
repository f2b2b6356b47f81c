//! Fact extraction and verification for reasoning traces.
//!
//! A trace goes through: extraction, removal of question restatements,
//! removal of answer-disclosing facts (gold answer, then predicted answer),
//! parsing into a list, and per-fact verification. A conservative branch
//! starts from the question-filtered block and drops every fact that
//! mentions either answer.
//!
//! Filter stages are trusted to delete items, never to add or rewrite them:
//! the block a stage returns is rebuilt from the input lines whose items the
//! model kept, so every stage output is an ordered subset of its input.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, CallKind, LlmClient, VerifyOutcome};
use crate::exec::parallel_map;
use crate::prompts::TemplateId;
use crate::types::{QuestionRecord, SampleRecord, TraceRef, Verdict};

pub const NONE_BLOCK: &str = "NONE";

#[derive(Debug, thiserror::Error)]
pub enum FactError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub survived_question_filter: bool,
    pub survived_answer_filter_gold: bool,
    pub survived_answer_filter_predicted: bool,
    pub removed_by_conservative: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub trace: TraceRef,
    pub fact_text: String,
    pub stage_flags: StageFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuditLabel {
    Clean,
    Hallucinated,
    ExcludedNoFacts,
    ExcludedUnverifiable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactAudit {
    pub trace: TraceRef,
    /// Verified facts first, in list order, then facts dropped by a filter.
    pub facts: Vec<FactRecord>,
    pub label: AuditLabel,
    /// The filtered block still contained facts (it may have failed to parse).
    pub has_facts: bool,
    #[serde(default)]
    pub parse_failed: bool,
}

impl FactAudit {
    pub fn verdicts(&self) -> Vec<Verdict> {
        self.facts.iter().filter_map(|f| f.verdict).collect()
    }
}

/// Output of every extraction and filtering stage for one trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactsEntry {
    pub trace: TraceRef,
    pub extracted: String,
    pub after_question: String,
    pub after_gold: String,
    pub after_predicted: String,
    pub conservative: String,
    /// Parsed standard list; empty when the block was NONE or failed to parse.
    pub facts: Vec<String>,
    #[serde(default)]
    pub parse_failed: bool,
    pub conservative_facts: Vec<String>,
    #[serde(default)]
    pub conservative_parse_failed: bool,
}

impl FactsEntry {
    pub fn has_facts(&self) -> bool {
        !is_none_block(&self.after_predicted)
    }
}

/// Clients per pipeline tier: the strong one handles extraction and
/// answer-disclosure filtering, the fast one everything else.
#[derive(Clone, Copy)]
pub struct StageClients<'a> {
    pub strong: &'a LlmClient,
    pub fast: &'a LlmClient,
}

impl<'a> StageClients<'a> {
    pub fn single(client: &'a LlmClient) -> Self {
        Self {
            strong: client,
            fast: client,
        }
    }
}

pub fn is_none_block(block: &str) -> bool {
    let t = block.trim().trim_matches('`').trim();
    t.is_empty() || t.trim_end_matches('.').eq_ignore_ascii_case(NONE_BLOCK)
}

/// Trims and collapses internal whitespace.
pub fn normalize_fact(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_marker(line: &str) -> &str {
    let t = line.trim();
    for marker in ["- ", "* ", "• "] {
        if let Some(rest) = t.strip_prefix(marker) {
            return rest.trim();
        }
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest.trim();
        }
    }
    t
}

/// Splits a facts block into items, one per non-empty line, without list markers.
pub fn split_block(block: &str) -> Vec<String> {
    if is_none_block(block) {
        return Vec::new();
    }
    block
        .lines()
        .map(strip_marker)
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .map(normalize_fact)
        .collect()
}

/// Input lines whose item appears in `output`, in input order and formatting.
fn restrict_to_input(input: &str, output: &str) -> String {
    let kept: HashSet<String> = split_block(output).into_iter().collect();
    let lines: Vec<&str> = input
        .lines()
        .filter(|l| {
            let item = normalize_fact(strip_marker(l));
            !item.is_empty() && kept.contains(&item)
        })
        .collect();
    if lines.is_empty() {
        NONE_BLOCK.to_string()
    } else {
        lines.join("\n")
    }
}

/// Sends the extraction prompt and returns the model output unmodified.
pub fn extract_facts(client: &LlmClient, trace_text: &str) -> Result<String, FactError> {
    if trace_text.trim().is_empty() {
        return Err(FactError::Precondition("trace is empty".into()));
    }
    let prompt = client
        .prompts()
        .render(TemplateId::ExtractFacts, &[("thinking_content", trace_text)]);
    Ok(client.complete_text(CallKind::Pipeline, &prompt, 0)?)
}

pub fn filter_question_restatements(
    client: &LlmClient,
    question: &str,
    block: &str,
) -> Result<String, FactError> {
    if is_none_block(block) {
        return Ok(NONE_BLOCK.to_string());
    }
    let prompt = client
        .prompts()
        .render(TemplateId::FilterQuestion, &[("question", question), ("summary", block)]);
    let out = client.complete_text(CallKind::Pipeline, &prompt, 0)?;
    Ok(restrict_to_input(block, &out))
}

pub fn filter_answer_disclosure(
    client: &LlmClient,
    question: &str,
    answer: &str,
    block: &str,
    conservative: bool,
) -> Result<String, FactError> {
    if is_none_block(block) {
        return Ok(NONE_BLOCK.to_string());
    }
    let prompt = if conservative {
        client.prompts().render(
            TemplateId::FilterAnswerConservative,
            &[("thinking_content", block), ("answer", answer)],
        )
    } else {
        client.prompts().render(
            TemplateId::FilterAnswer,
            &[("question", question), ("answer", answer), ("thinking_content", block)],
        )
    };
    let out = client.complete_text(CallKind::Pipeline, &prompt, 0)?;
    Ok(restrict_to_input(block, &out))
}

/// Pulls the JSON array out of a reply: the first fenced block if there is
/// one (closing fence optional), otherwise the outermost brackets.
fn extract_array(reply: &str) -> Option<Vec<String>> {
    let body = match reply.find("```") {
        Some(open) => {
            let after = &reply[open + 3..];
            let after = after.split_once('\n').map_or("", |(first, rest)| {
                if first.trim().chars().all(|c| c.is_ascii_alphanumeric()) {
                    rest
                } else {
                    after
                }
            });
            after.split("```").next().unwrap_or(after)
        }
        None => reply,
    };
    let start = body.find('[')?;
    let end = body.rfind(']')?;
    if end < start {
        return None;
    }
    serde_json::from_str::<Vec<String>>(&body[start..=end]).ok()
}

/// Parses a non-NONE facts block into an ordered list. Items that are not
/// sentences (empty or without whitespace) are dropped. Returns `None` when
/// neither the reply nor one reprompt contains a valid array.
pub fn parse_facts_list(
    client: &LlmClient,
    block: &str,
    attempt_base: u32,
) -> Result<Option<Vec<String>>, FactError> {
    if is_none_block(block) {
        return Err(FactError::Precondition(
            "parse_facts_list called on a NONE block".into(),
        ));
    }
    let prompt = client.prompts().render(TemplateId::ParseFacts, &[("facts", block)]);
    for attempt in 0..2 {
        let reply = client.complete_text(CallKind::Pipeline, &prompt, attempt_base + attempt)?;
        if let Some(items) = extract_array(&reply) {
            return Ok(Some(
                items
                    .into_iter()
                    .map(|s| s.trim().to_string())
                    .filter(|s| s.contains(char::is_whitespace))
                    .collect(),
            ));
        }
        tracing::warn!(attempt, "unparseable facts array");
    }
    Ok(None)
}

/// Verifies each fact in its own call. Facts that normalize to the same text
/// share one call; across traces the response cache plays the same role.
pub fn verify_facts(client: &LlmClient, facts: &[String]) -> Result<Vec<VerifyOutcome>, FactError> {
    let mut unique: Vec<String> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    let positions: Vec<usize> = facts
        .iter()
        .map(|f| {
            let n = normalize_fact(f);
            *slot.entry(n.clone()).or_insert_with(|| {
                unique.push(n);
                unique.len() - 1
            })
        })
        .collect();
    let workers = client.profile().max_concurrent_requests;
    let outcomes = parallel_map(&unique, workers, |f| client.verify_with_search(f))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(positions.into_iter().map(|i| outcomes[i]).collect())
}

/// Label from a trace's verdicts. Abstentions take precedence over
/// incorrect verdicts.
pub fn audit_label(verdicts: &[Verdict], had_facts: bool) -> AuditLabel {
    if !had_facts || verdicts.is_empty() {
        AuditLabel::ExcludedNoFacts
    } else if verdicts
        .iter()
        .any(|v| matches!(v, Verdict::Unknown | Verdict::Illegal))
    {
        AuditLabel::ExcludedUnverifiable
    } else if verdicts.contains(&Verdict::Incorrect) {
        AuditLabel::Hallucinated
    } else {
        AuditLabel::Clean
    }
}

/// Builds an audit whose label follows from the verdicts on `facts`.
pub fn audit_trace(trace: TraceRef, facts: Vec<FactRecord>, had_facts: bool) -> FactAudit {
    let verdicts: Vec<Verdict> = facts.iter().filter_map(|f| f.verdict).collect();
    FactAudit {
        label: audit_label(&verdicts, had_facts),
        trace,
        facts,
        has_facts: had_facts,
        parse_failed: false,
    }
}

/// Runs extraction and all filters for one ON sample.
pub fn extract_and_filter(
    clients: StageClients<'_>,
    question: &QuestionRecord,
    sample: &SampleRecord,
) -> Result<FactsEntry, FactError> {
    let trace = sample
        .trace_text
        .as_deref()
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| FactError::Precondition(format!("{} has no trace", sample.trace_ref())))?;
    let q = question.question_text.as_str();
    let gold = question.gold_answer.as_str();
    let predicted = sample.answer_text.as_str();

    let extracted = extract_facts(clients.strong, trace)?;
    let after_question = filter_question_restatements(clients.fast, q, &extracted)?;
    let after_gold = filter_answer_disclosure(clients.strong, q, gold, &after_question, false)?;
    let after_predicted = filter_answer_disclosure(clients.strong, q, predicted, &after_gold, false)?;
    let conservative_gold = filter_answer_disclosure(clients.strong, q, gold, &after_question, true)?;
    let conservative = filter_answer_disclosure(clients.strong, q, predicted, &conservative_gold, true)?;

    let parse = |block: &str| -> Result<(Vec<String>, bool), FactError> {
        if is_none_block(block) {
            return Ok((Vec::new(), false));
        }
        Ok(match parse_facts_list(clients.fast, block, 0)? {
            Some(list) => (list, false),
            None => (Vec::new(), true),
        })
    };
    let (facts, parse_failed) = parse(&after_predicted)?;
    let (conservative_facts, conservative_parse_failed) = parse(&conservative)?;

    Ok(FactsEntry {
        trace: sample.trace_ref(),
        extracted,
        after_question,
        after_gold,
        after_predicted,
        conservative,
        facts,
        parse_failed,
        conservative_facts,
        conservative_parse_failed,
    })
}

fn dropped_facts(entry: &FactsEntry) -> Vec<FactRecord> {
    let conservative: HashSet<String> = split_block(&entry.conservative).into_iter().collect();
    let stages = [
        split_block(&entry.extracted),
        split_block(&entry.after_question),
        split_block(&entry.after_gold),
        split_block(&entry.after_predicted),
    ];
    let mut out = Vec::new();
    for depth in 0..3 {
        let next: HashSet<&String> = stages[depth + 1].iter().collect();
        for item in &stages[depth] {
            if next.contains(item) || !item.contains(' ') {
                continue;
            }
            out.push(FactRecord {
                trace: entry.trace.clone(),
                fact_text: item.clone(),
                stage_flags: StageFlags {
                    survived_question_filter: depth >= 1,
                    survived_answer_filter_gold: depth >= 2,
                    survived_answer_filter_predicted: false,
                    removed_by_conservative: !conservative.contains(item),
                },
                verdict: None,
            });
        }
    }
    out
}

/// Verifies the parsed facts of one entry and labels the trace.
pub fn verify_entry(client: &LlmClient, entry: &FactsEntry) -> Result<FactAudit, FactError> {
    let had_facts = entry.has_facts();
    if entry.parse_failed {
        return Ok(FactAudit {
            trace: entry.trace.clone(),
            facts: dropped_facts(entry),
            label: AuditLabel::ExcludedUnverifiable,
            has_facts: had_facts,
            parse_failed: true,
        });
    }
    let outcomes = verify_facts(client, &entry.facts)?;
    let conservative: HashSet<String> = entry.conservative_facts.iter().map(|f| normalize_fact(f)).collect();
    let mut facts: Vec<FactRecord> = entry
        .facts
        .iter()
        .zip(&outcomes)
        .map(|(f, o)| FactRecord {
            trace: entry.trace.clone(),
            fact_text: f.clone(),
            stage_flags: StageFlags {
                survived_question_filter: true,
                survived_answer_filter_gold: true,
                survived_answer_filter_predicted: true,
                removed_by_conservative: !conservative.contains(&normalize_fact(f)),
            },
            verdict: Some(o.verdict),
        })
        .collect();
    facts.extend(dropped_facts(entry));
    let mut audit = audit_trace(entry.trace.clone(), facts, had_facts);
    audit.parse_failed = outcomes.iter().any(|o| o.parse_failed);
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockBackend, MockRule, MockScript, MockReply};
    use crate::backends::{BackendProfile, ChatResponse};
    use crate::cache::ResponseCache;
    use crate::types::VariantId;
    use std::sync::Arc;

    fn client_fn<F>(f: F) -> (LlmClient, Arc<MockBackend>)
    where
        F: Fn(&crate::backends::ChatRequest) -> Result<ChatResponse, crate::backends::TransportError>
            + Send
            + Sync
            + 'static,
    {
        let mock = Arc::new(MockBackend::from_fn(f));
        (
            LlmClient::new(BackendProfile::mock("m"), mock.clone(), Arc::new(ResponseCache::in_memory())),
            mock,
        )
    }

    fn trace_ref() -> TraceRef {
        TraceRef {
            question_id: "q1".into(),
            variant: VariantId::On,
            sample_index: 0,
        }
    }

    #[test]
    fn extraction_is_passthrough() {
        let (c, _) = client_fn(|_| Ok(ChatResponse::text("- Fact one is here.\n- Fact two is here.")));
        assert_eq!(
            extract_facts(&c, "some trace").unwrap(),
            "- Fact one is here.\n- Fact two is here."
        );
        let (c, _) = client_fn(|_| Ok(ChatResponse::text("NONE")));
        assert_eq!(extract_facts(&c, "The question asks about a king.").unwrap(), "NONE");
        assert!(extract_facts(&c, "  ").is_err());
    }

    #[test]
    fn extraction_prompt_is_the_template() {
        let (c, _) = client_fn(|req| {
            assert!(req.prompt.contains("Thinking content: my trace\n"));
            assert!(req.prompt.starts_with("I will give you the content of a thinking process."));
            Ok(ChatResponse::text("NONE"))
        });
        extract_facts(&c, "my trace").unwrap();
    }

    #[test]
    fn none_short_circuits() {
        let (c, mock) = client_fn(|_| Ok(ChatResponse::text("x y")));
        assert_eq!(filter_question_restatements(&c, "q", "NONE").unwrap(), "NONE");
        assert_eq!(filter_answer_disclosure(&c, "q", "a", "NONE", false).unwrap(), "NONE");
        assert_eq!(filter_answer_disclosure(&c, "q", "a", " none\n", true).unwrap(), "NONE");
        assert!(matches!(parse_facts_list(&c, "NONE", 0), Err(FactError::Precondition(_))));
        assert!(verify_facts(&c, &[]).unwrap().is_empty());
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn question_filter_keeps_original_format() {
        let block = "* The tenth king was crowned.\n* Bhumibol was crowned in 1950.";
        let (c, _) = client_fn(|_| Ok(ChatResponse::text("- Bhumibol was crowned in 1950.")));
        assert_eq!(
            filter_question_restatements(&c, "Who is the tenth king?", block).unwrap(),
            "* Bhumibol was crowned in 1950."
        );
        let (c, _) = client_fn(|_| Ok(ChatResponse::text("NONE")));
        assert_eq!(filter_question_restatements(&c, "q", block).unwrap(), "NONE");
    }

    #[test]
    fn filters_cannot_add_or_reorder() {
        let block = "- A fact one.\n- A fact two.\n- A fact three.";
        let (c, _) = client_fn(|_| {
            Ok(ChatResponse::text("- A fact three.\n- An invented fact.\n- A fact one."))
        });
        let out = filter_answer_disclosure(&c, "q", "a", block, false).unwrap();
        assert_eq!(out, "- A fact one.\n- A fact three.");
    }

    #[test]
    fn standard_keeps_mention_conservative_removes_it() {
        let fact = "- B was crowned in 1975.";
        let script = MockScript {
            rules: vec![
                MockRule {
                    contains: vec!["Identify and remove ONLY".into()],
                    replies: vec![MockReply { trace: None, answer: fact.into() }],
                    ..Default::default()
                },
                MockRule {
                    contains: vec!["Filter-out facts".into()],
                    replies: vec![MockReply { trace: None, answer: "NONE".into() }],
                    ..Default::default()
                },
            ],
            default: vec![],
        };
        let mock = Arc::new(MockBackend::from_script(script));
        let c = LlmClient::new(BackendProfile::mock("m"), mock, Arc::new(ResponseCache::in_memory()));
        let q = "Who is the 10th king?";
        assert_eq!(filter_answer_disclosure(&c, q, "B", fact, false).unwrap(), fact);
        assert_eq!(filter_answer_disclosure(&c, q, "B", fact, true).unwrap(), "NONE");
    }

    #[test]
    fn array_extraction() {
        assert_eq!(
            extract_array("```json\n[\"A b.\", \"C d.\"]\n```\nHope this helps! [1]").unwrap(),
            vec!["A b.", "C d."]
        );
        assert_eq!(extract_array("[\"x y\"]").unwrap(), vec!["x y"]);
        assert_eq!(extract_array("```\n[\"x y\"]").unwrap(), vec!["x y"]);
        assert!(extract_array("no array").is_none());
        assert!(extract_array("[1, 2]").is_none());
    }

    #[test]
    fn parse_two_bullets() {
        let (c, _) = client_fn(|_| Ok(ChatResponse::text("```json\n[\n  \"Fact one is here.\",\n  \"Fact two is here.\"\n]\n```")));
        let out = parse_facts_list(&c, "- Fact one is here.\n- Fact two is here.", 0).unwrap();
        assert_eq!(out.unwrap(), vec!["Fact one is here.", "Fact two is here."]);
    }

    #[test]
    fn parse_retries_once_then_fails() {
        let (c, mock) = client_fn(|req| {
            Ok(ChatResponse::text(if req.sample_index == 0 { "garbage" } else { "[\"Now it parses.\"]" }))
        });
        assert_eq!(parse_facts_list(&c, "- x y", 0).unwrap().unwrap(), vec!["Now it parses."]);
        assert_eq!(mock.calls(), 2);
        let (c, mock) = client_fn(|_| Ok(ChatResponse::text("garbage")));
        assert_eq!(parse_facts_list(&c, "- x y", 0).unwrap(), None);
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn verification_aligned_and_deduplicated() {
        let (c, mock) = client_fn(|req| {
            Ok(ChatResponse::text(if req.prompt.contains("Fact: F1 holds") { "correct" } else { "incorrect" }))
        });
        let out = verify_facts(&c, &["F1 holds".into(), "F2 holds".into(), " F1   holds ".into()]).unwrap();
        let v: Vec<Verdict> = out.iter().map(|o| o.verdict).collect();
        assert_eq!(v, vec![Verdict::Correct, Verdict::Incorrect, Verdict::Correct]);
        assert_eq!(mock.calls(), 2);
        verify_facts(&c, &["F1 holds".into()]).unwrap();
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn label_table() {
        use Verdict::*;
        assert_eq!(audit_label(&[Correct, Correct], true), AuditLabel::Clean);
        assert_eq!(audit_label(&[Correct, Incorrect], true), AuditLabel::Hallucinated);
        assert_eq!(audit_label(&[Correct, Unknown], true), AuditLabel::ExcludedUnverifiable);
        assert_eq!(audit_label(&[Incorrect, Illegal], true), AuditLabel::ExcludedUnverifiable);
        assert_eq!(audit_label(&[], true), AuditLabel::ExcludedNoFacts);
        assert_eq!(audit_label(&[Correct], false), AuditLabel::ExcludedNoFacts);
    }

    fn scripted_pipeline() -> LlmClient {
        let reply = |contains: &str, answer: &str| MockRule {
            contains: vec![contains.into()],
            replies: vec![MockReply { trace: None, answer: answer.into() }],
            ..Default::default()
        };
        let script = MockScript {
            rules: vec![
                reply("Check the correctness", "correct"),
                reply(
                    "extract only the concrete",
                    "- Ada asked who Ada married.\n- Ada Lovelace was born in 1815.\n- Ada Lovelace married William King.\n- William King became an earl in 1838.",
                ),
                reply(
                    "filters redundant information",
                    "- Ada Lovelace was born in 1815.\n- Ada Lovelace married William King.\n- William King became an earl in 1838.",
                ),
                reply(
                    "Target Answer: \"William King\"",
                    "- Ada Lovelace was born in 1815.\n- William King became an earl in 1838.",
                ),
                reply(
                    "Target Answer: \"Lord Byron\"",
                    "- Ada Lovelace was born in 1815.\n- William King became an earl in 1838.",
                ),
                reply("Filter-out facts", "- Ada Lovelace was born in 1815."),
                reply(
                    "- Ada Lovelace was born in 1815.\n- William King",
                    "```json\n[\"Ada Lovelace was born in 1815.\", \"William King became an earl in 1838.\"]\n```",
                ),
                reply("Facts:\n- Ada Lovelace was born in 1815.", "[\"Ada Lovelace was born in 1815.\"]"),
            ],
            default: vec![],
        };
        LlmClient::new(
            BackendProfile::mock("m"),
            Arc::new(MockBackend::from_script(script)),
            Arc::new(ResponseCache::in_memory()),
        )
    }

    fn sample() -> SampleRecord {
        SampleRecord {
            question_id: "q1".into(),
            variant: VariantId::On,
            sample_index: 0,
            trace_text: Some("thinking about Ada".into()),
            answer_text: "Lord Byron".into(),
            trace_token_count: None,
            answer_token_count: 2,
            token_counts_estimated: true,
            grade: None,
            backend_profile_id: "m".into(),
        }
    }

    #[test]
    fn full_pipeline_monotone_and_ordered() {
        let c = scripted_pipeline();
        let q = QuestionRecord::entity("q1", "P26", "Who is Ada Lovelace married to?", "William King");
        let entry = extract_and_filter(StageClients::single(&c), &q, &sample()).unwrap();
        let stages = [
            &entry.extracted,
            &entry.after_question,
            &entry.after_gold,
            &entry.after_predicted,
        ];
        for pair in stages.windows(2) {
            let (a, b) = (split_block(pair[0]), split_block(pair[1]));
            let mut it = a.iter();
            for item in &b {
                assert!(it.any(|x| x == item), "{item} not an ordered subset");
            }
        }
        let after_q = split_block(&entry.after_question);
        let cons = split_block(&entry.conservative);
        assert!(cons.iter().all(|f| after_q.contains(f)));
        assert_eq!(entry.facts, vec!["Ada Lovelace was born in 1815.", "William King became an earl in 1838."]);
        assert_eq!(entry.conservative_facts, vec!["Ada Lovelace was born in 1815."]);

        let audit = verify_entry(&c, &entry).unwrap();
        assert_eq!(audit.label, AuditLabel::Clean);
        assert!(audit.has_facts);
        assert_eq!(audit.verdicts().len(), 2);
        let dropped: Vec<_> = audit.facts.iter().filter(|f| f.verdict.is_none()).collect();
        assert_eq!(dropped.len(), 2);
        assert!(!dropped[0].stage_flags.survived_question_filter);
        assert!(dropped[1].stage_flags.survived_question_filter);
        assert!(!dropped[1].stage_flags.survived_answer_filter_gold);
        assert!(audit.facts[1].stage_flags.removed_by_conservative);
        assert!(!audit.facts[0].stage_flags.removed_by_conservative);

        let again = extract_and_filter(StageClients::single(&c), &q, &sample()).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&entry).unwrap());
    }

    #[test]
    fn parse_failure_excludes_trace() {
        let (c, _) = client_fn(|req| {
            Ok(ChatResponse::text(if req.prompt.contains("JSON array") { "oops" } else { "- A fact here." }))
        });
        let q = QuestionRecord::entity("q1", "P26", "Q?", "A");
        let entry = extract_and_filter(StageClients::single(&c), &q, &sample()).unwrap();
        assert!(entry.parse_failed);
        let audit = verify_entry(&c, &entry).unwrap();
        assert_eq!(audit.label, AuditLabel::ExcludedUnverifiable);
        assert!(audit.parse_failed && audit.has_facts);
    }

    #[test]
    fn no_facts_trace() {
        let (c, mock) = client_fn(|_| Ok(ChatResponse::text("NONE")));
        let q = QuestionRecord::entity("q1", "P26", "Q?", "A");
        let entry = extract_and_filter(StageClients::single(&c), &q, &sample()).unwrap();
        assert_eq!(mock.calls(), 1);
        let audit = verify_entry(&c, &entry).unwrap();
        assert_eq!(audit.label, AuditLabel::ExcludedNoFacts);
        assert!(!audit.has_facts);
        assert_eq!(audit.trace, trace_ref());
    }
}
