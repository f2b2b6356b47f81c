use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, AuditedSample};
use crate::factpipe::AuditLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    /// Mean over retained questions of the correct fraction in the subset.
    pub accuracy: f64,
    /// `(accuracy - regular) / regular`; absent when regular accuracy is 0.
    pub relative_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub regular: StrategyResult,
    pub only_facts: StrategyResult,
    pub only_correct_facts: StrategyResult,
    pub n_questions_used: usize,
    pub n_questions_dropped: usize,
    pub dropped_questions: Vec<String>,
}

impl SelectionReport {
    /// Percentages to one decimal, with signed relative improvements.
    pub fn to_table(&self) -> String {
        let row = |name: &str, r: &StrategyResult| match r.relative_improvement {
            Some(rel) if name != "Regular" => {
                format!("{name},{} ({})\n", format_percent(r.accuracy), format_relative(rel))
            }
            _ => format!("{name},{}\n", format_percent(r.accuracy)),
        };
        let mut out = String::from("strategy,accuracy\n");
        out.push_str(&row("Regular", &self.regular));
        out.push_str(&row("OnlyFacts", &self.only_facts));
        out.push_str(&row("OnlyCorrectFacts", &self.only_correct_facts));
        out.push_str(&format!(
            "# questions used {}, dropped {}\n",
            self.n_questions_used, self.n_questions_dropped
        ));
        out
    }
}

/// Fraction rendered as a percentage with one decimal, e.g. `0.279` → `27.9`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// Relative change rendered with an explicit sign, e.g. `0.1219` → `+12.2%`.
pub fn format_relative(rel: f64) -> String {
    format!("{:+.1}%", rel * 100.0)
}

fn fraction(items: &[&AuditedSample]) -> f64 {
    items.iter().filter(|s| s.correct()).count() as f64 / items.len() as f64
}

/// Expected accuracy when answering from all samples, from samples whose
/// trace recalls facts, and from samples whose facts all verified. A question
/// with any empty subset is dropped from all three.
pub fn selection_simulation(samples: &[AuditedSample]) -> Result<SelectionReport, AnalysisError> {
    let mut by_q: BTreeMap<&str, Vec<&AuditedSample>> = BTreeMap::new();
    for s in samples {
        by_q.entry(s.trace.question_id.as_str()).or_default().push(s);
    }
    let mut sums = [0.0f64; 3];
    let mut used = 0usize;
    let mut dropped = Vec::new();
    for (q, all) in by_q {
        let facts: Vec<&AuditedSample> = all
            .iter()
            .copied()
            .filter(|s| s.has_facts && s.label != AuditLabel::ExcludedNoFacts)
            .collect();
        let clean: Vec<&AuditedSample> = facts
            .iter()
            .copied()
            .filter(|s| s.label == AuditLabel::Clean)
            .collect();
        if facts.is_empty() || clean.is_empty() {
            dropped.push(q.to_string());
            continue;
        }
        used += 1;
        sums[0] += fraction(&all);
        sums[1] += fraction(&facts);
        sums[2] += fraction(&clean);
    }
    if used == 0 {
        return Err(AnalysisError::NoQuestions);
    }
    let acc = sums.map(|s| s / used as f64);
    let result = |a: f64| StrategyResult {
        accuracy: a,
        relative_improvement: (acc[0] > 0.0).then(|| (a - acc[0]) / acc[0]),
    };
    Ok(SelectionReport {
        regular: result(acc[0]),
        only_facts: result(acc[1]),
        only_correct_facts: result(acc[2]),
        n_questions_used: used,
        n_questions_dropped: dropped.len(),
        dropped_questions: dropped,
    })
}
