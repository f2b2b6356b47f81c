//! Statistics over graded and audited samples.

mod plot;
mod selection;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::estimators::{bootstrap_ci, omega, pass_curve, EstimatorError, OmegaResult};
use crate::factpipe::{AuditLabel, FactAudit};
use crate::types::{GradeLabel, QuestionRecord, SampleRecord, TraceRef};

pub use plot::scatter_svg;
pub use selection::{
    format_percent, format_relative, selection_simulation, SelectionReport, StrategyResult,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("regression needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("singular fit: every clean rate is {0}")]
    Singular(f64),
    #[error("no questions retained: every question has an empty subset")]
    NoQuestions,
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// One graded ON sample joined with its audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditedSample {
    pub trace: TraceRef,
    pub label: AuditLabel,
    pub has_facts: bool,
    pub grade: GradeLabel,
}

impl AuditedSample {
    pub fn correct(&self) -> bool {
        self.grade == GradeLabel::Correct
    }
}

/// Joins graded samples with their audits. Samples lacking either are left out.
pub fn join_audits(samples: &[SampleRecord], audits: &[FactAudit]) -> Vec<AuditedSample> {
    let by_trace: BTreeMap<&TraceRef, &FactAudit> = audits.iter().map(|a| (&a.trace, a)).collect();
    samples
        .iter()
        .filter_map(|s| {
            let trace = s.trace_ref();
            let audit = by_trace.get(&trace)?;
            Some(AuditedSample {
                label: audit.label,
                has_facts: audit.has_facts,
                grade: s.grade?,
                trace,
            })
        })
        .collect()
}

/// Per-question `(n, c)` from graded samples; ungraded samples do not count.
/// Not-attempted answers count towards `n` but never towards `c`.
pub fn question_counts<'a>(samples: impl IntoIterator<Item = &'a SampleRecord>) -> BTreeMap<String, (u64, u64)> {
    let mut out: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for s in samples {
        if let Some(g) = s.grade {
            let e = out.entry(s.question_id.clone()).or_default();
            e.0 += 1;
            if g == GradeLabel::Correct {
                e.1 += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateCount {
    pub correct: u64,
    pub total: u64,
}

impl RateCount {
    /// `None` marks an empty class; it is never reported as zero.
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += u64::from(correct);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PooledRates {
    pub clean: RateCount,
    pub hallucinated: RateCount,
}

pub fn pooled_rates(samples: &[AuditedSample]) -> PooledRates {
    let mut out = PooledRates::default();
    for s in samples {
        match s.label {
            AuditLabel::Clean => out.clean.add(s.correct()),
            AuditLabel::Hallucinated => out.hallucinated.add(s.correct()),
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WithinQuestionPoint {
    pub question_id: String,
    pub clean_rate: f64,
    pub hallucinated_rate: f64,
    pub n_clean: u64,
    pub n_hallucinated: u64,
}

pub const DEFAULT_MIN_PER_SUBSET: u64 = 10;

/// Per-question clean and hallucinated correct rates. A question is kept when
/// both subsets have at least `min_per_subset` traces and the two rates are
/// not both 0 or both 1.
pub fn within_question_points(samples: &[AuditedSample], min_per_subset: u64) -> Vec<WithinQuestionPoint> {
    let mut by_q: BTreeMap<&str, PooledRates> = BTreeMap::new();
    for s in samples {
        let e = by_q.entry(s.trace.question_id.as_str()).or_default();
        match s.label {
            AuditLabel::Clean => e.clean.add(s.correct()),
            AuditLabel::Hallucinated => e.hallucinated.add(s.correct()),
            _ => {}
        }
    }
    by_q.into_iter()
        .filter_map(|(q, r)| {
            if r.clean.total < min_per_subset || r.hallucinated.total < min_per_subset {
                return None;
            }
            let (c, h) = (r.clean.rate()?, r.hallucinated.rate()?);
            let degenerate = (r.clean.correct == 0 && r.hallucinated.correct == 0)
                || (r.clean.correct == r.clean.total && r.hallucinated.correct == r.hallucinated.total);
            (!degenerate).then(|| WithinQuestionPoint {
                question_id: q.to_string(),
                clean_rate: c,
                hallucinated_rate: h,
                n_clean: r.clean.total,
                n_hallucinated: r.hallucinated.total,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares of hallucinated rate on clean rate, with intercept.
pub fn regression_slope(points: &[WithinQuestionPoint]) -> Result<LinearFit, AnalysisError> {
    if points.len() < 2 {
        return Err(AnalysisError::TooFewPoints(points.len()));
    }
    let x0 = points[0].clean_rate;
    if points.iter().all(|p| p.clean_rate == x0) {
        return Err(AnalysisError::Singular(x0));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.clean_rate).sum::<f64>() / n;
    let my = points.iter().map(|p| p.hallucinated_rate).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in points {
        let dx = p.clean_rate - mx;
        sxx += dx * dx;
        sxy += dx * (p.hallucinated_rate - my);
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySplit {
    /// Absent when the subset has no question with both ON and OFF counts.
    pub simple: Option<OmegaResult>,
    pub complex: Option<OmegaResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSettings {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// `(n, c)` pairs for ON, the same for OFF, and the shared n.
pub type PairedCounts = (Vec<(u64, u64)>, Vec<(u64, u64)>, usize);

/// Paired ON/OFF counts for the questions present in both maps, with n
/// truncated to the smallest sample count among them.
pub fn paired_counts(
    ids: impl IntoIterator<Item = String>,
    on: &BTreeMap<String, (u64, u64)>,
    off: &BTreeMap<String, (u64, u64)>,
) -> PairedCounts {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for id in ids {
        if let (Some(&x), Some(&y)) = (on.get(&id), off.get(&id)) {
            if x.0 > 0 && y.0 > 0 {
                a.push(x);
                b.push(y);
            }
        }
    }
    let n_max = a.iter().chain(&b).map(|p| p.0).min().unwrap_or(0) as usize;
    (a, b, n_max)
}

/// Ω with a bootstrap interval for paired per-question counts.
pub fn omega_with_ci(
    on: &[(u64, u64)],
    off: &[(u64, u64)],
    n_max: usize,
    boot: &BootstrapSettings,
) -> Result<OmegaResult, EstimatorError> {
    let mut r = omega(&pass_curve(on, n_max)?, &pass_curve(off, n_max)?)?;
    let (lo, hi) = bootstrap_ci(on, off, n_max, boot.resamples, boot.level, boot.seed)?;
    r.ci_low = Some(lo);
    r.ci_high = Some(hi);
    Ok(r)
}

/// Ω and its interval separately for Simple and Complex questions.
pub fn complexity_split_omega(
    questions: &[QuestionRecord],
    on: &BTreeMap<String, (u64, u64)>,
    off: &BTreeMap<String, (u64, u64)>,
    boot: &BootstrapSettings,
) -> Result<ComplexitySplit, AnalysisError> {
    let subset = |complex: bool| -> Result<Option<OmegaResult>, AnalysisError> {
        let ids = questions
            .iter()
            .filter(|q| q.is_complex() == complex)
            .map(|q| q.id.clone());
        let (a, b, n_max) = paired_counts(ids, on, off);
        if a.is_empty() {
            return Ok(None);
        }
        Ok(Some(omega_with_ci(&a, &b, n_max, boot)?))
    };
    Ok(ComplexitySplit {
        simple: subset(false)?,
        complex: subset(true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::VariantId;

    fn s(q: &str, i: u32, label: AuditLabel, correct: bool) -> AuditedSample {
        AuditedSample {
            trace: TraceRef {
                question_id: q.into(),
                variant: VariantId::On,
                sample_index: i,
            },
            label,
            has_facts: label != AuditLabel::ExcludedNoFacts,
            grade: if correct { GradeLabel::Correct } else { GradeLabel::Incorrect },
        }
    }

    fn subset(q: &str, start: u32, label: AuditLabel, n: u32, correct: u32) -> Vec<AuditedSample> {
        (0..n).map(|i| s(q, start + i, label, i < correct)).collect()
    }

    #[test]
    fn pooled_examples() {
        let data = vec![
            s("a", 0, AuditLabel::Clean, true),
            s("a", 1, AuditLabel::Clean, false),
            s("a", 2, AuditLabel::Hallucinated, false),
            s("b", 0, AuditLabel::Hallucinated, false),
            s("b", 1, AuditLabel::ExcludedUnverifiable, true),
        ];
        let r = pooled_rates(&data);
        assert_eq!(r.clean.rate(), Some(0.5));
        assert_eq!(r.hallucinated.rate(), Some(0.0));
        let excluded = vec![s("a", 0, AuditLabel::ExcludedNoFacts, true)];
        let r = pooled_rates(&excluded);
        assert_eq!((r.clean.rate(), r.hallucinated.rate()), (None, None));
    }

    #[test]
    fn within_question_filters() {
        let mut data = Vec::new();
        data.extend(subset("keep", 0, AuditLabel::Clean, 10, 6));
        data.extend(subset("keep", 100, AuditLabel::Hallucinated, 10, 3));
        data.extend(subset("few", 0, AuditLabel::Clean, 12, 6));
        data.extend(subset("few", 100, AuditLabel::Hallucinated, 9, 3));
        data.extend(subset("easy", 0, AuditLabel::Clean, 10, 10));
        data.extend(subset("easy", 100, AuditLabel::Hallucinated, 11, 11));
        data.extend(subset("hard", 0, AuditLabel::Clean, 10, 0));
        data.extend(subset("hard", 100, AuditLabel::Hallucinated, 10, 0));
        let pts = within_question_points(&data, DEFAULT_MIN_PER_SUBSET);
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].question_id, "keep");
        assert_eq!((pts[0].clean_rate, pts[0].hallucinated_rate), (0.6, 0.3));
        let pooled = pooled_rates(&data);
        let sum_clean: u64 = pts.iter().map(|p| p.n_clean).sum();
        assert!(sum_clean <= pooled.clean.total);
    }

    fn pt(x: f64, y: f64) -> WithinQuestionPoint {
        WithinQuestionPoint {
            question_id: String::new(),
            clean_rate: x,
            hallucinated_rate: y,
            n_clean: 10,
            n_hallucinated: 10,
        }
    }

    #[test]
    fn regression_examples() {
        let f = regression_slope(&[pt(0.1, 0.1), pt(0.5, 0.5), pt(0.9, 0.9)]).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.intercept.abs() < 1e-12);
        let f = regression_slope(&[pt(0.2, 0.1), pt(0.6, 0.3), pt(1.0, 0.5)]).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12);
        assert_eq!(regression_slope(&[pt(0.3, 0.1), pt(0.3, 0.2)]), Err(AnalysisError::Singular(0.3)));
        assert_eq!(regression_slope(&[pt(0.3, 0.1)]), Err(AnalysisError::TooFewPoints(1)));
    }

    #[test]
    fn complexity_split() {
        let simple = QuestionRecord::simpleqa("s", "q", "a", Some(false), Some(false), None);
        let complex = QuestionRecord::simpleqa("c", "q", "a", Some(true), Some(false), None);
        let on: BTreeMap<String, (u64, u64)> = [("s".into(), (4, 2)), ("c".into(), (4, 2))].into();
        let off = on.clone();
        let out = complexity_split_omega(&[simple.clone(), complex], &on, &off, &BootstrapSettings::default()).unwrap();
        assert_eq!(out.simple.unwrap().omega, 0.0);
        assert_eq!(out.complex.unwrap().omega, 0.0);
        let out = complexity_split_omega(&[simple], &on, &off, &BootstrapSettings::default()).unwrap();
        assert!(out.complex.is_none());
    }

    #[test]
    fn two_subset_hand_values() {
        // Simple: ON c=2 of 2, OFF c=1 of 2 → ON [1, 1], OFF [0.5, 1]
        //   Ω = (1·1 + 2·0) / 3 = 1/3.
        // Complex: ON c=1 of 2, OFF c=1 of 2 → Ω = 0.
        let q = |id: &str, c: bool| QuestionRecord::simpleqa(id, "q", "a", Some(c), None, None);
        let on: BTreeMap<String, (u64, u64)> = [("s".into(), (2, 2)), ("c".into(), (2, 1))].into();
        let off: BTreeMap<String, (u64, u64)> = [("s".into(), (2, 1)), ("c".into(), (2, 1))].into();
        let out = complexity_split_omega(&[q("s", false), q("c", true)], &on, &off, &BootstrapSettings::default()).unwrap();
        assert!((out.simple.unwrap().omega - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(out.complex.unwrap().omega, 0.0);
    }

    #[test]
    fn counts_from_samples() {
        let mk = |q: &str, i, g| SampleRecord {
            question_id: q.into(),
            variant: VariantId::On,
            sample_index: i,
            trace_text: None,
            answer_text: String::new(),
            trace_token_count: None,
            answer_token_count: 0,
            token_counts_estimated: true,
            grade: g,
            backend_profile_id: "m".into(),
        };
        let samples = vec![
            mk("a", 0, Some(GradeLabel::Correct)),
            mk("a", 1, Some(GradeLabel::NotAttempted)),
            mk("a", 2, None),
            mk("b", 0, Some(GradeLabel::Incorrect)),
        ];
        let c = question_counts(&samples);
        assert_eq!(c["a"], (2, 1));
        assert_eq!(c["b"], (1, 0));
    }
}
