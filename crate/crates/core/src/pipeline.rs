//! Run orchestration: each command reads what earlier commands stored,
//! performs only the missing work, and records the result in the run store.
//!
//! Commands are idempotent. Work already in the store is never redone, and
//! every backend response is cached in `cache.jsonl`, so a run interrupted at
//! any point resumes with exactly the calls that had not yet succeeded.
//! Analysis commands (`estimate`, `analyze`, `select`, `report`, `replay`)
//! never contact a backend.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    complexity_split_omega, join_audits, omega_with_ci, paired_counts, pooled_rates,
    question_counts, regression_slope, scatter_svg, selection_simulation, within_question_points,
    AuditedSample, ComplexitySplit, LinearFit, PooledRates, SelectionReport, WithinQuestionPoint,
};
use crate::backends::http::HttpBackend;
use crate::backends::mock::{MockBackend, MockScript};
use crate::backends::{BackendProfile, CallKind, ChatBackend, Endpoint, LlmClient, OfflineBackend};
use crate::cache::{cache_key, ResponseCache};
use crate::config::{ExperimentConfig, LoadedConfig};
use crate::estimators::{pass_curve, OmegaResult, PassCurve};
use crate::exec::parallel_map;
use crate::factpipe::{
    extract_and_filter, verify_entry, FactsEntry, StageClients, NONE_BLOCK,
};
use crate::grading::{grade_answer, grading_prompt, GradeError};
use crate::interventions::{
    plan_variant, run_variant, FactsContext, VariantInputs, VariantOutcome,
};
use crate::jsonl::write_atomic;
use crate::prompts::PromptSet;
use crate::store::{now_rfc3339, Access, CommandEntry, GradeEntry, RunManifest, RunStore, SkipEntry, StoreError};
use crate::types::{QuestionRecord, SampleRecord, TraceRef, VariantId};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset: {0}")]
    Dataset(#[from] crate::datasets::LoadError),
    #[error("prompts: {0}")]
    Prompts(#[from] crate::prompts::TemplateError),
    #[error("backend setup for profile {profile}: {message}")]
    BackendSetup { profile: String, message: String },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Sample,
    Grade,
    Facts,
    Verify,
    Estimate,
    Analyze,
    Select,
    Report,
    Replay,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Grade => "grade",
            Command::Facts => "facts",
            Command::Verify => "verify",
            Command::Estimate => "estimate",
            Command::Analyze => "analyze",
            Command::Select => "select",
            Command::Report => "report",
            Command::Replay => "replay",
        }
    }

    /// Commands that may call a backend.
    pub fn uses_backends(self) -> bool {
        matches!(self, Command::Sample | Command::Grade | Command::Facts | Command::Verify)
    }
}

/// What a command did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandOutcome {
    pub command: String,
    /// Items completed by this invocation.
    pub completed: usize,
    /// Items already present in the store.
    pub already_done: usize,
    /// Items that failed and were written to the skip log.
    pub skipped: usize,
    /// Items waiting on another command (e.g. facts variants before `facts`).
    pub deferred: usize,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl CommandOutcome {
    fn new(command: Command) -> Self {
        Self {
            command: command.name().to_string(),
            ..Default::default()
        }
    }

    /// 0 on full success, 2 when anything was skipped.
    pub fn exit_code(&self) -> i32 {
        if self.skipped > 0 {
            2
        } else {
            0
        }
    }

    fn absorb(&mut self, other: CommandOutcome) {
        self.completed += other.completed;
        self.already_done += other.already_done;
        self.skipped += other.skipped;
        self.deferred += other.deferred;
        self.outputs.extend(other.outputs);
        self.notes.extend(other.notes);
    }
}

/// Builds a transport for a profile.
pub type BackendFactory = dyn Fn(&BackendProfile) -> Result<Arc<dyn ChatBackend>, String> + Send + Sync;

/// Mock profiles get a scripted mock (an empty script when none is given);
/// HTTP profiles get an OpenAI-compatible client.
pub fn default_backend(profile: &BackendProfile) -> Result<Arc<dyn ChatBackend>, String> {
    match &profile.endpoint {
        Endpoint::Mock { script } => {
            let script = match script {
                Some(path) => MockScript::from_file(path)?,
                None => MockScript::default(),
            };
            Ok(Arc::new(MockBackend::from_script(script)))
        }
        Endpoint::Http(h) => Ok(Arc::new(HttpBackend::new(h.clone())?)),
    }
}

struct Clients {
    by_profile: BTreeMap<String, Arc<LlmClient>>,
}

impl Clients {
    fn get(&self, id: &str) -> &LlmClient {
        &self.by_profile[id]
    }
}

/// One run directory plus the configuration and clients that act on it.
pub struct Experiment {
    config: ExperimentConfig,
    raw_config: serde_json::Value,
    questions: Vec<QuestionRecord>,
    by_id: HashMap<String, usize>,
    store: RunStore,
    cache: Arc<ResponseCache>,
    clients: Clients,
}

/// Fixed names of the derived artefacts, relative to the run directory.
pub mod outputs {
    pub const ESTIMATES_DIR: &str = "estimates";
    pub const ESTIMATES_JSON: &str = "estimates/estimates.json";
    pub const OMEGA_BY_LENGTH: &str = "estimates/omega_by_length.csv";
    pub const ANALYSIS_JSON: &str = "analysis/results.json";
    pub const WITHIN_CSV: &str = "analysis/within_question.csv";
    pub const SCATTER_SVG: &str = "analysis/scatter.svg";
    pub const SELECTION_JSON: &str = "analysis/selection.json";
    pub const SELECTION_CSV: &str = "analysis/selection.csv";
    pub const REPORT_MD: &str = "report.md";

    /// Curve file for one variant; `:` in sweep ids becomes `_`.
    pub fn curve_file(variant: &str) -> String {
        format!("estimates/pass_at_k_{}.csv", variant.replace(':', "_"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEstimate {
    pub n_questions: usize,
    /// Smallest graded sample count over the included questions; curves run
    /// k = 1..=n_max.
    pub n_max: usize,
    pub curve: PassCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<OmegaResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub variants: BTreeMap<String, VariantEstimate>,
    /// Ω of each variant against OFF, over questions graded in both.
    pub omega_vs_off: BTreeMap<String, OmegaEntry>,
    /// Sweep lengths with their Ω against OFF.
    pub omega_by_length: Vec<(u32, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub label_counts: BTreeMap<String, usize>,
    pub pooled: PooledRates,
    pub clean_correct_rate: Option<f64>,
    pub hallucinated_correct_rate: Option<f64>,
    pub min_per_subset: u64,
    pub points: Vec<WithinQuestionPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<LinearFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complexity: Option<ComplexitySplit>,
}

fn tier(v: VariantId) -> usize {
    if v.needs_facts() {
        2
    } else if v.needs_original_trace() {
        1
    } else {
        0
    }
}

fn on_ref(question_id: &str, sample_index: u32) -> TraceRef {
    TraceRef {
        question_id: question_id.to_string(),
        variant: VariantId::On,
        sample_index,
    }
}

fn write_output(root: &Path, rel: &str, bytes: &[u8], outcome: &mut CommandOutcome) -> Result<(), PipelineError> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(&path, bytes)?;
    outcome.outputs.push(path);
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("analysis values serialize");
    v.push(b'\n');
    v
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.digits$}"))
}

enum JobResult {
    Done,
    Skipped,
    Deferred,
}

impl Experiment {
    /// Opens (or creates) the run directory for `loaded` and builds one
    /// client per profile. With `factory = None` every client is offline and
    /// can only be served from the cache.
    pub fn open(loaded: &LoadedConfig, factory: Option<&BackendFactory>) -> Result<Self, PipelineError> {
        Self::open_with(loaded, factory, Access::Writable)
    }

    fn open_with(
        loaded: &LoadedConfig,
        factory: Option<&BackendFactory>,
        access: Access,
    ) -> Result<Self, PipelineError> {
        let config = loaded.config.clone();
        let questions = config.dataset.load(config.seed)?;
        let by_id = questions.iter().enumerate().map(|(i, q)| (q.id.clone(), i)).collect();
        let store = RunStore::open(config.run_dir(), access)?;
        let cache = Arc::new(match access {
            Access::Writable => ResponseCache::open(&store.cache_path())?,
            Access::ReadOnly => ResponseCache::load_read_only(&store.cache_path())?,
        });
        let prompts = Arc::new(match &config.prompts_dir {
            Some(dir) => PromptSet::from_dir(dir)?,
            None => PromptSet::builtin(),
        });
        let mut by_profile = BTreeMap::new();
        for p in &config.profiles {
            let profile = config.effective_profile(&p.profile_id).expect("profile exists");
            let backend: Arc<dyn ChatBackend> = match factory {
                Some(f) => f(&profile).map_err(|message| PipelineError::BackendSetup {
                    profile: profile.profile_id.clone(),
                    message,
                })?,
                None => Arc::new(OfflineBackend),
            };
            let client = LlmClient::with_prompts(profile, backend, cache.clone(), prompts.clone());
            by_profile.insert(p.profile_id.clone(), Arc::new(client));
        }
        Ok(Self {
            raw_config: loaded.raw.clone(),
            config,
            questions,
            by_id,
            store,
            cache,
            clients: Clients { by_profile },
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn questions(&self) -> &[QuestionRecord] {
        &self.questions
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Backend invocations across all clients in this process.
    pub fn backend_calls(&self) -> u64 {
        self.clients.by_profile.values().map(|c| c.backend_calls()).sum()
    }

    fn question(&self, id: &str) -> Option<&QuestionRecord> {
        self.by_id.get(id).map(|&i| &self.questions[i])
    }

    fn skip(&self, command: Command, item: impl ToString, reason: impl ToString) -> Result<(), PipelineError> {
        let entry = SkipEntry {
            command: command.name().to_string(),
            item: item.to_string(),
            reason: reason.to_string(),
        };
        tracing::warn!(command = %entry.command, item = %entry.item, reason = %entry.reason, "skipped");
        self.store.log_skip(&entry)?;
        Ok(())
    }

    fn begin(&self, command: Command) -> Result<RunManifest, PipelineError> {
        let now = now_rfc3339();
        let mut manifest = self.store.read_manifest()?.unwrap_or_else(|| RunManifest {
            run_id: self.config.run_id.clone(),
            config: self.raw_config.clone(),
            created_at: now.clone(),
            updated_at: now.clone(),
            cache: Default::default(),
            commands: Vec::new(),
        });
        manifest.config = self.raw_config.clone();
        manifest.updated_at = now.clone();
        manifest.commands.push(CommandEntry {
            command: command.name().to_string(),
            started_at: now,
            finished_at: None,
            status: Some("running".into()),
        });
        self.store.write_manifest(&manifest)?;
        Ok(manifest)
    }

    fn finish(&self, mut manifest: RunManifest, status: &str) -> Result<(), PipelineError> {
        let now = now_rfc3339();
        manifest.updated_at = now.clone();
        let stats = self.cache.stats();
        manifest.cache.hits += stats.hits;
        manifest.cache.misses += stats.misses;
        if let Some(last) = manifest.commands.last_mut() {
            last.finished_at = Some(now);
            last.status = Some(status.to_string());
        }
        self.store.write_manifest(&manifest)?;
        Ok(())
    }

    /// Runs one command. The manifest is written before any other side effect.
    pub fn run(&self, command: Command) -> Result<CommandOutcome, PipelineError> {
        let manifest = self.begin(command)?;
        let result = match command {
            Command::Sample => self.sample(),
            Command::Grade => self.grade(),
            Command::Facts => self.facts(),
            Command::Verify => self.verify(),
            Command::Estimate => self.write_estimates(),
            Command::Analyze => self.write_analysis(),
            Command::Select => self.write_selection(),
            Command::Report => self.write_report(),
            Command::Replay => self.replay(),
        };
        let status = match &result {
            Ok(o) if o.skipped > 0 => "partial",
            Ok(_) => "ok",
            Err(_) => "error",
        };
        self.finish(manifest, status)?;
        result
    }

    // ---- sampling --------------------------------------------------------

    fn sample_variants(&self) -> Vec<VariantId> {
        let mut vs = self.config.variants.clone();
        vs.sort_by_key(|v| tier(*v));
        vs
    }

    fn facts_context(&self, entry: &FactsEntry, conservative: bool) -> Option<FactsContext> {
        let (facts, failed) = if conservative {
            (&entry.conservative_facts, entry.conservative_parse_failed)
        } else {
            (&entry.facts, entry.parse_failed)
        };
        (!failed).then(|| FactsContext::new(entry.trace.question_id.clone(), facts.clone()))
    }

    fn sample_job(&self, q: &QuestionRecord, v: VariantId, i: u32) -> Result<JobResult, PipelineError> {
        let client = self.clients.get(&self.config.roles.generate);
        let key = TraceRef {
            question_id: q.id.clone(),
            variant: v,
            sample_index: i,
        };
        let original = if v.needs_original_trace() {
            match self.store.sample(&on_ref(&q.id, i)) {
                Some(s) => Some(s),
                None => {
                    self.skip(Command::Sample, &key, "paired ON sample is unavailable")?;
                    return Ok(JobResult::Skipped);
                }
            }
        } else {
            None
        };
        let (facts, conservative) = if v.needs_facts() {
            match self.store.facts(&on_ref(&q.id, i)) {
                Some(entry) => (self.facts_context(&entry, false), self.facts_context(&entry, true)),
                None => return Ok(JobResult::Deferred),
            }
        } else {
            (None, None)
        };
        if v.needs_facts() {
            let failed = match v {
                VariantId::OffFactsConservative => conservative.is_none(),
                _ => facts.is_none(),
            };
            if failed {
                self.skip(Command::Sample, &key, "facts list for the paired ON sample failed to parse")?;
                return Ok(JobResult::Skipped);
            }
        }
        let inputs = VariantInputs {
            original_on: original.as_ref(),
            facts: facts.as_ref(),
            conservative_facts: conservative.as_ref(),
        };
        match run_variant(v, q, &inputs, client, i) {
            Ok(VariantOutcome::Sample(s)) => {
                self.store.put_sample(&s)?;
                Ok(JobResult::Done)
            }
            Ok(VariantOutcome::Skipped(reason)) => {
                self.skip(Command::Sample, &key, reason)?;
                Ok(JobResult::Skipped)
            }
            Err(e) => {
                self.skip(Command::Sample, &key, e)?;
                Ok(JobResult::Skipped)
            }
        }
    }

    fn tally(outcome: &mut CommandOutcome, results: Vec<Result<JobResult, PipelineError>>) -> Result<(), PipelineError> {
        for r in results {
            match r? {
                JobResult::Done => outcome.completed += 1,
                JobResult::Skipped => outcome.skipped += 1,
                JobResult::Deferred => outcome.deferred += 1,
            }
        }
        Ok(())
    }

    fn sample(&self) -> Result<CommandOutcome, PipelineError> {
        let mut outcome = CommandOutcome::new(Command::Sample);
        let workers = self.clients.get(&self.config.roles.generate).profile().max_concurrent_requests;
        let variants = self.sample_variants();
        for t in 0..3 {
            let mut jobs = Vec::new();
            for q in &self.questions {
                for &v in variants.iter().filter(|v| tier(**v) == t) {
                    for i in 0..self.config.n_samples {
                        let key = TraceRef {
                            question_id: q.id.clone(),
                            variant: v,
                            sample_index: i,
                        };
                        if self.store.has_sample(&key) {
                            outcome.already_done += 1;
                        } else {
                            jobs.push((q, v, i));
                        }
                    }
                }
            }
            let results = parallel_map(&jobs, workers, |(q, v, i)| self.sample_job(q, *v, *i));
            Self::tally(&mut outcome, results)?;
        }
        if outcome.deferred > 0 {
            outcome.notes.push(format!(
                "{} samples wait for extracted facts; run `facts` and then `sample` again",
                outcome.deferred
            ));
        }
        Ok(outcome)
    }

    // ---- grading ---------------------------------------------------------

    fn grade(&self) -> Result<CommandOutcome, PipelineError> {
        let mut outcome = CommandOutcome::new(Command::Grade);
        let client = self.clients.get(&self.config.roles.grade);
        let mut pending = Vec::new();
        for s in self.store.all_samples() {
            if self.store.grade_entry(&s.trace_ref()).is_some() {
                outcome.already_done += 1;
            } else {
                pending.push(s);
            }
        }
        let results = parallel_map(&pending, client.profile().max_concurrent_requests, |s| {
            let key = s.trace_ref();
            let Some(q) = self.question(&s.question_id) else {
                self.skip(Command::Grade, &key, "question is not in the configured dataset")?;
                return Ok(JobResult::Skipped);
            };
            match grade_answer(client, q.dataset, &q.question_text, &q.gold_answer, &s.answer_text) {
                Ok(label) => {
                    self.store.put_grade(&GradeEntry {
                        trace: key,
                        grade: Some(label),
                        error: None,
                    })?;
                    Ok(JobResult::Done)
                }
                Err(GradeError::Unparseable(reply)) => {
                    let reason = format!("unparseable autorater grade: {reply:?}");
                    self.store.put_grade(&GradeEntry {
                        trace: key.clone(),
                        grade: None,
                        error: Some(reason.clone()),
                    })?;
                    self.skip(Command::Grade, &key, reason)?;
                    Ok(JobResult::Skipped)
                }
                Err(e) => {
                    self.skip(Command::Grade, &key, e)?;
                    Ok(JobResult::Skipped)
                }
            }
        });
        Self::tally(&mut outcome, results)?;
        Ok(outcome)
    }

    // ---- facts and verification -----------------------------------------

    fn on_samples(&self) -> Vec<SampleRecord> {
        self.store
            .all_samples()
            .into_iter()
            .filter(|s| s.variant == VariantId::On)
            .collect()
    }

    fn facts(&self) -> Result<CommandOutcome, PipelineError> {
        let mut outcome = CommandOutcome::new(Command::Facts);
        let clients = StageClients {
            strong: self.clients.get(&self.config.roles.pipeline_strong),
            fast: self.clients.get(self.config.roles.pipeline_fast()),
        };
        let mut pending = Vec::new();
        for s in self.on_samples() {
            if self.store.facts(&s.trace_ref()).is_some() {
                outcome.already_done += 1;
            } else {
                pending.push(s);
            }
        }
        let workers = clients.strong.profile().max_concurrent_requests;
        let results = parallel_map(&pending, workers, |s| {
            let key = s.trace_ref();
            let Some(q) = self.question(&s.question_id) else {
                self.skip(Command::Facts, &key, "question is not in the configured dataset")?;
                return Ok(JobResult::Skipped);
            };
            let has_trace = s.trace_text.as_deref().is_some_and(|t| !t.trim().is_empty());
            let entry = if has_trace {
                match extract_and_filter(clients, q, s) {
                    Ok(e) => e,
                    Err(e) => {
                        self.skip(Command::Facts, &key, e)?;
                        return Ok(JobResult::Skipped);
                    }
                }
            } else {
                FactsEntry {
                    trace: key,
                    extracted: NONE_BLOCK.into(),
                    after_question: NONE_BLOCK.into(),
                    after_gold: NONE_BLOCK.into(),
                    after_predicted: NONE_BLOCK.into(),
                    conservative: NONE_BLOCK.into(),
                    facts: Vec::new(),
                    parse_failed: false,
                    conservative_facts: Vec::new(),
                    conservative_parse_failed: false,
                }
            };
            self.store.put_facts(&entry)?;
            Ok(JobResult::Done)
        });
        Self::tally(&mut outcome, results)?;
        Ok(outcome)
    }

    fn verify(&self) -> Result<CommandOutcome, PipelineError> {
        let mut outcome = CommandOutcome::new(Command::Verify);
        let client = self.clients.get(&self.config.roles.verify);
        let mut pending = Vec::new();
        for e in self.store.all_facts() {
            if self.store.audit(&e.trace).is_some() {
                outcome.already_done += 1;
            } else {
                pending.push(e);
            }
        }
        let results = parallel_map(&pending, client.profile().max_concurrent_requests, |entry| {
            match verify_entry(client, entry) {
                Ok(audit) => {
                    self.store.put_audit(&audit)?;
                    Ok(JobResult::Done)
                }
                Err(e) => {
                    self.skip(Command::Verify, &entry.trace, e)?;
                    Ok(JobResult::Skipped)
                }
            }
        });
        Self::tally(&mut outcome, results)?;
        Ok(outcome)
    }

    // ---- derived artefacts ----------------------------------------------

    fn counts_by_variant(&self) -> BTreeMap<VariantId, BTreeMap<String, (u64, u64)>> {
        let mut by_variant: BTreeMap<VariantId, Vec<SampleRecord>> = BTreeMap::new();
        for s in self.store.all_samples() {
            by_variant.entry(s.variant).or_default().push(s);
        }
        by_variant
            .into_iter()
            .map(|(v, samples)| (v, question_counts(&samples)))
            .filter(|(_, c)| !c.is_empty())
            .collect()
    }

    pub fn estimate_summary(&self) -> Result<EstimateSummary, PipelineError> {
        let counts = self.counts_by_variant();
        let mut variants = BTreeMap::new();
        for (v, per_q) in &counts {
            let list: Vec<(u64, u64)> = per_q.values().copied().collect();
            let n_max = list.iter().map(|c| c.0).min().unwrap_or(0) as usize;
            let curve = pass_curve(&list, n_max).map_err(|e| PipelineError::Other(format!("{v}: {e}")))?;
            variants.insert(
                v.to_string(),
                VariantEstimate {
                    n_questions: list.len(),
                    n_max,
                    curve,
                },
            );
        }
        let mut omega_vs_off = BTreeMap::new();
        let mut omega_by_length = Vec::new();
        if let Some(off) = counts.get(&VariantId::Off) {
            for (v, per_q) in counts.iter().filter(|(v, _)| **v != VariantId::Off) {
                let (a, b, n_max) = paired_counts(per_q.keys().cloned(), per_q, off);
                let entry = if a.is_empty() {
                    OmegaEntry {
                        result: None,
                        error: Some("no question graded under both this variant and OFF".into()),
                    }
                } else {
                    match omega_with_ci(&a, &b, n_max, &self.config.bootstrap) {
                        Ok(r) => OmegaEntry { result: Some(r), error: None },
                        Err(e) => OmegaEntry {
                            result: None,
                            error: Some(e.to_string()),
                        },
                    }
                };
                if let VariantId::OnDummyX(len) = v {
                    omega_by_length.push((*len, entry.result.as_ref().map(|r| r.omega)));
                }
                omega_vs_off.insert(v.to_string(), entry);
            }
        }
        Ok(EstimateSummary {
            variants,
            omega_vs_off,
            omega_by_length,
        })
    }

    fn write_estimates(&self) -> Result<CommandOutcome, PipelineError> {
        let mut outcome = CommandOutcome::new(Command::Estimate);
        let summary = self.estimate_summary()?;
        let root = self.store.root();
        for (v, est) in &summary.variants {
            write_output(root, &outputs::curve_file(v), est.curve.to_delimited().as_bytes(), &mut outcome)?;
        }
        if !summary.omega_by_length.is_empty() {
            let mut csv = String::from("length,omega\n");
            for (len, w) in &summary.omega_by_length {
                let _ = writeln!(csv, "{len},{}", w.map_or(String::new(), |w| w.to_string()));
            }
            write_output(root, outputs::OMEGA_BY_LENGTH, csv.as_bytes(), &mut outcome)?;
        }
        write_output(root, outputs::ESTIMATES_JSON, &json_bytes(&summary), &mut outcome)?;
        outcome.completed = summary.variants.len();
        Ok(outcome)
    }

    fn audited_on(&self) -> Vec<AuditedSample> {
        join_audits(&self.on_samples(), &self.store.all_audits())
    }

    pub fn analysis_summary(&self) -> Result<AnalysisSummary, PipelineError> {
        let audits = self.store.all_audits();
        let mut label_counts = BTreeMap::new();
        for a in &audits {
            *label_counts.entry(format!("{:?}", a.label)).or_insert(0usize) += 1;
        }
        let audited = self.audited_on();
        let pooled = pooled_rates(&audited);
        let points = within_question_points(&audited, self.config.min_per_subset);
        let (fit, fit_error) = match regression_slope(&points) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let complexity = if self.questions.iter().any(|q| q.complex.is_some()) {
            let counts = self.counts_by_variant();
            match (counts.get(&VariantId::On), counts.get(&VariantId::Off)) {
                (Some(on), Some(off)) => {
                    complexity_split_omega(&self.questions, on, off, &self.config.bootstrap).ok()
                }
                _ => None,
            }
        } else {
            None
        };
        Ok(AnalysisSummary {
            label_counts,
            clean_correct_rate: pooled.clean.rate(),
            hallucinated_correct_rate: pooled.hallucinated.rate(),
            pooled,
            min_per_subset: self.config.min_per_subset,
            points,
            fit,
            fit_error,
            complexity,
        })
    }

    fn write_analysis(&self) -> Result<CommandOutcome, PipelineError> {
        let mut outcome = CommandOutcome::new(Command::Analyze);
        let summary = self.analysis_summary()?;
        let root = self.store.root();
        write_output(root, outputs::ANALYSIS_JSON, &json_bytes(&summary), &mut outcome)?;
        let mut csv = String::from("question_id,clean_rate,hallucinated_rate,n_clean,n_hallucinated\n");
        for p in &summary.points {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                p.question_id, p.clean_rate, p.hallucinated_rate, p.n_clean, p.n_hallucinated
            );
        }
        write_output(root, outputs::WITHIN_CSV, csv.as_bytes(), &mut outcome)?;
        let svg = scatter_svg(&summary.points, summary.fit.as_ref());
        write_output(root, outputs::SCATTER_SVG, svg.as_bytes(), &mut outcome)?;
        outcome.completed = summary.points.len();
        Ok(outcome)
    }

    pub fn selection_report(&self) -> Result<SelectionReport, PipelineError> {
        selection_simulation(&self.audited_on()).map_err(|e| PipelineError::Other(e.to_string()))
    }

    fn write_selection(&self) -> Result<CommandOutcome, PipelineError> {
        let mut outcome = CommandOutcome::new(Command::Select);
        let report = self.selection_report()?;
        let root = self.store.root();
        write_output(root, outputs::SELECTION_JSON, &json_bytes(&report), &mut outcome)?;
        write_output(root, outputs::SELECTION_CSV, report.to_table().as_bytes(), &mut outcome)?;
        outcome.completed = report.n_questions_used;
        Ok(outcome)
    }

    fn write_report(&self) -> Result<CommandOutcome, PipelineError> {
        let mut outcome = CommandOutcome::new(Command::Report);
        let est = self.estimate_summary()?;
        let ana = self.analysis_summary()?;
        let sel = self.selection_report().ok();
        let mut md = format!("# Run {}\n\n", self.config.run_id);
        md.push_str("## pass@k\n\n| variant | questions | n | pass@1 | pass@n |\n|---|---|---|---|---|\n");
        for (v, e) in &est.variants {
            let _ = writeln!(
                md,
                "| {v} | {} | {} | {:.4} | {:.4} |",
                e.n_questions,
                e.n_max,
                e.curve.at(1),
                e.curve.at(e.n_max)
            );
        }
        md.push_str("\n## Ω against OFF\n\n| variant | Ω | CI low | CI high |\n|---|---|---|---|\n");
        for (v, e) in &est.omega_vs_off {
            match &e.result {
                Some(r) => {
                    let _ = writeln!(
                        md,
                        "| {v} | {:.4} | {} | {} |",
                        r.omega,
                        fmt_opt(r.ci_low, 4),
                        fmt_opt(r.ci_high, 4)
                    );
                }
                None => {
                    let _ = writeln!(md, "| {v} | undefined | | |");
                }
            }
        }
        md.push_str("\n## Fact audits\n\n");
        for (label, n) in &ana.label_counts {
            let _ = writeln!(md, "- {label}: {n}");
        }
        let _ = writeln!(
            md,
            "\nCorrect-answer rate: clean {} ({} traces), hallucinated {} ({} traces).",
            fmt_opt(ana.clean_correct_rate.map(|r| r * 100.0), 1),
            ana.pooled.clean.total,
            fmt_opt(ana.hallucinated_correct_rate.map(|r| r * 100.0), 1),
            ana.pooled.hallucinated.total
        );
        let _ = writeln!(md, "\nWithin-question points: {}.", ana.points.len());
        match (&ana.fit, &ana.fit_error) {
            (Some(f), _) => {
                let _ = writeln!(md, "Fitted line: slope {:.4}, intercept {:.4}.", f.slope, f.intercept);
            }
            (None, Some(e)) => {
                let _ = writeln!(md, "No fitted line: {e}.");
            }
            _ => {}
        }
        md.push_str("\n## Selection\n\n");
        match &sel {
            Some(r) => {
                md.push_str("```\n");
                md.push_str(&r.to_table());
                md.push_str("```\n");
            }
            None => md.push_str("No question has non-empty subsets for every strategy.\n"),
        }
        write_output(self.store.root(), outputs::REPORT_MD, md.as_bytes(), &mut outcome)?;
        outcome.completed = 1;
        Ok(outcome)
    }

    fn replay(&self) -> Result<CommandOutcome, PipelineError> {
        let mut outcome = CommandOutcome::new(Command::Replay);
        outcome.absorb(self.write_estimates()?);
        outcome.absorb(self.write_analysis()?);
        match self.write_selection() {
            Ok(o) => outcome.absorb(o),
            Err(e) => outcome.notes.push(format!("selection: {e}")),
        }
        outcome.absorb(self.write_report()?);
        Ok(outcome)
    }

    // ---- dry run -----------------------------------------------------------

    /// Describes the calls `command` would make, without making any.
    pub fn plan(&self, command: Command) -> Result<Vec<String>, PipelineError> {
        let mut lines = Vec::new();
        match command {
            Command::Sample => {
                let client = self.clients.get(&self.config.roles.generate);
                let mut by_variant: BTreeMap<VariantId, [usize; 4]> = BTreeMap::new();
                for q in &self.questions {
                    for &v in &self.config.variants {
                        for i in 0..self.config.n_samples {
                            let key = TraceRef {
                                question_id: q.id.clone(),
                                variant: v,
                                sample_index: i,
                            };
                            // [stored, new calls, cached, waiting on dependencies]
                            let slot = by_variant.entry(v).or_default();
                            if self.store.has_sample(&key) {
                                slot[0] += 1;
                                continue;
                            }
                            let original = self.store.sample(&on_ref(&q.id, i));
                            let entry = self.store.facts(&on_ref(&q.id, i));
                            let facts = entry.as_ref().and_then(|e| self.facts_context(e, false));
                            let cons = entry.as_ref().and_then(|e| self.facts_context(e, true));
                            let inputs = VariantInputs {
                                original_on: original.as_ref(),
                                facts: facts.as_ref(),
                                conservative_facts: cons.as_ref(),
                            };
                            match plan_variant(v, q, &inputs, client.prompts()) {
                                Ok(p) => {
                                    let req = client.request(
                                        CallKind::Generate,
                                        p.mode,
                                        &p.prompt,
                                        p.trace_override.as_deref(),
                                        i,
                                    );
                                    if self.cache.contains(&cache_key(&req)) {
                                        slot[2] += 1;
                                    } else {
                                        slot[1] += 1;
                                    }
                                }
                                Err(_) => slot[3] += 1,
                            }
                        }
                    }
                }
                let mut total = 0;
                for (v, [stored, new, cached, waiting]) in &by_variant {
                    total += new + waiting;
                    lines.push(format!(
                        "sample {v}: {new} calls to profile {}, {cached} served from cache, {stored} already stored, {waiting} waiting on ON samples or facts (one call each once ready)",
                        client.profile().profile_id
                    ));
                }
                lines.push(format!("sample total: at most {total} generation calls"));
            }
            Command::Grade => {
                let client = self.clients.get(&self.config.roles.grade);
                let (mut new, mut cached, mut done) = (0, 0, 0);
                for s in self.store.all_samples() {
                    if self.store.grade_entry(&s.trace_ref()).is_some() {
                        done += 1;
                        continue;
                    }
                    let Some(q) = self.question(&s.question_id) else { continue };
                    let prompt = grading_prompt(client, q.dataset, &q.question_text, &q.gold_answer, &s.answer_text);
                    let req = client.request(CallKind::Grade, crate::types::ReasoningMode::On, &prompt, None, 0);
                    if self.cache.contains(&cache_key(&req)) {
                        cached += 1;
                    } else {
                        new += 1;
                    }
                }
                lines.push(format!(
                    "grade: {new} calls to profile {} (up to {} with reprompts), {cached} served from cache, {done} already graded",
                    client.profile().profile_id,
                    2 * new
                ));
            }
            Command::Facts => {
                let pending = self
                    .on_samples()
                    .iter()
                    .filter(|s| self.store.facts(&s.trace_ref()).is_none())
                    .count();
                lines.push(format!(
                    "facts: {pending} traces; per trace up to 5 calls to profile {} and up to 5 to profile {} (fewer when a stage yields NONE)",
                    self.config.roles.pipeline_strong,
                    self.config.roles.pipeline_fast()
                ));
            }
            Command::Verify => {
                let mut facts = 0;
                let mut traces = 0;
                for e in self.store.all_facts() {
                    if self.store.audit(&e.trace).is_none() {
                        traces += 1;
                        facts += e.facts.len();
                    }
                }
                lines.push(format!(
                    "verify: {traces} traces with {facts} facts; at most {facts} calls to profile {} (duplicates share one call)",
                    self.config.roles.verify
                ));
            }
            other => lines.push(format!("{}: no backend calls", other.name())),
        }
        Ok(lines)
    }
}

/// Read-only view for dry runs; nothing is created on disk.
pub fn open_for_plan(loaded: &LoadedConfig) -> Result<Experiment, PipelineError> {
    Experiment::open_with(loaded, None, Access::ReadOnly)
}
