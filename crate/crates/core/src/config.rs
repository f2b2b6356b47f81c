//! Experiment configuration.
//!
//! A single TOML file describes the dataset, backend profiles, the role each
//! profile plays, the variants to sample and the analysis settings. `${NAME}`
//! is replaced by the environment variable `NAME` before parsing; the run
//! manifest records the file as written, so interpolated values never reach
//! disk. API keys are referenced by variable name (`api_key_env`) and read
//! only when a request is sent.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{BootstrapSettings, DEFAULT_MIN_PER_SUBSET};
use crate::backends::{BackendProfile, Endpoint};
use crate::datasets::{load_entityquestions, load_simpleqa_verified, ColumnMapping, LoadError};
use crate::interventions::DEFAULT_SWEEP;
use crate::types::{QuestionRecord, VariantId, ENTITY_RELATIONS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SimpleqaVerified {
        path: PathBuf,
        #[serde(default)]
        columns: ColumnMapping,
        /// Keep only the first `limit` questions.
        #[serde(default)]
        limit: Option<usize>,
    },
    EntityQuestions {
        root: PathBuf,
        #[serde(default = "default_relations")]
        relations: Vec<String>,
        per_relation: usize,
    },
}

fn default_relations() -> Vec<String> {
    ENTITY_RELATIONS.iter().map(|s| s.to_string()).collect()
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Vec<QuestionRecord>, LoadError> {
        match self {
            DatasetSpec::SimpleqaVerified { path, columns, limit } => {
                let mut qs = load_simpleqa_verified(path, columns)?;
                if let Some(n) = limit {
                    qs.truncate(*n);
                }
                Ok(qs)
            }
            DatasetSpec::EntityQuestions {
                root,
                relations,
                per_relation,
            } => load_entityquestions(root, relations, *per_relation, seed),
        }
    }

    fn resolve(&mut self, base: &Path) {
        let p = match self {
            DatasetSpec::SimpleqaVerified { path, .. } => path,
            DatasetSpec::EntityQuestions { root, .. } => root,
        };
        *p = resolve(base, p);
    }
}

/// Which profile serves each kind of call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    /// Model under study.
    pub generate: String,
    /// Autorater.
    pub grade: String,
    /// Fact extraction and answer-disclosure filtering.
    pub pipeline_strong: String,
    /// Question filtering and list parsing; defaults to `pipeline_strong`.
    #[serde(default)]
    pub pipeline_fast: Option<String>,
    /// Search-backed fact verification.
    pub verify: String,
}

impl Roles {
    pub fn pipeline_fast(&self) -> &str {
        self.pipeline_fast.as_deref().unwrap_or(&self.pipeline_strong)
    }

    fn all(&self) -> [(&'static str, &str); 5] {
        [
            ("generate", &self.generate),
            ("grade", &self.grade),
            ("pipeline_strong", &self.pipeline_strong),
            ("pipeline_fast", self.pipeline_fast()),
            ("verify", &self.verify),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_samples")]
    pub n_samples: u32,
    pub dataset: DatasetSpec,
    pub variants: Vec<VariantId>,
    #[serde(default = "default_sweep")]
    pub sweep_lengths: Vec<u32>,
    /// Caps every profile's in-flight bound.
    #[serde(default)]
    pub concurrency: Option<usize>,
    /// Directory of editable prompt templates; built-ins fill any gaps.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    pub profiles: Vec<BackendProfile>,
    pub roles: Roles,
    #[serde(default)]
    pub bootstrap: BootstrapSettings,
    #[serde(default = "default_min_per_subset")]
    pub min_per_subset: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_n_samples() -> u32 {
    100
}

fn default_sweep() -> Vec<u32> {
    DEFAULT_SWEEP.to_vec()
}

fn default_min_per_subset() -> u64 {
    DEFAULT_MIN_PER_SUBSET
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub n_samples: Option<u32>,
    pub concurrency: Option<usize>,
    pub seed: Option<u64>,
}

/// A validated configuration plus the file it came from, as written.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub raw: serde_json::Value,
}

/// Replaces `${NAME}` with the value of environment variable `NAME`. `$$`
/// produces a literal `$`. Every unset variable is reported.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, Vec<String>> {
    let mut out = String::with_capacity(text.len());
    let mut missing = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let after = &rest[i + 1..];
        if let Some(tail) = after.strip_prefix('$') {
            out.push('$');
            rest = tail;
        } else if let Some(body) = after.strip_prefix('{') {
            match body.find('}') {
                Some(end) if is_var_name(&body[..end]) => {
                    let name = &body[..end];
                    match lookup(name) {
                        Some(v) => out.push_str(&v),
                        None => missing.push(format!("environment variable {name} is not set")),
                    }
                    rest = &body[end + 1..];
                }
                _ => {
                    out.push('$');
                    rest = after;
                }
            }
        } else {
            out.push('$');
            rest = after;
        }
    }
    out.push_str(rest);
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(missing)
    }
}

fn is_var_name(s: &str) -> bool {
    let mut chars = s.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.run_id {
            self.run_id = v.clone();
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.n_samples {
            self.n_samples = v;
        }
        if let Some(v) = o.concurrency {
            self.concurrency = Some(v);
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
    }

    pub fn profile(&self, id: &str) -> Option<&BackendProfile> {
        self.profiles.iter().find(|p| p.profile_id == id)
    }

    /// Profile with the global concurrency cap applied.
    pub fn effective_profile(&self, id: &str) -> Option<BackendProfile> {
        let mut p = self.profile(id)?.clone();
        if let Some(cap) = self.concurrency {
            p.max_concurrent_requests = p.max_concurrent_requests.min(cap.max(1));
        }
        Some(p)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    /// Every violation, in a stable order. Empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.run_id.starts_with('.')
        {
            errs.push(format!(
                "run_id {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.run_id
            ));
        }
        if self.n_samples == 0 {
            errs.push("n_samples must be ≥ 1".into());
        }
        if self.variants.is_empty() {
            errs.push("variants must list at least one variant".into());
        }
        let mut seen = HashSet::new();
        for v in &self.variants {
            if !seen.insert(*v) {
                errs.push(format!("variant {v} is listed twice"));
            }
        }
        if self
            .variants
            .iter()
            .any(|v| v.needs_original_trace() || v.needs_facts())
            && !self.variants.contains(&VariantId::On)
        {
            errs.push("variants that reuse ON traces or their facts require \"on\" in variants".into());
        }
        if self.sweep_lengths.contains(&0) {
            errs.push("sweep_lengths must be positive".into());
        }
        if self.concurrency == Some(0) {
            errs.push("concurrency must be ≥ 1".into());
        }
        if self.min_per_subset == 0 {
            errs.push("min_per_subset must be ≥ 1".into());
        }
        if self.bootstrap.resamples == 0 {
            errs.push("bootstrap.resamples must be ≥ 1".into());
        }
        if !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            errs.push("bootstrap.level must be in (0, 1)".into());
        }

        match &self.dataset {
            DatasetSpec::SimpleqaVerified { path, .. } => {
                if !path.is_file() {
                    errs.push(format!("dataset.path {} does not exist", path.display()));
                }
            }
            DatasetSpec::EntityQuestions {
                root,
                relations,
                per_relation,
            } => {
                if !root.is_dir() {
                    errs.push(format!("dataset.root {} is not a directory", root.display()));
                }
                if relations.is_empty() {
                    errs.push("dataset.relations must not be empty".into());
                }
                for r in relations {
                    if !ENTITY_RELATIONS.contains(&r.as_str()) {
                        errs.push(format!(
                            "dataset.relations: unknown relation {r}; supported: {}",
                            ENTITY_RELATIONS.join(", ")
                        ));
                    }
                }
                if *per_relation == 0 {
                    errs.push("dataset.per_relation must be ≥ 1".into());
                }
            }
        }

        let mut ids = BTreeSet::new();
        for p in &self.profiles {
            if !ids.insert(p.profile_id.as_str()) {
                errs.push(format!("profile {} is defined twice", p.profile_id));
            }
            errs.extend(p.validate());
            if let Endpoint::Mock { script: Some(s) } = &p.endpoint {
                if !s.is_file() {
                    errs.push(format!("profile {}: mock script {} does not exist", p.profile_id, s.display()));
                }
            }
        }
        for (role, id) in self.roles.all() {
            if self.profile(id).is_none() {
                errs.push(format!("roles.{role} refers to unknown profile {id:?}"));
            }
        }
        if let Some(p) = self.profile(&self.roles.verify) {
            if !p.supports_search_tool && !p.is_mock() {
                errs.push(format!(
                    "roles.verify profile {} must set supports_search_tool = true",
                    p.profile_id
                ));
            }
        }
        if let Some(p) = self.profile(&self.roles.generate) {
            let overrides = self.variants.iter().any(|v| {
                matches!(
                    v,
                    VariantId::OnDummy
                        | VariantId::OnSingleDummy
                        | VariantId::OnDummyX(_)
                        | VariantId::OnFacts
                        | VariantId::OnDummyFacts
                )
            });
            if overrides && !p.supports_native_trace_override && p.override_template.is_none() {
                errs.push(format!(
                    "roles.generate profile {} cannot inject traces: enable supports_native_trace_override or set override_template",
                    p.profile_id
                ));
            }
        }
        if let Some(dir) = &self.prompts_dir {
            if !dir.is_dir() {
                errs.push(format!("prompts_dir {} is not a directory", dir.display()));
            }
        }
        errs
    }
}

/// Reads, interpolates, parses, applies overrides and validates a config
/// file. Relative paths are taken from the file's directory.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    // Placeholders in non-string positions make the raw text invalid TOML;
    // the manifest then records it verbatim.
    let raw = match toml::from_str::<toml::Value>(&text) {
        Ok(v) => serde_json::to_value(v).unwrap_or(serde_json::Value::String(text.clone())),
        Err(_) => serde_json::Value::String(text.clone()),
    };
    let expanded =
        interpolate_env(&text, |name| std::env::var(name).ok()).map_err(ConfigError::Invalid)?;
    let mut config = ExperimentConfig::from_toml_str(&expanded).map_err(|message| ConfigError::Parse {
        path: path.to_path_buf(),
        message,
    })?;
    config.apply(overrides);
    let base = path.parent().unwrap_or(Path::new("."));
    config.dataset.resolve(base);
    config.output_dir = resolve(base, &config.output_dir);
    config.prompts_dir = config.prompts_dir.as_deref().map(|p| resolve(base, p));
    for p in &mut config.profiles {
        if let Endpoint::Mock { script: Some(s) } = &mut p.endpoint {
            *s = resolve(base, s);
        }
    }
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(ConfigError::Invalid(errs));
    }
    Ok(LoadedConfig {
        config,
        path: path.to_path_buf(),
        raw,
    })
}
