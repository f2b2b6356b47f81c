//! Append-only run store.
//!
//! Layout of `runs/<run_id>/`:
//!
//! | file            | one line per                                  |
//! |-----------------|-----------------------------------------------|
//! | `manifest.json` | (single JSON document) run provenance         |
//! | `samples.jsonl` | generated [`SampleRecord`], grade left empty   |
//! | `grades.jsonl`  | [`GradeEntry`] for one sample                  |
//! | `facts.jsonl`   | [`FactsEntry`] from the extraction pipeline    |
//! | `audits.jsonl`  | [`FactAudit`] after verification               |
//! | `skips.jsonl`   | [`SkipEntry`] for work that was not done       |
//! | `cache.jsonl`   | cached backend responses                       |
//!
//! Grades are kept in their own file so samples never need rewriting;
//! [`RunStore::get_samples`] joins them back into `SampleRecord::grade`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cache::CacheStats;
use crate::factpipe::{FactAudit, FactsEntry};
use crate::jsonl;
use crate::types::{GradeLabel, SampleRecord, TraceRef, VariantId};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("run store at {0} is read-only")]
    ReadOnly(PathBuf),
    #[error("{file}: record {key} already exists")]
    Conflict { file: &'static str, key: TraceRef },
    #[error("run store I/O: {0}")]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub trait Keyed {
    fn key(&self) -> TraceRef;
}

impl Keyed for SampleRecord {
    fn key(&self) -> TraceRef {
        self.trace_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeEntry {
    pub trace: TraceRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<GradeLabel>,
    /// Set when the autorater output could not be parsed; the sample is then
    /// excluded from estimation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Keyed for GradeEntry {
    fn key(&self) -> TraceRef {
        self.trace.clone()
    }
}

impl Keyed for FactsEntry {
    fn key(&self) -> TraceRef {
        self.trace.clone()
    }
}

impl Keyed for FactAudit {
    fn key(&self) -> TraceRef {
        self.trace.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub command: String,
    pub item: String,
    pub reason: String,
}

struct Table<T> {
    name: &'static str,
    rows: RwLock<BTreeMap<TraceRef, T>>,
    file: Mutex<Option<File>>,
}

impl<T: Keyed + Clone + Serialize + DeserializeOwned> Table<T> {
    fn open(dir: &Path, name: &'static str, writable: bool) -> io::Result<Self> {
        let path = dir.join(name);
        let mut rows = BTreeMap::new();
        for rec in jsonl::read_records::<T>(&path)? {
            // Append-only: the first record for a key is authoritative.
            rows.entry(rec.key()).or_insert(rec);
        }
        let file = if writable {
            Some(jsonl::open_append(&path)?)
        } else {
            None
        };
        Ok(Self {
            name,
            rows: RwLock::new(rows),
            file: Mutex::new(file),
        })
    }

    fn put(&self, record: &T, root: &Path) -> Result<(), StoreError> {
        let mut file = self.file.lock().unwrap();
        let Some(file) = file.as_mut() else {
            return Err(StoreError::ReadOnly(root.to_path_buf()));
        };
        let key = record.key();
        if self.rows.read().unwrap().contains_key(&key) {
            return Err(StoreError::Conflict {
                file: self.name,
                key,
            });
        }
        jsonl::append_record(file, record)?;
        self.rows.write().unwrap().insert(key, record.clone());
        Ok(())
    }

    fn get(&self, key: &TraceRef) -> Option<T> {
        self.rows.read().unwrap().get(key).cloned()
    }

    fn contains(&self, key: &TraceRef) -> bool {
        self.rows.read().unwrap().contains_key(key)
    }

    fn range(&self, question_id: &str, variant: VariantId) -> Vec<T> {
        let lo = TraceRef {
            question_id: question_id.to_string(),
            variant,
            sample_index: 0,
        };
        let hi = TraceRef {
            sample_index: u32::MAX,
            ..lo.clone()
        };
        self.rows
            .read()
            .unwrap()
            .range(lo..=hi)
            .map(|(_, v)| v.clone())
            .collect()
    }

    fn all(&self) -> Vec<T> {
        self.rows.read().unwrap().values().cloned().collect()
    }

    fn len(&self) -> usize {
        self.rows.read().unwrap().len()
    }
}

/// Command history line kept in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEntry {
    pub command: String,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
}

/// Provenance for one run directory. Together with the cache file it fully
/// determines re-execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Resolved experiment configuration (credentials are referenced by
    /// environment variable name only).
    pub config: serde_json::Value,
    pub created_at: String,
    pub updated_at: String,
    #[serde(default)]
    pub cache: CacheStats,
    #[serde(default)]
    pub commands: Vec<CommandEntry>,
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    ReadOnly,
    Writable,
}

pub struct RunStore {
    root: PathBuf,
    samples: Table<SampleRecord>,
    grades: Table<GradeEntry>,
    facts: Table<FactsEntry>,
    audits: Table<FactAudit>,
    skips: Mutex<Option<File>>,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>, access: Access) -> Result<Self, StoreError> {
        let root = root.into();
        let writable = access == Access::Writable;
        if writable {
            std::fs::create_dir_all(&root)?;
        }
        let skips = if writable {
            Some(jsonl::open_append(&root.join("skips.jsonl"))?)
        } else {
            None
        };
        Ok(Self {
            samples: Table::open(&root, "samples.jsonl", writable)?,
            grades: Table::open(&root, "grades.jsonl", writable)?,
            facts: Table::open(&root, "facts.jsonl", writable)?,
            audits: Table::open(&root, "audits.jsonl", writable)?,
            skips: Mutex::new(skips),
            root,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cache_path(&self) -> PathBuf {
        self.root.join("cache.jsonl")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Appends a sample. The grade field is not persisted here; use
    /// [`RunStore::put_grade`].
    pub fn put_sample(&self, record: &SampleRecord) -> Result<(), StoreError> {
        let mut stored = record.clone();
        let grade = stored.grade.take();
        self.samples.put(&stored, &self.root)?;
        if let Some(grade) = grade {
            self.put_grade(&GradeEntry {
                trace: stored.trace_ref(),
                grade: Some(grade),
                error: None,
            })?;
        }
        Ok(())
    }

    pub fn has_sample(&self, key: &TraceRef) -> bool {
        self.samples.contains(key)
    }

    pub fn sample(&self, key: &TraceRef) -> Option<SampleRecord> {
        self.samples.get(key).map(|s| self.with_grade(s))
    }

    fn with_grade(&self, mut s: SampleRecord) -> SampleRecord {
        s.grade = self.grades.get(&s.trace_ref()).and_then(|g| g.grade);
        s
    }

    /// Samples for one (question, variant), ordered by `sample_index`.
    pub fn get_samples(&self, question_id: &str, variant: VariantId) -> Vec<SampleRecord> {
        self.samples
            .range(question_id, variant)
            .into_iter()
            .map(|s| self.with_grade(s))
            .collect()
    }

    pub fn all_samples(&self) -> Vec<SampleRecord> {
        self.samples
            .all()
            .into_iter()
            .map(|s| self.with_grade(s))
            .collect()
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn variants(&self) -> BTreeSet<VariantId> {
        self.samples.all().into_iter().map(|s| s.variant).collect()
    }

    pub fn put_grade(&self, entry: &GradeEntry) -> Result<(), StoreError> {
        self.grades.put(entry, &self.root)
    }

    pub fn grade_entry(&self, key: &TraceRef) -> Option<GradeEntry> {
        self.grades.get(key)
    }

    pub fn put_facts(&self, entry: &FactsEntry) -> Result<(), StoreError> {
        self.facts.put(entry, &self.root)
    }

    pub fn facts(&self, key: &TraceRef) -> Option<FactsEntry> {
        self.facts.get(key)
    }

    pub fn all_facts(&self) -> Vec<FactsEntry> {
        self.facts.all()
    }

    pub fn put_audit(&self, audit: &FactAudit) -> Result<(), StoreError> {
        self.audits.put(audit, &self.root)
    }

    pub fn audit(&self, key: &TraceRef) -> Option<FactAudit> {
        self.audits.get(key)
    }

    pub fn all_audits(&self) -> Vec<FactAudit> {
        self.audits.all()
    }

    pub fn log_skip(&self, skip: &SkipEntry) -> Result<(), StoreError> {
        let mut file = self.skips.lock().unwrap();
        let file = file
            .as_mut()
            .ok_or_else(|| StoreError::ReadOnly(self.root.clone()))?;
        jsonl::append_record(file, skip)?;
        Ok(())
    }

    pub fn skips(&self) -> Result<Vec<SkipEntry>, StoreError> {
        Ok(jsonl::read_records(&self.root.join("skips.jsonl"))?)
    }

    pub fn read_manifest(&self) -> Result<Option<RunManifest>, StoreError> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read(&path)?;
        Ok(Some(serde_json::from_slice(&text)?))
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        if self.skips.lock().unwrap().is_none() {
            return Err(StoreError::ReadOnly(self.root.clone()));
        }
        let mut bytes = serde_json::to_vec_pretty(manifest)?;
        bytes.push(b'\n');
        jsonl::write_atomic(&self.manifest_path(), &bytes)?;
        Ok(())
    }
}
