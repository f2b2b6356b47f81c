//! Dataset ingestion for SimpleQA-Verified and EntityQuestions.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::{fnv1a64, SplitMix64};
use crate::types::{QuestionRecord, ENTITY_RELATIONS};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed delimited text in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("missing column `{column}` (mapped from `{field}`) in {path}")]
    MissingColumn {
        path: PathBuf,
        field: &'static str,
        column: String,
    },
    #[error("row {row}: cannot parse `{value}` as a boolean in column `{column}`")]
    BadBoolean {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: duplicate question id `{id}`")]
    DuplicateId { row: usize, id: String },
    #[error("unknown relation code `{0}`; valid codes are P176, P264, P50, P26")]
    UnknownRelation(String),
    #[error("no question file for relation {relation} under {root}")]
    MissingRelationFile { relation: String, root: PathBuf },
    #[error("malformed relation file {path}: {message}")]
    BadRelationFile { path: PathBuf, message: String },
    #[error("relation {relation} has {available} usable examples, {requested} requested")]
    NotEnoughExamples {
        relation: String,
        available: usize,
        requested: usize,
    },
}

/// Header names for the SimpleQA-Verified columns. Defaults follow the
/// public release; override when the upstream file renames columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    /// Optional id column; the 1-based row number is used when absent.
    pub id: Option<String>,
    pub question: String,
    pub answer: String,
    pub requires_reasoning: String,
    pub multi_step: String,
    pub topic: Option<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            id: Some("original_index".into()),
            question: "problem".into(),
            answer: "answer".into(),
            requires_reasoning: "requires_reasoning".into(),
            multi_step: "multi_step".into(),
            topic: Some("topic".into()),
        }
    }
}

fn parse_flag(raw: &str, row: usize, column: &str) -> Result<Option<bool>, LoadError> {
    let v = raw.trim();
    match v.to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "true" | "t" | "1" | "yes" | "y" => Ok(Some(true)),
        "false" | "f" | "0" | "no" | "n" => Ok(Some(false)),
        _ => Err(LoadError::BadBoolean {
            row,
            column: column.to_string(),
            value: v.to_string(),
        }),
    }
}

/// Loads SimpleQA-Verified from a comma-delimited file with a header row.
/// Rows are numbered from 1 (the header is row 0) in error messages.
pub fn load_simpleqa_verified(
    path: &Path,
    columns: &ColumnMapping,
) -> Result<Vec<QuestionRecord>, LoadError> {
    let csv_err = |source| LoadError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => LoadError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => csv_err(e),
        })?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let index_of = |field: &'static str, column: &str| {
        headers
            .iter()
            .position(|h| h.trim() == column)
            .ok_or_else(|| LoadError::MissingColumn {
                path: path.to_path_buf(),
                field,
                column: column.to_string(),
            })
    };
    let question_ix = index_of("question", &columns.question)?;
    let answer_ix = index_of("answer", &columns.answer)?;
    let reasoning_ix = index_of("requires_reasoning", &columns.requires_reasoning)?;
    let multi_ix = index_of("multi_step", &columns.multi_step)?;
    let id_ix = match &columns.id {
        Some(c) => Some(index_of("id", c)?),
        None => None,
    };
    let topic_ix = match &columns.topic {
        Some(c) => Some(index_of("topic", c)?),
        None => None,
    };

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(csv_err)?;
        let get = |ix: usize| row.get(ix).unwrap_or("");
        let id = match id_ix {
            Some(ix) => get(ix).trim().to_string(),
            None => row_no.to_string(),
        };
        if !seen.insert(id.clone()) {
            return Err(LoadError::DuplicateId { row: row_no, id });
        }
        let requires_reasoning = parse_flag(get(reasoning_ix), row_no, &columns.requires_reasoning)?;
        let multi_step = parse_flag(get(multi_ix), row_no, &columns.multi_step)?;
        let topic = topic_ix
            .map(|ix| get(ix).trim().to_string())
            .filter(|t| !t.is_empty());
        out.push(QuestionRecord::simpleqa(
            id,
            get(question_ix),
            get(answer_ix),
            requires_reasoning,
            multi_step,
            topic,
        ));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct EntityRow {
    question: String,
    answers: Vec<String>,
}

fn relation_file(root: &Path, code: &str) -> Option<PathBuf> {
    [
        root.join(format!("{code}.test.json")),
        root.join("test").join(format!("{code}.test.json")),
        root.join(format!("{code}.json")),
        root.join(format!("{code}.jsonl")),
    ]
    .into_iter()
    .find(|p| p.is_file())
}

fn read_entity_rows(path: &Path) -> Result<Vec<EntityRow>, LoadError> {
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |message: String| LoadError::BadRelationFile {
        path: path.to_path_buf(),
        message,
    };
    if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(format!("line {}: {e}", i + 1))))
            .collect()
    }
}

/// Loads `per_relation` questions from each requested EntityQuestions
/// relation. Each relation file is shuffled with SplitMix64 seeded by
/// `seed.wrapping_add(fnv1a64(code))` (Fisher–Yates, last index first) and
/// the first `per_relation` usable rows are kept. Ids are `<code>-<row>`,
/// where `<row>` is the 0-based position in the source file.
pub fn load_entityquestions(
    root: &Path,
    relations: &[String],
    per_relation: usize,
    seed: u64,
) -> Result<Vec<QuestionRecord>, LoadError> {
    for code in relations {
        if !ENTITY_RELATIONS.contains(&code.as_str()) {
            return Err(LoadError::UnknownRelation(code.clone()));
        }
    }
    let mut out = Vec::with_capacity(per_relation * relations.len());
    if per_relation == 0 {
        return Ok(out);
    }
    for code in relations {
        let path = relation_file(root, code).ok_or_else(|| LoadError::MissingRelationFile {
            relation: code.clone(),
            root: root.to_path_buf(),
        })?;
        let rows = read_entity_rows(&path)?;
        let mut usable: Vec<(usize, EntityRow)> = rows
            .into_iter()
            .enumerate()
            .filter(|(_, r)| r.answers.iter().any(|a| !a.trim().is_empty()))
            .collect();
        if usable.len() < per_relation {
            return Err(LoadError::NotEnoughExamples {
                relation: code.clone(),
                available: usable.len(),
                requested: per_relation,
            });
        }
        let mut rng = SplitMix64::new(seed.wrapping_add(fnv1a64(code.as_bytes())));
        rng.shuffle(&mut usable);
        for (row, r) in usable.into_iter().take(per_relation) {
            let gold = r
                .answers
                .iter()
                .find(|a| !a.trim().is_empty())
                .map(|a| a.trim().to_string())
                .unwrap_or_default();
            out.push(QuestionRecord::entity(
                format!("{code}-{row}"),
                code.clone(),
                r.question,
                gold,
            ));
        }
    }
    Ok(out)
}
