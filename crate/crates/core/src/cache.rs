//! Content-addressed cache of backend responses.
//!
//! Keys are the SHA-256 of a canonical JSON encoding of everything that can
//! change a response: profile id, model, call kind, reasoning mode, the full
//! prompt, any trace override and its injection route, sampling parameters,
//! the output budget, search use, and the sample index. Entries are appended
//! to a JSONL file and loaded back on open, so a replay against the same
//! file issues no backend calls.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{ChatRequest, ChatResponse};
use crate::jsonl;

pub fn cache_key(request: &ChatRequest) -> String {
    let canonical = serde_json::to_vec(request).expect("request serializes");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    response: ChatResponse,
}

pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, ChatResponse>>,
    writer: Mutex<Option<File>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    /// Purely in-memory cache.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Opens (or creates) a JSONL-backed cache. A torn final line left by an
    /// interrupted write is discarded.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        for line in jsonl::read_records::<CacheLine>(path)? {
            entries.entry(line.key).or_insert(line.response);
        }
        let file = jsonl::open_append(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    /// Loads an existing cache without opening it for writing. New entries
    /// stay in memory. A missing file yields an empty cache.
    pub fn load_read_only(path: &Path) -> std::io::Result<Self> {
        let cache = Self::in_memory();
        {
            let mut entries = cache.entries.write().unwrap();
            for line in jsonl::read_records::<CacheLine>(path)? {
                entries.entry(line.key).or_insert(line.response);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            ..cache
        })
    }

    /// Presence check that does not count towards hit/miss statistics.
    pub fn contains(&self, key: &str) -> bool {
        self.entries.read().unwrap().contains_key(key)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        let found = self.entries.read().unwrap().get(key).cloned();
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    /// Inserts unless the key is already present (first writer wins) and
    /// returns the stored value.
    pub fn insert(&self, key: &str, response: ChatResponse) -> std::io::Result<ChatResponse> {
        let mut entries = self.entries.write().unwrap();
        if let Some(existing) = entries.get(key) {
            return Ok(existing.clone());
        }
        if let Some(file) = self.writer.lock().unwrap().as_mut() {
            jsonl::append_record(
                file,
                &CacheLine {
                    key: key.to_string(),
                    response: response.clone(),
                },
            )?;
        }
        entries.insert(key.to_string(), response.clone());
        Ok(response)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}
