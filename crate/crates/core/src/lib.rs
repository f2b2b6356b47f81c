//! Harness for measuring how reasoning traces change closed-book factual
//! recall in hybrid reasoning models.
//!
//! The crate covers loading question sets, sampling answers under a set of
//! trace interventions, grading, fact extraction and verification, pass@k
//! estimation, and the downstream analyses. Every backend call goes through
//! [`backends::LlmClient`], which caches responses so completed runs replay
//! without network access.

pub mod analysis;
pub mod backends;
pub mod cache;
pub mod config;
pub mod datasets;
pub mod estimators;
pub mod exec;
pub mod factpipe;
pub mod grading;
pub mod interventions;
pub mod jsonl;
pub mod pipeline;
pub mod prompts;
pub mod rng;
pub mod store;
pub mod tokens;
pub mod types;

pub use types::*;
