//! Errors and quarantine records shared by the synthesis stages.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::json::JsonExtractError;
use crate::model::ModelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("unparseable completion: {0}")]
    Unparseable(String),
    #[error("all {count} item(s) failed in stage {stage}")]
    AllFailed { stage: String, count: usize },
    #[error("all candidates invalid: {}", reasons.join("; "))]
    AllCandidatesInvalid { reasons: Vec<String> },
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl From<JsonExtractError> for StageError {
    fn from(e: JsonExtractError) -> Self {
        Self::Unparseable(e.to_string())
    }
}

/// An item whose model output failed parsing or validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    /// Image id, pair, group or path identifying the failed item.
    pub item_id: String,
    pub stage: String,
    pub raw: String,
    pub error: String,
}

impl QuarantineEntry {
    pub fn new(item_id: impl Into<String>, stage: &str, raw: impl Into<String>, error: impl ToString) -> Self {
        Self {
            item_id: item_id.into(),
            stage: stage.to_string(),
            raw: raw.into(),
            error: error.to_string(),
        }
    }
}

/// Appends entries to a JSONL quarantine file.
pub fn append_quarantine(path: &Path, entries: &[QuarantineEntry]) -> std::io::Result<()> {
    if entries.is_empty() {
        return Ok(());
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for e in entries {
        let line = crate::model::canonical_json(e).map_err(std::io::Error::other)?;
        writeln!(f, "{line}")?;
    }
    f.flush()
}
