//! Dataset shards (`*.visc.jsonl`): persistence, statistics, subset sampling
//! and conversation export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::canonical_json;
use crate::question::{QuestionType, SynthesisRecord};
use crate::rng;

pub const SHARD_SUFFIX: &str = ".visc.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("record {index} ({id}) is invalid: {reason}")]
    InvalidRecord { index: usize, id: String, reason: String },
    #[error("requested {requested} records but only {available} are available")]
    TooMany { requested: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ReadReport {
    pub records: Vec<SynthesisRecord>,
    pub errors: Vec<LineError>,
}

/// Validates every record, then writes them atomically as canonical JSONL.
pub fn write_records(records: &[SynthesisRecord], path: &Path) -> Result<usize, DatasetError> {
    let mut buf = String::new();
    for (index, r) in records.iter().enumerate() {
        r.validate().map_err(|reason| DatasetError::InvalidRecord {
            index,
            id: r.id.clone(),
            reason,
        })?;
        buf.push_str(&canonical_json(r).map_err(std::io::Error::other)?);
        buf.push('\n');
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(buf.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(records.len())
}

/// Reads a shard line by line; bad lines are reported, not fatal.
pub fn read_records(path: &Path) -> Result<ReadReport, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let mut report = ReadReport::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<SynthesisRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r));
        match parsed {
            Ok(r) => report.records.push(r),
            Err(message) => report.errors.push(LineError { line: n + 1, message }),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub open_ended: usize,
    pub single_choice: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub record_count: usize,
    pub image_count_histogram: BTreeMap<usize, usize>,
    pub path_length_histogram: BTreeMap<usize, usize>,
    pub type_counts: TypeCounts,
    pub share_2_to_5: f64,
}

pub fn stats(records: &[SynthesisRecord]) -> CorpusStats {
    let mut s = CorpusStats {
        record_count: records.len(),
        ..Default::default()
    };
    for r in records {
        *s.image_count_histogram.entry(r.images.len()).or_default() += 1;
        *s.path_length_histogram.entry(r.meta.path_length).or_default() += 1;
        match r.question_type {
            QuestionType::OpenEnded => s.type_counts.open_ended += 1,
            QuestionType::SingleChoice => s.type_counts.single_choice += 1,
        }
    }
    if !records.is_empty() {
        let mid: usize = (2..=5).filter_map(|k| s.image_count_histogram.get(&k)).sum();
        s.share_2_to_5 = mid as f64 / records.len() as f64;
    }
    s
}

/// Uniform sample of `n` records without replacement, ordered by id.
pub fn sample_subset(records: &[SynthesisRecord], n: usize, seed: u64) -> Result<Vec<SynthesisRecord>, DatasetError> {
    if n > records.len() {
        return Err(DatasetError::TooMany {
            requested: n,
            available: records.len(),
        });
    }
    let mut r = rng::seeded(seed);
    let mut picked: Vec<SynthesisRecord> = rng::sample_indices(&mut r, records.len(), n)
        .into_iter()
        .map(|i| records[i].clone())
        .collect();
    picked.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub from: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub images: Vec<String>,
    pub conversations: Vec<Turn>,
}

pub const IMAGE_TOKEN: &str = "<image>";

fn choice_label(i: usize) -> char {
    (b'A' + (i % 26) as u8) as char
}

pub fn export_conversation(r: &SynthesisRecord) -> Conversation {
    let mut user = String::new();
    for _ in &r.images {
        user.push_str(IMAGE_TOKEN);
        user.push('\n');
    }
    user.push_str(&r.question);
    if let Some(choices) = &r.choices {
        for (i, c) in choices.iter().enumerate() {
            user.push_str(&format!("\n{}. {c}", choice_label(i)));
        }
    }
    let mut assistant = String::new();
    for (i, step) in r.steps.iter().enumerate() {
        let focus: Vec<String> = step.focus.iter().map(|f| (f + 1).to_string()).collect();
        assistant.push_str(&format!(
            "Sub-question {}: {}\nFocus: images {}\nAnswer: {}\n\n",
            i + 1,
            step.sub_question,
            focus.join(", "),
            step.answer
        ));
    }
    assistant.push_str(&format!("Final answer: {}", r.final_answer));
    Conversation {
        id: r.id.clone(),
        images: r.images.iter().map(|i| i.path.clone()).collect(),
        conversations: vec![
            Turn {
                from: "human".into(),
                value: user,
            },
            Turn {
                from: "gpt".into(),
                value: assistant,
            },
        ],
    }
}

pub fn export_conversations(records: &[SynthesisRecord]) -> Vec<Conversation> {
    records.iter().map(export_conversation).collect()
}
