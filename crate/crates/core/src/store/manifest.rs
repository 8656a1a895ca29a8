//! JSONL manifest of example images.
//!
//! One object per line:
//! `{"id": str, "uri": str, "labels": [str], "split": "train"|"validation"|"test", "vector": [float]?}`.
//! `vector` may be omitted when an embedder backend fills it in.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub uri: String,
    pub labels: Vec<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest line {line}: `labels` is empty")]
    EmptyLabels { line: usize },
    #[error("duplicate id(s) in manifest: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("reading manifest: {0}")]
    Io(#[from] std::io::Error),
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    parse_manifest(&fs::read_to_string(path)?)
}

/// Parses manifest text. Blank lines are skipped; line numbers are 1-based.
/// Every duplicated id is reported, each once, in first-seen order.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        if entry.labels.is_empty() {
            return Err(ManifestError::EmptyLabels { line: line_no });
        }
        entries.push(entry);
    }
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut dups = Vec::new();
    for e in &entries {
        let count = seen.entry(e.id.as_str()).or_insert(0);
        *count += 1;
        if *count == 2 {
            dups.push(e.id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(ManifestError::DuplicateIds(dups));
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> std::io::Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}
