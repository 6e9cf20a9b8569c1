//! Fixture-backed source simulators.
//!
//! A fixture is line-delimited JSON. Fetching a window returns the matching
//! lines byte-for-byte, each terminated by `\n`, exactly as a paginated API
//! response would be archived. Lines whose extraction marker cannot be read
//! are returned with every fetch; Silver quarantines them.

use std::path::Path;

use serde_json::Value;

use super::ExtractionPattern;
use crate::time::{TimeRange, Timestamp};

#[derive(Debug, thiserror::Error)]
pub enum SourceReadError {
    #[error("fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn read_fixture(path: &Path) -> Result<String, SourceReadError> {
    std::fs::read_to_string(path).map_err(|source| SourceReadError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn marker_field(pattern: ExtractionPattern) -> &'static str {
    match pattern {
        ExtractionPattern::StateBased => "updated_at",
        ExtractionPattern::EventBased => "ts",
        ExtractionPattern::Snapshot => "snapshot_interval",
    }
}

fn marker(line: &str, pattern: ExtractionPattern) -> Option<Timestamp> {
    let v: Value = serde_json::from_str(line).ok()?;
    Timestamp::parse(v.get(marker_field(pattern))?.as_str()?).ok()
}

pub fn fetch_from_fixture(
    path: &Path,
    pattern: ExtractionPattern,
    window: &TimeRange,
) -> Result<Vec<u8>, SourceReadError> {
    let text = read_fixture(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let keep = match marker(line, pattern) {
            Some(t) => window.contains(t),
            None => true,
        };
        if keep {
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
    }
    Ok(out)
}

/// Distinct snapshot intervals in a snapshot fixture, ascending.
pub fn snapshot_intervals(path: &Path) -> Result<Vec<Timestamp>, SourceReadError> {
    let text = read_fixture(path)?;
    let mut out: Vec<Timestamp> = text
        .lines()
        .filter_map(|l| marker(l, ExtractionPattern::Snapshot))
        .collect();
    out.sort();
    out.dedup();
    Ok(out)
}
