use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Denied,
    Error,
}

/// One tool invocation attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub timestamp: Timestamp,
    pub principal_id: String,
    pub tool_name: String,
    /// Canonical JSON of the arguments as received.
    pub arguments: String,
    pub outcome: Outcome,
    pub cache_hit: bool,
    pub registry_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuditRecord {
    Call(AuditEntry),
    Reload {
        timestamp: Timestamp,
        old_registry_hash: String,
        new_registry_hash: String,
        invalidated: usize,
    },
}

/// Append-only audit trail, kept in memory and optionally mirrored to a
/// line-delimited file.
#[derive(Default)]
pub struct AuditLog {
    inner: Mutex<(Vec<AuditRecord>, Option<File>)>,
}

impl AuditLog {
    pub fn new() -> AuditLog {
        AuditLog::default()
    }

    pub fn with_file(path: &Path) -> std::io::Result<AuditLog> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            inner: Mutex::new((Vec::new(), Some(f))),
        })
    }

    pub fn append(&self, record: AuditRecord) {
        let mut inner = self.inner.lock();
        if let Some(f) = inner.1.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("audit record serializes");
            line.push(b'\n');
            if let Err(e) = f.write_all(&line) {
                log::error!("audit log write failed: {e}");
            }
        }
        inner.0.push(record);
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.inner.lock().0.clone()
    }

    pub fn calls(&self) -> Vec<AuditEntry> {
        self.inner
            .lock()
            .0
            .iter()
            .filter_map(|r| match r {
                AuditRecord::Call(e) => Some(e.clone()),
                AuditRecord::Reload { .. } => None,
            })
            .collect()
    }

    pub fn call_count(&self) -> usize {
        self.inner
            .lock()
            .0
            .iter()
            .filter(|r| matches!(r, AuditRecord::Call(_)))
            .count()
    }

    pub fn flush(&self) {
        if let Some(f) = self.inner.lock().1.as_mut() {
            let _ = f.sync_data();
        }
    }
}
