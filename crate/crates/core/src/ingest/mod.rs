//! Extraction from simulated sources into the Bronze archive.
//!
//! Three extraction patterns are supported, each with its own cursor meaning:
//!
//! * `state_based`: mutable entities, extracted by their `updated_at` marker;
//! * `event_based`: append-only events, extracted in whole windows aligned to
//!   the Gold bucket granularity;
//! * `snapshot`: full-state snapshots, one per `snapshot_interval`, applied once.
//!
//! A run is all-or-nothing: cursors advance only after every task in the plan
//! was archived. Bronze identity excludes the wall-clock `ingested_at`, so
//! re-running a window archives nothing new.

mod source;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::digest::KeyHasher;
use crate::faults::{InjectedCrash, SharedFaults};
use crate::store::{Store, StoreError};
use crate::time::{TimeRange, Timestamp, MILLIS_PER_DAY};

pub use source::{fetch_from_fixture, snapshot_intervals, SourceReadError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionPattern {
    StateBased,
    EventBased,
    Snapshot,
}

/// Extraction position. The variant always matches the source's pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "at", rename_all = "snake_case")]
pub enum Cursor {
    /// Last-seen `updated_at` marker; rows at or after it are pending.
    UpdatedSince(Timestamp),
    /// End of the last fully ingested event window.
    HighWater(Timestamp),
    /// Start of the last applied snapshot interval, if any.
    Snapshot(Option<Timestamp>),
}

impl Cursor {
    pub fn initial(pattern: ExtractionPattern, start: Timestamp) -> Cursor {
        match pattern {
            ExtractionPattern::StateBased => Cursor::UpdatedSince(start),
            ExtractionPattern::EventBased => Cursor::HighWater(start),
            ExtractionPattern::Snapshot => Cursor::Snapshot(None),
        }
    }

    pub fn matches(&self, pattern: ExtractionPattern) -> bool {
        matches!(
            (self, pattern),
            (Cursor::UpdatedSince(_), ExtractionPattern::StateBased)
                | (Cursor::HighWater(_), ExtractionPattern::EventBased)
                | (Cursor::Snapshot(_), ExtractionPattern::Snapshot)
        )
    }

    fn position(&self) -> Option<Timestamp> {
        match *self {
            Cursor::UpdatedSince(t) | Cursor::HighWater(t) => Some(t),
            Cursor::Snapshot(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDescriptor {
    pub source_id: String,
    pub pattern: ExtractionPattern,
    pub fixture_path: PathBuf,
    pub cursor: Cursor,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FetchTask {
    pub source_id: String,
    pub pattern: ExtractionPattern,
    pub window: TimeRange,
    /// Cursor value once this task's window is archived.
    #[serde(skip)]
    pub next_cursor: Option<Cursor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchPlan {
    pub tasks: Vec<FetchTask>,
    pub parallelism: usize,
}

impl FetchPlan {
    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// One archived source response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BronzeRecord {
    pub bronze_id: String,
    pub source_id: String,
    pub pattern: ExtractionPattern,
    pub fetch_window: TimeRange,
    #[serde(with = "payload_b64")]
    pub payload: Vec<u8>,
    /// Wall-clock metadata; not part of identity.
    pub ingested_at: Timestamp,
}

pub fn bronze_id(source_id: &str, payload: &[u8], window: &TimeRange) -> String {
    KeyHasher::new("bronze")
        .str(source_id)
        .bytes(payload)
        .i64(window.start.as_millis())
        .i64(window.end.as_millis())
        .finish()
}

impl BronzeRecord {
    pub fn new(
        source_id: &str,
        pattern: ExtractionPattern,
        fetch_window: TimeRange,
        payload: Vec<u8>,
        ingested_at: Timestamp,
    ) -> Self {
        BronzeRecord {
            bronze_id: bronze_id(source_id, &payload, &fetch_window),
            source_id: source_id.to_string(),
            pattern,
            fetch_window,
            payload,
            ingested_at,
        }
    }
}

mod payload_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("clock skew: now {now} is earlier than cursor {cursor} of source {source_id}")]
    ClockSkew {
        source_id: String,
        now: Timestamp,
        cursor: Timestamp,
    },
    #[error("source {source_id} unavailable: {reason}")]
    SourceUnavailable { source_id: String, reason: String },
    #[error("{} of {total} fetch tasks failed; cursors not advanced", failures.len())]
    PartialFailure {
        total: usize,
        archived: usize,
        failures: Vec<(String, String)>,
    },
    #[error("invalid sources configuration: {0}")]
    Config(String),
    #[error("cursor state: {0}")]
    CursorState(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Crash(#[from] InjectedCrash),
}

/// Builds one task per source with pending data up to `now`.
///
/// Event windows end at `now` floored to `granularity`, so only complete
/// windows are extracted. Snapshot sources get a task only when the fixture
/// holds an interval newer than the cursor and not after `now`.
pub fn plan_fetch(
    sources: &[SourceDescriptor],
    now: Timestamp,
    granularity: Duration,
    parallelism: usize,
) -> Result<FetchPlan, IngestError> {
    let mut tasks = Vec::new();
    for src in sources {
        if !src.cursor.matches(src.pattern) {
            return Err(IngestError::CursorState(format!(
                "cursor {:?} does not match pattern of {}",
                src.cursor, src.source_id
            )));
        }
        if let Some(pos) = src.cursor.position() {
            if now < pos {
                return Err(IngestError::ClockSkew {
                    source_id: src.source_id.clone(),
                    now,
                    cursor: pos,
                });
            }
        }
        let task = match src.cursor {
            Cursor::UpdatedSince(from) => (from < now).then(|| FetchTask {
                source_id: src.source_id.clone(),
                pattern: src.pattern,
                window: TimeRange::new(from, now),
                next_cursor: Some(Cursor::UpdatedSince(now)),
            }),
            Cursor::HighWater(from) => {
                let end = now.floor_to(granularity);
                (from < end).then(|| FetchTask {
                    source_id: src.source_id.clone(),
                    pattern: src.pattern,
                    window: TimeRange::new(from, end),
                    next_cursor: Some(Cursor::HighWater(end)),
                })
            }
            Cursor::Snapshot(last) => {
                let intervals = snapshot_intervals(&src.fixture_path).map_err(|e| {
                    IngestError::SourceUnavailable {
                        source_id: src.source_id.clone(),
                        reason: e.to_string(),
                    }
                })?;
                let fresh: Vec<Timestamp> = intervals
                    .into_iter()
                    .filter(|i| last.is_none_or(|l| *i > l) && *i <= now)
                    .collect();
                match (fresh.first(), fresh.last()) {
                    (Some(&first), Some(&newest)) => Some(FetchTask {
                        source_id: src.source_id.clone(),
                        pattern: src.pattern,
                        window: TimeRange::new(first, Timestamp::from_millis(newest.as_millis() + MILLIS_PER_DAY)),
                        next_cursor: Some(Cursor::Snapshot(Some(newest))),
                    }),
                    _ => None,
                }
            }
        };
        tasks.extend(task);
    }
    tasks.sort();
    Ok(FetchPlan {
        tasks,
        parallelism: parallelism.max(1),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchOutcome {
    /// Every record produced by the plan, sorted by `(source_id, window.start)`.
    pub records: Vec<BronzeRecord>,
    /// How many of them were not already archived.
    pub newly_archived: usize,
}

/// Runs every task (concurrently, up to `plan.parallelism`) and archives the
/// results in deterministic order. A failing task fails the run; the records
/// of successful tasks are still archived so a retry finds them.
pub fn execute_fetch(
    plan: &FetchPlan,
    sources: &[SourceDescriptor],
    store: &Store,
    ingested_at: Timestamp,
) -> Result<FetchOutcome, IngestError> {
    let by_id: BTreeMap<&str, &SourceDescriptor> =
        sources.iter().map(|s| (s.source_id.as_str(), s)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism.max(1))
        .build()
        .map_err(|e| IngestError::Config(e.to_string()))?;
    let results: Vec<Result<BronzeRecord, (String, String)>> = pool.install(|| {
        use rayon::prelude::*;
        plan.tasks
            .par_iter()
            .map(|task| {
                let src = by_id
                    .get(task.source_id.as_str())
                    .ok_or_else(|| (task.source_id.clone(), "unknown source".to_string()))?;
                let payload = fetch_from_fixture(&src.fixture_path, src.pattern, &task.window)
                    .map_err(|e| (task.source_id.clone(), e.to_string()))?;
                Ok(BronzeRecord::new(
                    &task.source_id,
                    task.pattern,
                    task.window,
                    payload,
                    ingested_at,
                ))
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    records.sort_by(|a, b| {
        (&a.source_id, a.fetch_window.start).cmp(&(&b.source_id, b.fetch_window.start))
    });
    let newly_archived = store.append_bronze(&records)?;
    if !failures.is_empty() {
        failures.sort();
        if records.is_empty() && failures.len() == 1 {
            let (source_id, reason) = failures.remove(0);
            return Err(IngestError::SourceUnavailable { source_id, reason });
        }
        return Err(IngestError::PartialFailure {
            total: plan.tasks.len(),
            archived: newly_archived,
            failures,
        });
    }
    Ok(FetchOutcome {
        records,
        newly_archived,
    })
}

/// Cursor values after `plan` fully succeeded.
pub fn advance_cursors(sources: &[SourceDescriptor], plan: &FetchPlan) -> BTreeMap<String, Cursor> {
    let mut out: BTreeMap<String, Cursor> = sources
        .iter()
        .map(|s| (s.source_id.clone(), s.cursor))
        .collect();
    for task in &plan.tasks {
        if let Some(c) = task.next_cursor {
            out.insert(task.source_id.clone(), c);
        }
    }
    out
}

/// Persisted cursors plus the run that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CursorState {
    pub run_id: u64,
    pub cursors: BTreeMap<String, Cursor>,
    pub last_run: Option<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: u64,
    pub now: Timestamp,
    pub tasks: Vec<FetchTask>,
    pub newly_archived: usize,
}

impl CursorState {
    pub const FILE: &'static str = "cursors.json";

    pub fn load(dir: &Path) -> Result<CursorState, IngestError> {
        let path = dir.join(Self::FILE);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| IngestError::CursorState(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(CursorState::default()),
            Err(e) => Err(IngestError::CursorState(e.to_string())),
        }
    }

    /// Replaces the cursor file atomically.
    pub fn save(&self, dir: &Path, faults: &SharedFaults) -> Result<(), IngestError> {
        let bytes = serde_json::to_vec_pretty(self).expect("cursor state serializes");
        crate::store::write_atomic(&dir.join(Self::FILE), &bytes, faults, "ingest.cursor_tmp")
            .map_err(|e| match e {
                StoreError::Crashed(c) => IngestError::Crash(c),
                other => IngestError::Store(other),
            })
    }
}

/// `sources.toml`:
///
/// ```text
/// [[source]]
/// id = "crash_events"
/// pattern = "event_based"
/// fixture = "fixtures/crash_events.jsonl"
/// start = "2024-01-01T00:00:00Z"
/// ```
///
/// Relative fixture paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcesConfig {
    #[serde(rename = "source", default)]
    pub sources: Vec<SourceEntry>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub id: String,
    pub pattern: ExtractionPattern,
    pub fixture: PathBuf,
    pub start: Option<Timestamp>,
}

impl SourcesConfig {
    pub fn load(path: &Path) -> Result<SourcesConfig, IngestError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IngestError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: SourcesConfig =
            toml::from_str(&text).map_err(|e| IngestError::Config(e.message().to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for s in &mut cfg.sources {
            if s.fixture.is_relative() {
                s.fixture = base.join(&s.fixture);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.sources.is_empty() {
            return Err(IngestError::Config("no sources declared".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sources {
            if !seen.insert(&s.id) {
                return Err(IngestError::Config(format!("duplicate source id {}", s.id)));
            }
            if s.pattern != ExtractionPattern::Snapshot && s.start.is_none() {
                return Err(IngestError::Config(format!("source {} needs a start", s.id)));
            }
        }
        Ok(())
    }

    /// Descriptors with cursors from `state`, falling back to each source's start.
    pub fn descriptors(&self, state: &CursorState) -> Result<Vec<SourceDescriptor>, IngestError> {
        self.sources
            .iter()
            .map(|s| {
                let cursor = match state.cursors.get(&s.id) {
                    Some(c) if c.matches(s.pattern) => *c,
                    Some(c) => {
                        return Err(IngestError::CursorState(format!(
                            "stored cursor {c:?} does not match pattern of {}",
                            s.id
                        )))
                    }
                    None => Cursor::initial(s.pattern, s.start.unwrap_or_default()),
                };
                Ok(SourceDescriptor {
                    source_id: s.id.clone(),
                    pattern: s.pattern,
                    fixture_path: s.fixture.clone(),
                    cursor,
                })
            })
            .collect()
    }
}
