//! Embedded, time-partitioned store for the Bronze, Silver and Gold layers.
//!
//! Layout under the data directory:
//!
//! ```text
//! bronze/<partition_start_ms>/segment-N.log
//! silver/<partition_start_ms>/segment-N.log
//! gold/<partition_start_ms>/segment-N.log
//! changes.log
//! manifest
//! ```
//!
//! Every write is a batch. Frames are tagged with the batch number, appended
//! and synced, then the manifest (holding the last committed batch) is
//! replaced atomically. Recovery drops torn tails and frames from batches the
//! manifest never committed, so a crash at any point leaves either the state
//! before or after the interrupted batch.

mod changes;
mod segment;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::faults::{Faults, InjectedCrash, SharedFaults};
use crate::ingest::BronzeRecord;
use crate::refine::{GoldArtifact, QuarantinedRecord, SilverRecord, TransformCatalog};
use crate::time::{Timestamp, MILLIS_PER_DAY};

pub use changes::{ChangeEvent, ChangeKind, Subscription};
use changes::ChangeHub;
use segment::{encode_frame, list_segments, read_frames, segment_name, ReadOutcome, SegmentWriter};

pub const MANIFEST_FORMAT: u32 = 1;
const MILLIS_PER_HOUR: i64 = 3_600_000;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checksum mismatch in {path} at offset {offset}; rebuild by replaying from Bronze")]
    CorruptSegment { path: String, offset: u64 },
    #[error("invalid range: start {start} is not before end {end}")]
    InvalidRange { start: Timestamp, end: Timestamp },
    #[error("sequence {requested} is no longer retained (oldest is {oldest_retained}); resync from a Gold snapshot")]
    SequenceTruncated { requested: u64, oldest_retained: u64 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("malformed record: {0}")]
    Decode(String),
    #[error("store opened read-only")]
    ReadOnly,
    #[error("store is unusable after a failed write; reopen it")]
    Poisoned,
    #[error(transparent)]
    Crashed(#[from] InjectedCrash),
}

impl StoreError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> StoreError {
        StoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Bronze,
    Silver,
    Gold,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Bronze, Layer::Silver, Layer::Gold];

    pub fn dir_name(self) -> &'static str {
        match self {
            Layer::Bronze => "bronze",
            Layer::Silver => "silver",
            Layer::Gold => "gold",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub bronze_span_ms: i64,
    pub silver_span_ms: i64,
    pub gold_span_ms: i64,
    pub change_retention: usize,
    /// A new segment is started once the active one reaches this size.
    pub segment_max_bytes: u64,
    /// Rewrite a partition once it holds this many superseded frames.
    pub compact_after_dead_frames: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            bronze_span_ms: MILLIS_PER_HOUR,
            silver_span_ms: MILLIS_PER_HOUR,
            gold_span_ms: MILLIS_PER_DAY,
            change_retention: 100_000,
            segment_max_bytes: 8 << 20,
            compact_after_dead_frames: 4096,
        }
    }
}

impl StoreConfig {
    pub fn span(&self, layer: Layer) -> i64 {
        match layer {
            Layer::Bronze => self.bronze_span_ms,
            Layer::Silver => self.silver_span_ms,
            Layer::Gold => self.gold_span_ms,
        }
    }

    /// Start of the partition holding a record with time `t`.
    pub fn partition(&self, layer: Layer, t: Timestamp) -> i64 {
        let span = self.span(layer);
        t.as_millis().div_euclid(span) * span
    }
}

/// Key order of the Gold index: platform, metric, version, bucket start.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct IndexKey {
    pub platform: String,
    pub metric_name: String,
    pub transform_version: u32,
    pub bucket_start: Timestamp,
}

impl IndexKey {
    fn of(a: &GoldArtifact) -> IndexKey {
        IndexKey {
            platform: a.platform.clone(),
            metric_name: a.metric_name.clone(),
            transform_version: a.transform_version,
            bucket_start: a.bucket_start,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct UpsertReport {
    pub inserted: u64,
    pub replaced: u64,
    pub unchanged: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SilverReport {
    pub inserted: u64,
    pub replaced: u64,
    pub unchanged: u64,
    pub quarantined: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub bronze: usize,
    pub silver: usize,
    pub quarantined: usize,
    pub gold: usize,
    pub gold_partitions: usize,
    pub committed_batch: u64,
    pub next_sequence: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub partitions_scanned: u64,
}

/// Read side of the Gold layer. Serving code only ever sees this.
pub trait GoldReader: Send + Sync {
    fn query_gold(
        &self,
        metric_name: &str,
        platform: &str,
        t1: Timestamp,
        t2: Timestamp,
        version: u32,
    ) -> Result<Vec<GoldArtifact>, StoreError>;

    fn current_version(&self, series: &str) -> u32;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "t", content = "r", rename_all = "snake_case")]
enum Entry {
    Bronze(BronzeRecord),
    Silver(SilverRecord),
    Quarantine(QuarantinedRecord),
    Gold(GoldArtifact),
}

impl Entry {
    fn placement(&self, cfg: &StoreConfig) -> (Layer, i64) {
        let (layer, t) = match self {
            Entry::Bronze(b) => (Layer::Bronze, b.fetch_window.start),
            Entry::Silver(s) => (Layer::Silver, s.unified_ts),
            Entry::Quarantine(q) => (Layer::Silver, q.observed_at),
            Entry::Gold(g) => (Layer::Gold, g.bucket_start),
        };
        (layer, cfg.partition(layer, t))
    }
}

#[derive(Serialize, Deserialize)]
struct DataFrame {
    b: u64,
    e: Entry,
}

#[derive(Serialize, Deserialize)]
struct ChangeFrame {
    b: u64,
    c: ChangeEvent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    committed_batch: u64,
    next_sequence: u64,
    catalog: TransformCatalog,
    /// Lowest live segment per partition directory ("gold/86400000").
    #[serde(default)]
    segment_base: BTreeMap<String, u32>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            format: MANIFEST_FORMAT,
            committed_batch: 0,
            next_sequence: 1,
            catalog: TransformCatalog::default(),
            segment_base: BTreeMap::new(),
        }
    }
}

#[derive(Default)]
struct GoldPartition {
    records: BTreeMap<String, GoldArtifact>,
    index: BTreeMap<IndexKey, String>,
}

#[derive(Default)]
struct State {
    bronze: BTreeMap<i64, BTreeMap<String, BronzeRecord>>,
    silver: BTreeMap<i64, BTreeMap<String, SilverRecord>>,
    quarantine: BTreeMap<i64, BTreeMap<String, QuarantinedRecord>>,
    gold: BTreeMap<i64, GoldPartition>,
    catalog: TransformCatalog,
    /// Frames on disk per partition, live or superseded.
    frames: BTreeMap<(Layer, i64), u64>,
}

impl State {
    fn apply(&mut self, entry: Entry, partition: i64) {
        match entry {
            Entry::Bronze(b) => {
                self.bronze
                    .entry(partition)
                    .or_default()
                    .entry(b.bronze_id.clone())
                    .or_insert(b);
            }
            Entry::Silver(s) => {
                self.silver
                    .entry(partition)
                    .or_default()
                    .insert(s.silver_id.clone(), s);
            }
            Entry::Quarantine(q) => {
                self.quarantine
                    .entry(partition)
                    .or_default()
                    .insert(q.quarantine_id.clone(), q);
            }
            Entry::Gold(g) => {
                let part = self.gold.entry(partition).or_default();
                part.index.insert(IndexKey::of(&g), g.gold_key.clone());
                part.records.insert(g.gold_key.clone(), g);
            }
        }
    }

    fn find_gold(&self, key: &str, partition: i64) -> Option<&GoldArtifact> {
        self.gold.get(&partition)?.records.get(key)
    }

    fn live_records(&self, layer: Layer, partition: i64) -> u64 {
        match layer {
            Layer::Bronze => self.bronze.get(&partition).map_or(0, |p| p.len()) as u64,
            Layer::Silver => {
                (self.silver.get(&partition).map_or(0, |p| p.len())
                    + self.quarantine.get(&partition).map_or(0, |p| p.len())) as u64
            }
            Layer::Gold => self.gold.get(&partition).map_or(0, |p| p.records.len()) as u64,
        }
    }

    fn partition_entries(&self, layer: Layer, partition: i64) -> Vec<Entry> {
        match layer {
            Layer::Bronze => self
                .bronze
                .get(&partition)
                .into_iter()
                .flat_map(|p| p.values().cloned().map(Entry::Bronze))
                .collect(),
            Layer::Silver => self
                .silver
                .get(&partition)
                .into_iter()
                .flat_map(|p| p.values().cloned().map(Entry::Silver))
                .chain(
                    self.quarantine
                        .get(&partition)
                        .into_iter()
                        .flat_map(|p| p.values().cloned().map(Entry::Quarantine)),
                )
                .collect(),
            Layer::Gold => self
                .gold
                .get(&partition)
                .into_iter()
                .flat_map(|p| p.records.values().cloned().map(Entry::Gold))
                .collect(),
        }
    }
}

struct Writer {
    manifest: Manifest,
    segments: BTreeMap<(Layer, i64), SegmentWriter>,
    changes: Option<SegmentWriter>,
    change_frames: u64,
    /// Segment index receiving appends, per partition.
    active: BTreeMap<(Layer, i64), u32>,
}

pub struct Store {
    dir: Option<PathBuf>,
    cfg: StoreConfig,
    read_only: bool,
    state: RwLock<State>,
    writer: Mutex<Writer>,
    hub: Arc<ChangeHub>,
    faults: SharedFaults,
    poisoned: AtomicBool,
    partition_scans: AtomicU64,
    write_batches: AtomicU64,
}

fn partition_dir(dir: &Path, layer: Layer, partition: i64) -> PathBuf {
    dir.join(layer.dir_name()).join(partition.to_string())
}

fn partition_label(layer: Layer, partition: i64) -> String {
    format!("{}/{}", layer.dir_name(), partition)
}

/// Replaces `path` with `bytes` via a synced temporary file and rename.
/// `failpoint` fires between writing the temporary file and the rename.
pub fn write_atomic(path: &Path, bytes: &[u8], faults: &Faults, failpoint: &str) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    }
    let mut f = fs::File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    drop(f);
    faults.hit(failpoint)?;
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))?;
    if let Some(parent) = path.parent() {
        if let Ok(d) = fs::File::open(parent) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

/// One line per artifact, sorted by gold_key, tab-separated with
/// shortest round-trip float formatting.
pub fn canonical_gold_dump(artifacts: &[GoldArtifact]) -> String {
    let mut sorted: Vec<&GoldArtifact> = artifacts.iter().collect();
    sorted.sort_by(|a, b| a.gold_key.cmp(&b.gold_key));
    let mut out = String::new();
    for a in sorted {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\tv{}\t{:?}\t{}\t{}\n",
            a.gold_key,
            a.metric_name,
            a.platform,
            a.bucket_start,
            a.transform_version,
            a.value,
            a.sample_count,
            a.computed_from
        ));
    }
    out
}

struct Recovered {
    state: State,
    manifest: Manifest,
    changes: Vec<ChangeEvent>,
    change_frames: u64,
    /// Highest segment index per partition.
    active: BTreeMap<(Layer, i64), u32>,
}

impl Store {
    pub fn in_memory() -> Store {
        Store::in_memory_with(StoreConfig::default())
    }

    pub fn in_memory_with(cfg: StoreConfig) -> Store {
        let hub = ChangeHub::new(cfg.change_retention);
        Store {
            dir: None,
            read_only: false,
            state: RwLock::new(State::default()),
            writer: Mutex::new(Writer {
                manifest: Manifest::default(),
                segments: BTreeMap::new(),
                changes: None,
                change_frames: 0,
                active: BTreeMap::new(),
            }),
            hub,
            faults: Faults::new(),
            poisoned: AtomicBool::new(false),
            partition_scans: AtomicU64::new(0),
            write_batches: AtomicU64::new(0),
            cfg,
        }
    }

    /// Opens (creating if needed) and recovers the store in `dir`.
    pub fn open(dir: impl AsRef<Path>, cfg: StoreConfig) -> Result<Store, StoreError> {
        Store::open_with_faults(dir, cfg, Faults::new())
    }

    pub fn open_with_faults(
        dir: impl AsRef<Path>,
        cfg: StoreConfig,
        faults: SharedFaults,
    ) -> Result<Store, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
        let rec = recover(&dir, &cfg, true)?;
        Ok(Store::assemble(dir, cfg, rec, false, faults))
    }

    /// Opens without repairing anything on disk; writes fail with `ReadOnly`.
    pub fn open_read_only(dir: impl AsRef<Path>, cfg: StoreConfig) -> Result<Store, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let rec = if dir.exists() {
            recover(&dir, &cfg, false)?
        } else {
            Recovered {
                state: State::default(),
                manifest: Manifest::default(),
                changes: Vec::new(),
                change_frames: 0,
                active: BTreeMap::new(),
            }
        };
        Ok(Store::assemble(dir, cfg, rec, true, Faults::new()))
    }

    fn assemble(dir: PathBuf, cfg: StoreConfig, rec: Recovered, read_only: bool, faults: SharedFaults) -> Store {
        let hub = ChangeHub::restore(
            cfg.change_retention,
            rec.changes,
            rec.manifest.next_sequence - 1,
        );
        let mut state = rec.state;
        state.catalog = rec.manifest.catalog.clone();
        let writer = Writer {
            manifest: rec.manifest,
            segments: BTreeMap::new(),
            changes: None,
            change_frames: rec.change_frames,
            active: rec.active,
        };
        Store {
            dir: Some(dir),
            cfg,
            read_only,
            state: RwLock::new(state),
            writer: Mutex::new(writer),
            hub,
            faults,
            poisoned: AtomicBool::new(false),
            partition_scans: AtomicU64::new(0),
            write_batches: AtomicU64::new(0),
        }
    }

    fn partition(&self, layer: Layer, t: Timestamp) -> i64 {
        self.cfg.partition(layer, t)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn faults(&self) -> &SharedFaults {
        &self.faults
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned.load(Ordering::SeqCst)
    }

    /// Committed write batches since this handle was opened.
    pub fn write_batches(&self) -> u64 {
        self.write_batches.load(Ordering::SeqCst)
    }

    /// Partition probes performed by Gold queries since open.
    pub fn partition_scans(&self) -> u64 {
        self.partition_scans.load(Ordering::SeqCst)
    }

    /// Archives Bronze records not already present. Returns how many were new.
    pub fn append_bronze(&self, records: &[BronzeRecord]) -> Result<usize, StoreError> {
        let mut w = self.begin()?;
        let fresh: Vec<Entry> = {
            let st = self.state.read();
            let mut seen = BTreeSet::new();
            records
                .iter()
                .filter(|r| {
                    let p = self.partition(Layer::Bronze, r.fetch_window.start);
                    let exists = st.bronze.get(&p).is_some_and(|m| m.contains_key(&r.bronze_id));
                    !exists && seen.insert(r.bronze_id.clone())
                })
                .cloned()
                .map(Entry::Bronze)
                .collect()
        };
        let n = fresh.len();
        if n > 0 {
            self.commit(&mut w, fresh, Vec::new(), None)?;
        }
        Ok(n)
    }

    /// Inserts or replaces Silver rows by silver_id and records quarantined rows.
    pub fn upsert_silver(
        &self,
        silver: &[SilverRecord],
        quarantined: &[QuarantinedRecord],
    ) -> Result<SilverReport, StoreError> {
        let mut w = self.begin()?;
        let mut report = SilverReport::default();
        let mut entries = Vec::new();
        {
            let st = self.state.read();
            let mut batch: BTreeMap<&str, &SilverRecord> = BTreeMap::new();
            for s in silver {
                batch.insert(&s.silver_id, s);
            }
            for s in batch.into_values() {
                let p = self.partition(Layer::Silver, s.unified_ts);
                match st.silver.get(&p).and_then(|m| m.get(&s.silver_id)) {
                    None => report.inserted += 1,
                    Some(old) if old == s => {
                        report.unchanged += 1;
                        continue;
                    }
                    Some(_) => report.replaced += 1,
                }
                entries.push(Entry::Silver(s.clone()));
            }
            let mut qbatch: BTreeMap<&str, &QuarantinedRecord> = BTreeMap::new();
            for q in quarantined {
                qbatch.insert(&q.quarantine_id, q);
            }
            for q in qbatch.into_values() {
                let p = self.partition(Layer::Silver, q.observed_at);
                if st.quarantine.get(&p).and_then(|m| m.get(&q.quarantine_id)) == Some(q) {
                    continue;
                }
                report.quarantined += 1;
                entries.push(Entry::Quarantine(q.clone()));
            }
        }
        if !entries.is_empty() {
            self.commit(&mut w, entries, Vec::new(), None)?;
        }
        Ok(report)
    }

    /// Inserts artifacts whose gold_key is absent and replaces value and
    /// sample_count of those present. The whole call is one batch: readers
    /// see all of it or none of it.
    pub fn upsert_gold(&self, artifacts: &[GoldArtifact]) -> Result<UpsertReport, StoreError> {
        let mut w = self.begin()?;
        let mut report = UpsertReport::default();
        let mut entries = Vec::new();
        let mut events = Vec::new();
        let mut seq = w.manifest.next_sequence;
        {
            let st = self.state.read();
            let mut batch: BTreeMap<&str, &GoldArtifact> = BTreeMap::new();
            for a in artifacts {
                batch.insert(&a.gold_key, a);
            }
            for a in batch.into_values() {
                let p = self.partition(Layer::Gold, a.bucket_start);
                let old = st.find_gold(&a.gold_key, p);
                let kind = match old {
                    None => {
                        report.inserted += 1;
                        Some(ChangeKind::Insert)
                    }
                    Some(o) if o == a => {
                        report.unchanged += 1;
                        continue;
                    }
                    Some(o) => {
                        report.replaced += 1;
                        (o.value.to_bits() != a.value.to_bits()).then_some(ChangeKind::Update)
                    }
                };
                if let Some(kind) = kind {
                    events.push(ChangeEvent {
                        sequence: seq,
                        gold_key: a.gold_key.clone(),
                        metric_name: a.metric_name.clone(),
                        platform: a.platform.clone(),
                        bucket_start: a.bucket_start,
                        transform_version: a.transform_version,
                        old_value: old.map(|o| o.value),
                        new_value: a.value,
                        kind,
                    });
                    seq += 1;
                }
                entries.push(Entry::Gold(a.clone()));
            }
        }
        if !entries.is_empty() {
            self.commit(&mut w, entries, events, None)?;
        }
        Ok(report)
    }

    /// Applies `f` to a copy of the transform catalog and commits the result
    /// atomically. Nothing is written if `f` fails or leaves it unchanged.
    pub fn update_catalog<T, E: From<StoreError>>(
        &self,
        f: impl FnOnce(&mut TransformCatalog) -> Result<T, E>,
    ) -> Result<T, E> {
        let mut w = self.begin()?;
        let mut catalog = w.manifest.catalog.clone();
        let out = f(&mut catalog)?;
        if catalog != w.manifest.catalog {
            self.commit(&mut w, Vec::new(), Vec::new(), Some(catalog))?;
        }
        Ok(out)
    }

    pub fn catalog(&self) -> TransformCatalog {
        self.state.read().catalog.clone()
    }

    /// Gold artifacts for one series slice with bucket_start in `[t1, t2)`,
    /// ascending by bucket_start. Only partitions overlapping the range are read.
    pub fn query_gold(
        &self,
        metric_name: &str,
        platform: &str,
        t1: Timestamp,
        t2: Timestamp,
        version: u32,
    ) -> Result<Vec<GoldArtifact>, StoreError> {
        self.query_gold_with_stats(metric_name, platform, t1, t2, version)
            .map(|(v, _)| v)
    }

    pub fn query_gold_with_stats(
        &self,
        metric_name: &str,
        platform: &str,
        t1: Timestamp,
        t2: Timestamp,
        version: u32,
    ) -> Result<(Vec<GoldArtifact>, QueryStats), StoreError> {
        if t1 >= t2 {
            return Err(StoreError::InvalidRange { start: t1, end: t2 });
        }
        let span = self.cfg.gold_span_ms;
        let first = t1.as_millis().div_euclid(span) * span;
        let lo = IndexKey {
            platform: platform.to_string(),
            metric_name: metric_name.to_string(),
            transform_version: version,
            bucket_start: t1,
        };
        let hi = IndexKey {
            bucket_start: t2,
            ..lo.clone()
        };
        let st = self.state.read();
        let mut out = Vec::new();
        let mut stats = QueryStats::default();
        let mut p = first;
        while p < t2.as_millis() {
            stats.partitions_scanned += 1;
            if let Some(part) = st.gold.get(&p) {
                for key in part.index.range(lo.clone()..hi.clone()).map(|(_, k)| k) {
                    out.push(part.records[key].clone());
                }
            }
            p += span;
        }
        drop(st);
        self.partition_scans
            .fetch_add(stats.partitions_scanned, Ordering::Relaxed);
        Ok((out, stats))
    }

    pub fn subscribe_changes(&self, from_sequence: u64) -> Result<Subscription, StoreError> {
        Subscription::new(self.hub.clone(), from_sequence)
    }

    /// Change events still retained, oldest first.
    pub fn retained_changes(&self) -> Vec<ChangeEvent> {
        self.hub.retained()
    }

    /// Wakes blocked subscribers and makes them return what they have.
    pub fn close_changes(&self) {
        self.hub.close();
    }

    pub fn bronze_records(&self) -> Vec<BronzeRecord> {
        let st = self.state.read();
        let mut out: Vec<BronzeRecord> = st.bronze.values().flat_map(|p| p.values().cloned()).collect();
        out.sort_by(|a, b| a.bronze_id.cmp(&b.bronze_id));
        out
    }

    pub fn silver_records(&self) -> Vec<SilverRecord> {
        let st = self.state.read();
        let mut out: Vec<SilverRecord> = st.silver.values().flat_map(|p| p.values().cloned()).collect();
        out.sort_by(|a, b| a.silver_id.cmp(&b.silver_id));
        out
    }

    pub fn quarantined(&self) -> Vec<QuarantinedRecord> {
        let st = self.state.read();
        let mut out: Vec<QuarantinedRecord> =
            st.quarantine.values().flat_map(|p| p.values().cloned()).collect();
        out.sort_by(|a, b| a.quarantine_id.cmp(&b.quarantine_id));
        out
    }

    /// All Gold artifacts, optionally restricted to one transform version, sorted by gold_key.
    pub fn gold_artifacts(&self, version: Option<u32>) -> Vec<GoldArtifact> {
        let st = self.state.read();
        let mut out: Vec<GoldArtifact> = st
            .gold
            .values()
            .flat_map(|p| p.records.values())
            .filter(|a| version.is_none_or(|v| a.transform_version == v))
            .cloned()
            .collect();
        out.sort_by(|a, b| a.gold_key.cmp(&b.gold_key));
        out
    }

    pub fn dump_gold(&self, version: Option<u32>) -> String {
        canonical_gold_dump(&self.gold_artifacts(version))
    }

    /// The live Gold index across all partitions.
    pub fn gold_index(&self) -> BTreeMap<IndexKey, String> {
        let st = self.state.read();
        st.gold.values().flat_map(|p| p.index.clone()).collect()
    }

    /// The Gold index as it would be rebuilt from partition contents alone.
    pub fn rebuild_gold_index(&self) -> BTreeMap<IndexKey, String> {
        let st = self.state.read();
        st.gold
            .values()
            .flat_map(|p| p.records.values())
            .map(|a| (IndexKey::of(a), a.gold_key.clone()))
            .collect()
    }

    /// Gold partition starts and how many artifacts each holds.
    pub fn gold_partitions(&self) -> BTreeMap<i64, usize> {
        let st = self.state.read();
        st.gold.iter().map(|(k, p)| (*k, p.records.len())).collect()
    }

    pub fn stats(&self) -> StoreStats {
        let st = self.state.read();
        let w = self.writer.lock();
        StoreStats {
            bronze: st.bronze.values().map(|p| p.len()).sum(),
            silver: st.silver.values().map(|p| p.len()).sum(),
            quarantined: st.quarantine.values().map(|p| p.len()).sum(),
            gold: st.gold.values().map(|p| p.records.len()).sum(),
            gold_partitions: st.gold.len(),
            committed_batch: w.manifest.committed_batch,
            next_sequence: w.manifest.next_sequence,
        }
    }

    /// Rewrites every partition and the change log down to live records.
    pub fn checkpoint(&self) -> Result<(), StoreError> {
        let mut w = self.begin()?;
        let Some(dir) = self.dir.clone() else {
            return Ok(());
        };
        let parts: Vec<(Layer, i64)> = self.state.read().frames.keys().copied().collect();
        let r = parts
            .into_iter()
            .try_for_each(|(layer, p)| self.compact_partition(&mut w, &dir, layer, p))
            .and_then(|_| self.compact_changes(&mut w, &dir));
        if r.is_err() {
            self.poisoned.store(true, Ordering::SeqCst);
        }
        r
    }

    fn begin(&self) -> Result<parking_lot::MutexGuard<'_, Writer>, StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        let w = self.writer.lock();
        if self.is_poisoned() {
            return Err(StoreError::Poisoned);
        }
        Ok(w)
    }

    fn commit(
        &self,
        w: &mut Writer,
        entries: Vec<Entry>,
        events: Vec<ChangeEvent>,
        catalog: Option<TransformCatalog>,
    ) -> Result<(), StoreError> {
        let r = self.commit_inner(w, entries, events, catalog);
        if r.is_err() {
            self.poisoned.store(true, Ordering::SeqCst);
        }
        r
    }

    fn commit_inner(
        &self,
        w: &mut Writer,
        entries: Vec<Entry>,
        events: Vec<ChangeEvent>,
        catalog: Option<TransformCatalog>,
    ) -> Result<(), StoreError> {
        let batch = w.manifest.committed_batch + 1;
        let placed: Vec<((Layer, i64), Entry)> = entries
            .into_iter()
            .map(|e| (e.placement(&self.cfg), e))
            .collect();
        let mut next = w.manifest.clone();
        next.committed_batch = batch;
        next.next_sequence += events.len() as u64;
        if let Some(c) = &catalog {
            next.catalog = c.clone();
        }

        let mut touched: BTreeMap<(Layer, i64), u64> = BTreeMap::new();
        for (place, _) in &placed {
            *touched.entry(*place).or_default() += 1;
        }

        if let Some(dir) = self.dir.clone() {
            self.faults.hit("store.before_write")?;
            for (place, entry) in &placed {
                let payload = serde_json::to_vec(&DataFrame { b: batch, e: entry.clone() })
                    .map_err(|e| StoreError::Decode(e.to_string()))?;
                let frame = encode_frame(&payload);
                let seg = self.segment_for(w, &dir, *place)?;
                if let Err(crash) = self.faults.hit("store.torn_frame") {
                    seg.write(&frame[..frame.len() / 2])?;
                    seg.sync()?;
                    return Err(crash.into());
                }
                seg.write(&frame)?;
                seg.frames += 1;
            }
            if !events.is_empty() {
                if w.changes.is_none() {
                    w.changes = Some(SegmentWriter::open(dir.join("changes.log"), 0, w.change_frames)?);
                }
                let log = w.changes.as_mut().expect("opened");
                let mut buf = Vec::new();
                for ev in &events {
                    let payload = serde_json::to_vec(&ChangeFrame { b: batch, c: ev.clone() })
                        .map_err(|e| StoreError::Decode(e.to_string()))?;
                    buf.extend_from_slice(&encode_frame(&payload));
                }
                log.write(&buf)?;
                log.sync()?;
                w.change_frames += events.len() as u64;
            }
            for place in touched.keys() {
                if let Some(seg) = w.segments.get_mut(place) {
                    seg.sync()?;
                }
            }
            self.faults.hit("store.before_commit")?;
            let bytes = serde_json::to_vec_pretty(&next).map_err(|e| StoreError::Manifest(e.to_string()))?;
            write_atomic(&dir.join("manifest"), &bytes, &self.faults, "store.manifest_tmp")?;
        }

        w.manifest = next;
        {
            let mut st = self.state.write();
            for (place, entry) in placed {
                st.apply(entry, place.1);
            }
            for (place, n) in &touched {
                *st.frames.entry(*place).or_default() += n;
            }
            if let Some(c) = catalog {
                st.catalog = c;
            }
        }
        self.write_batches.fetch_add(1, Ordering::SeqCst);
        self.hub.publish(events);
        self.faults.hit("store.after_commit")?;

        if let Some(dir) = self.dir.clone() {
            for place in touched.keys() {
                let (frames, live) = {
                    let st = self.state.read();
                    (st.frames.get(place).copied().unwrap_or(0), st.live_records(place.0, place.1))
                };
                if frames - live >= self.cfg.compact_after_dead_frames {
                    self.compact_partition(w, &dir, place.0, place.1)?;
                }
            }
            if w.change_frames >= 2 * self.cfg.change_retention as u64 {
                self.compact_changes(w, &dir)?;
            }
        }
        Ok(())
    }

    fn segment_for<'w>(
        &self,
        w: &'w mut Writer,
        dir: &Path,
        place: (Layer, i64),
    ) -> Result<&'w mut SegmentWriter, StoreError> {
        let roll = match w.segments.get(&place) {
            Some(seg) => seg.len()? >= self.cfg.segment_max_bytes,
            None => {
                let index = w.active.get(&place).copied().unwrap_or_else(|| {
                    w.manifest
                        .segment_base
                        .get(&partition_label(place.0, place.1))
                        .copied()
                        .unwrap_or(0)
                });
                let path = partition_dir(dir, place.0, place.1).join(segment_name(index));
                w.segments.insert(place, SegmentWriter::open(path, index, 0)?);
                false
            }
        };
        if roll {
            let index = w.segments[&place].index + 1;
            let path = partition_dir(dir, place.0, place.1).join(segment_name(index));
            w.segments.insert(place, SegmentWriter::open(path, index, 0)?);
            w.active.insert(place, index);
        }
        Ok(w.segments.get_mut(&place).expect("opened"))
    }

    /// Writes the partition's live records to a fresh segment, moves the
    /// manifest base past the old ones, then deletes them. A crash before the
    /// base moves leaves duplicates of identical records, which replay to the
    /// same state.
    fn compact_partition(&self, w: &mut Writer, dir: &Path, layer: Layer, p: i64) -> Result<(), StoreError> {
        let entries = self.state.read().partition_entries(layer, p);
        let pdir = partition_dir(dir, layer, p);
        let old = if pdir.exists() { list_segments(&pdir)? } else { Vec::new() };
        let index = old.last().map_or(0, |(i, _)| i + 1);
        w.segments.remove(&(layer, p));
        let mut seg = SegmentWriter::open(pdir.join(segment_name(index)), index, 0)?;
        let batch = w.manifest.committed_batch;
        let mut buf = Vec::new();
        for e in &entries {
            let payload = serde_json::to_vec(&DataFrame { b: batch, e: e.clone() })
                .map_err(|e| StoreError::Decode(e.to_string()))?;
            buf.extend_from_slice(&encode_frame(&payload));
        }
        seg.write(&buf)?;
        seg.sync()?;
        seg.frames = entries.len() as u64;
        self.faults.hit("store.compact_before_base")?;
        let mut next = w.manifest.clone();
        next.segment_base.insert(partition_label(layer, p), index);
        let bytes = serde_json::to_vec_pretty(&next).map_err(|e| StoreError::Manifest(e.to_string()))?;
        write_atomic(&dir.join("manifest"), &bytes, &self.faults, "store.manifest_tmp")?;
        w.manifest = next;
        for (_, path) in old {
            fs::remove_file(&path).map_err(|e| StoreError::io(&path, e))?;
        }
        w.segments.insert((layer, p), seg);
        w.active.insert((layer, p), index);
        self.state.write().frames.insert((layer, p), entries.len() as u64);
        Ok(())
    }

    fn compact_changes(&self, w: &mut Writer, dir: &Path) -> Result<(), StoreError> {
        let retained = self.hub.retained();
        let batch = w.manifest.committed_batch;
        let mut buf = Vec::new();
        for ev in &retained {
            let payload = serde_json::to_vec(&ChangeFrame { b: batch, c: ev.clone() })
                .map_err(|e| StoreError::Decode(e.to_string()))?;
            buf.extend_from_slice(&encode_frame(&payload));
        }
        w.changes = None;
        write_atomic(&dir.join("changes.log"), &buf, &self.faults, "store.changes_tmp")?;
        w.change_frames = retained.len() as u64;
        Ok(())
    }
}

impl GoldReader for Store {
    fn query_gold(
        &self,
        metric_name: &str,
        platform: &str,
        t1: Timestamp,
        t2: Timestamp,
        version: u32,
    ) -> Result<Vec<GoldArtifact>, StoreError> {
        Store::query_gold(self, metric_name, platform, t1, t2, version)
    }

    fn current_version(&self, series: &str) -> u32 {
        self.state.read().catalog.current_version(series)
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        self.hub.close();
    }
}

fn recover(dir: &Path, cfg: &StoreConfig, repair: bool) -> Result<Recovered, StoreError> {
    let manifest_path = dir.join("manifest");
    let manifest: Manifest = if manifest_path.exists() {
        let bytes = fs::read(&manifest_path).map_err(|e| StoreError::io(&manifest_path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Manifest(e.to_string()))?
    } else {
        Manifest::default()
    };
    if manifest.format != MANIFEST_FORMAT {
        return Err(StoreError::Manifest(format!(
            "unsupported format {} (expected {MANIFEST_FORMAT})",
            manifest.format
        )));
    }
    let committed = manifest.committed_batch;
    let mut state = State::default();
    let mut active = BTreeMap::new();

    for layer in Layer::ALL {
        let ldir = dir.join(layer.dir_name());
        if !ldir.exists() {
            continue;
        }
        let mut parts = Vec::new();
        for entry in fs::read_dir(&ldir).map_err(|e| StoreError::io(&ldir, e))? {
            let entry = entry.map_err(|e| StoreError::io(&ldir, e))?;
            if let Some(p) = entry.file_name().to_str().and_then(|s| s.parse::<i64>().ok()) {
                parts.push(p);
            }
        }
        parts.sort();
        for p in parts {
            let pdir = partition_dir(dir, layer, p);
            let base = manifest
                .segment_base
                .get(&partition_label(layer, p))
                .copied()
                .unwrap_or(0);
            let mut frames = 0u64;
            for (index, path) in list_segments(&pdir)? {
                if index < base {
                    if repair {
                        fs::remove_file(&path).map_err(|e| StoreError::io(&path, e))?;
                    }
                    continue;
                }
                let mut cut: Option<u64> = None;
                let outcome = read_frames(&path, |off, payload| {
                    let f: DataFrame = serde_json::from_slice(payload)
                        .map_err(|e| StoreError::Decode(format!("{}@{off}: {e}", path.display())))?;
                    if f.b > committed {
                        cut = Some(off);
                        return Ok(false);
                    }
                    state.apply(f.e, p);
                    frames += 1;
                    Ok(true)
                })?;
                if let ReadOutcome::TornTail(off) = outcome {
                    cut = Some(cut.map_or(off, |c| c.min(off)));
                }
                if let (Some(off), true) = (cut, repair) {
                    log::warn!("truncating {} at {off}", path.display());
                    segment::truncate(&path, off)?;
                }
                active.insert((layer, p), index);
            }
            if frames > 0 {
                state.frames.insert((layer, p), frames);
            }
        }
    }

    let mut changes = Vec::new();
    let mut change_frames = 0;
    let cpath = dir.join("changes.log");
    if cpath.exists() {
        let mut cut = None;
        let outcome = read_frames(&cpath, |off, payload| {
            let f: ChangeFrame =
                serde_json::from_slice(payload).map_err(|e| StoreError::Decode(format!("changes.log@{off}: {e}")))?;
            if f.b > committed {
                cut = Some(off);
                return Ok(false);
            }
            changes.push(f.c);
            change_frames += 1;
            Ok(true)
        })?;
        if let ReadOutcome::TornTail(off) = outcome {
            cut = Some(cut.map_or(off, |c: u64| c.min(off)));
        }
        if let (Some(off), true) = (cut, repair) {
            segment::truncate(&cpath, off)?;
        }
    }
    if changes.len() > cfg.change_retention {
        changes.drain(..changes.len() - cfg.change_retention);
    }
    if repair {
        let tmp = dir.join("manifest.tmp");
        if tmp.exists() {
            fs::remove_file(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
        }
    }
    Ok(Recovered {
        state,
        manifest,
        changes,
        change_frames,
        active,
    })
}
