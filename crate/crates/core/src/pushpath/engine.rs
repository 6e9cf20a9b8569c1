//! Redelivery-tolerant alert processing with a persisted alert book and a
//! line-delimited notification outbox.
//!
//! Per event: evaluate every thresholded metric reading the event's series,
//! queue deliverable notifications in the book, persist the book, then move
//! queued notifications to the outbox. The outbox is keyed by `dedup_key`, so
//! a crash anywhere in between re-sends nothing twice after restart.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{apply_cooldown, evaluate, AlertState, Delivery, Notification, StabilityConfig};
use crate::faults::{Faults, InjectedCrash, SharedFaults};
use crate::registry::Registry;
use crate::store::{write_atomic, ChangeEvent, GoldReader, Store, StoreError};
use crate::time::{Timestamp, MILLIS_PER_DAY};

/// Dedup keys older than this (in event time) are forgotten.
pub const LEDGER_RETENTION_MS: i64 = 7 * MILLIS_PER_DAY;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Crash(#[from] InjectedCrash),
}

fn io_err(path: &Path, source: std::io::Error) -> EngineError {
    EngineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Notification as written to the outbox and posted to the webhook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotificationRecord {
    pub dedup_key: String,
    pub kind: String,
    pub metric: String,
    pub platform: String,
    pub severity: String,
    pub value: f64,
    pub threshold: f64,
    pub emitted_at: Timestamp,
}

impl From<&Notification> for NotificationRecord {
    fn from(n: &Notification) -> Self {
        NotificationRecord {
            dedup_key: n.dedup_key.clone(),
            kind: n.kind.as_str().to_string(),
            metric: n.metric_id.clone(),
            platform: n.platform.clone(),
            severity: n.severity.as_str().to_string(),
            value: n.value,
            threshold: n.threshold,
            emitted_at: n.emitted_at,
        }
    }
}

/// Append-only notification log; at most one line per dedup_key.
#[derive(Debug, Default)]
pub struct Outbox {
    path: Option<PathBuf>,
    keys: BTreeSet<String>,
    records: Vec<NotificationRecord>,
}

impl Outbox {
    pub fn in_memory() -> Outbox {
        Outbox::default()
    }

    /// Loads an existing outbox, dropping a final line cut short by a crash.
    pub fn open(path: &Path) -> Result<Outbox, EngineError> {
        let mut out = Outbox {
            path: Some(path.to_path_buf()),
            ..Outbox::default()
        };
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(io_err(path, e)),
        };
        let mut good = 0usize;
        for line in text.split_inclusive('\n') {
            if !line.ends_with('\n') {
                break;
            }
            let r: NotificationRecord = serde_json::from_str(line.trim_end())
                .map_err(|e| EngineError::Format(format!("{}: {e}", path.display())))?;
            out.keys.insert(r.dedup_key.clone());
            out.records.push(r);
            good += line.len();
        }
        if good < text.len() {
            log::warn!("dropping torn outbox tail in {}", path.display());
            let f = OpenOptions::new().write(true).open(path).map_err(|e| io_err(path, e))?;
            f.set_len(good as u64).map_err(|e| io_err(path, e))?;
        }
        Ok(out)
    }

    pub fn contains(&self, dedup_key: &str) -> bool {
        self.keys.contains(dedup_key)
    }

    pub fn records(&self) -> &[NotificationRecord] {
        &self.records
    }

    /// Appends unless the key is already present. Returns whether it was appended.
    pub fn append(&mut self, rec: &NotificationRecord) -> Result<bool, EngineError> {
        if self.keys.contains(&rec.dedup_key) {
            return Ok(false);
        }
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(rec).map_err(|e| EngineError::Format(e.to_string()))?;
            line.push(b'\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| io_err(path, e))?;
            f.write_all(&line).map_err(|e| io_err(path, e))?;
            f.sync_data().map_err(|e| io_err(path, e))?;
        }
        self.keys.insert(rec.dedup_key.clone());
        self.records.push(rec.clone());
        Ok(true)
    }
}

/// Best-effort HTTP POST of each outbox record, retried with exponential backoff.
#[derive(Debug, Clone)]
pub struct WebhookSink {
    pub url: String,
    pub attempts: u32,
    pub backoff: Duration,
}

impl WebhookSink {
    pub fn new(url: &str) -> Self {
        WebhookSink {
            url: url.to_string(),
            attempts: 4,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn send(&self, rec: &NotificationRecord) -> Result<(), String> {
        let body = serde_json::to_string(rec).map_err(|e| e.to_string())?;
        let mut last = String::new();
        for attempt in 0..self.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match ureq::post(&self.url)
                .set("Content-Type", "application/json")
                .timeout(Duration::from_secs(5))
                .send_string(&body)
            {
                Ok(_) => return Ok(()),
                Err(e) => last = e.to_string(),
            }
        }
        Err(last)
    }
}

/// Everything the engine must remember across restarts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlertBook {
    /// Keyed by `metric_id/platform`.
    pub states: BTreeMap<String, AlertState>,
    /// Highest change sequence applied per alert key.
    pub applied: BTreeMap<String, u64>,
    /// Dedup keys of delivered notifications and their event time.
    pub ledger: BTreeMap<String, Timestamp>,
    /// Deliverable notifications not yet confirmed in the outbox.
    pub pending: Vec<Notification>,
    /// Highest sequence handled; the stream is resumed after it.
    pub resume_from: u64,
}

impl AlertBook {
    pub fn key(metric_id: &str, platform: &str) -> String {
        format!("{metric_id}/{platform}")
    }

    fn prune_ledger(&mut self) {
        let Some(newest) = self.ledger.values().max().copied() else {
            return;
        };
        let horizon = newest.as_millis() - LEDGER_RETENTION_MS;
        self.ledger.retain(|_, t| t.as_millis() >= horizon);
    }
}

pub struct PushEngine {
    registry: Arc<Registry>,
    stability: StabilityConfig,
    book: AlertBook,
    book_path: Option<PathBuf>,
    outbox: Outbox,
    webhook: Option<WebhookSink>,
    faults: SharedFaults,
}

impl PushEngine {
    pub const BOOK_FILE: &'static str = "alerts.json";
    pub const OUTBOX_FILE: &'static str = "outbox.jsonl";

    pub fn in_memory(registry: Arc<Registry>, stability: StabilityConfig) -> PushEngine {
        PushEngine {
            registry,
            stability,
            book: AlertBook::default(),
            book_path: None,
            outbox: Outbox::in_memory(),
            webhook: None,
            faults: Faults::new(),
        }
    }

    /// Loads the book and outbox from `dir` and finishes any delivery a
    /// previous process queued but did not complete.
    pub fn open(
        dir: &Path,
        registry: Arc<Registry>,
        stability: StabilityConfig,
        faults: SharedFaults,
    ) -> Result<PushEngine, EngineError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let book_path = dir.join(Self::BOOK_FILE);
        let book = match fs::read(&book_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| EngineError::Format(format!("{}: {e}", book_path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => AlertBook::default(),
            Err(e) => return Err(io_err(&book_path, e)),
        };
        let outbox = Outbox::open(&dir.join(Self::OUTBOX_FILE))?;
        let mut engine = PushEngine {
            registry,
            stability,
            book,
            book_path: Some(book_path),
            outbox,
            webhook: None,
            faults,
        };
        engine.flush()?;
        Ok(engine)
    }

    pub fn with_webhook(mut self, sink: WebhookSink) -> Self {
        self.webhook = Some(sink);
        self
    }

    pub fn set_registry(&mut self, registry: Arc<Registry>) {
        self.registry = registry;
    }

    pub fn book(&self) -> &AlertBook {
        &self.book
    }

    pub fn outbox(&self) -> &Outbox {
        &self.outbox
    }

    pub fn resume_from(&self) -> u64 {
        self.book.resume_from
    }

    /// Processes one change event and returns the notifications it added to
    /// the outbox. Events already applied, and events for a transform
    /// version that is not current, change nothing.
    pub fn handle(&mut self, event: &ChangeEvent, reader: &dyn GoldReader) -> Result<Vec<Notification>, EngineError> {
        if reader.current_version(&event.metric_name) == event.transform_version {
            let registry = self.registry.clone();
            for def in registry.metrics_for_series(&event.metric_name) {
                let Some(thresholds) = def.thresholds else {
                    continue;
                };
                if !def.platform_scope.contains(&event.platform) {
                    continue;
                }
                let key = AlertBook::key(&def.metric_id, &event.platform);
                if self.book.applied.get(&key).is_some_and(|s| *s >= event.sequence) {
                    continue;
                }
                let stability = self.stability.for_metric(&def.metric_id);
                let state = self
                    .book
                    .states
                    .get(&key)
                    .cloned()
                    .unwrap_or_else(|| AlertState::new(&def.metric_id, &event.platform));
                let (mut state, notification) = evaluate(&state, event, &thresholds, &stability);
                if let Some(n) = notification {
                    if !self.book.ledger.contains_key(&n.dedup_key) {
                        let (delivery, after) = apply_cooldown(&n, &state, stability.cooldown);
                        state = after;
                        if delivery == Delivery::Deliver {
                            self.book.ledger.insert(n.dedup_key.clone(), n.emitted_at);
                            self.book.pending.push(n);
                        }
                    }
                }
                self.book.states.insert(key.clone(), state);
                self.book.applied.insert(key, event.sequence);
            }
        }
        self.book.resume_from = self.book.resume_from.max(event.sequence);
        self.book.prune_ledger();
        self.persist()?;
        self.faults.hit("pushpath.after_persist")?;
        self.flush()
    }

    fn persist(&self) -> Result<(), EngineError> {
        let Some(path) = &self.book_path else {
            return Ok(());
        };
        let bytes = serde_json::to_vec_pretty(&self.book).map_err(|e| EngineError::Format(e.to_string()))?;
        write_atomic(path, &bytes, &self.faults, "pushpath.book_tmp")?;
        Ok(())
    }

    /// Moves pending notifications to the outbox (and webhook).
    fn flush(&mut self) -> Result<Vec<Notification>, EngineError> {
        if self.book.pending.is_empty() {
            return Ok(Vec::new());
        }
        let mut sent = Vec::new();
        for n in &self.book.pending {
            let rec = NotificationRecord::from(n);
            self.faults.hit("pushpath.before_outbox")?;
            if self.outbox.append(&rec)? {
                if let Some(hook) = &self.webhook {
                    if let Err(e) = hook.send(&rec) {
                        log::warn!("webhook delivery of {} failed: {e}", rec.dedup_key);
                    }
                }
                sent.push(n.clone());
            }
        }
        self.book.pending.clear();
        self.persist()?;
        Ok(sent)
    }
}

/// Feeds the store's change stream into `engine` until `stop` is set.
///
/// Resumes after the engine's last handled sequence. If that point has
/// fallen out of retention, processing restarts at the oldest retained event.
pub fn run_consumer(
    store: Arc<Store>,
    engine: Arc<Mutex<PushEngine>>,
    stop: Arc<AtomicBool>,
) -> Result<(), EngineError> {
    let from = engine.lock().resume_from();
    let mut sub = match store.subscribe_changes(from) {
        Ok(s) => s,
        Err(StoreError::SequenceTruncated { oldest_retained, .. }) => {
            log::warn!("alert stream resumed at {oldest_retained}; events before it were not evaluated");
            store.subscribe_changes(oldest_retained - 1)?
        }
        Err(e) => return Err(e.into()),
    };
    while !stop.load(Ordering::SeqCst) {
        let batch = match sub.next_batch(256, Duration::from_millis(100)) {
            Ok(b) => b,
            Err(StoreError::SequenceTruncated { oldest_retained, .. }) => {
                log::warn!("alert consumer fell behind retention; skipping to {oldest_retained}");
                sub = store.subscribe_changes(oldest_retained - 1)?;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        for ev in &batch {
            engine.lock().handle(ev, &*store)?;
        }
    }
    Ok(())
}
