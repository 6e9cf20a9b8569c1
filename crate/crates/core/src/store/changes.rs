//! In-process fan-out of Gold change events.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Insert,
    Update,
}

/// Notification that a Gold artifact was inserted or changed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub sequence: u64,
    pub gold_key: String,
    pub metric_name: String,
    pub platform: String,
    pub bucket_start: Timestamp,
    pub transform_version: u32,
    pub old_value: Option<f64>,
    pub new_value: f64,
    pub kind: ChangeKind,
}

struct Log {
    events: VecDeque<ChangeEvent>,
    /// Sequence of the oldest event ever dropped from retention, plus one.
    dropped_through: u64,
    closed: bool,
}

pub(crate) struct ChangeHub {
    log: Mutex<Log>,
    ready: Condvar,
    retention: usize,
}

impl ChangeHub {
    pub(crate) fn new(retention: usize) -> Arc<ChangeHub> {
        Arc::new(ChangeHub {
            log: Mutex::new(Log {
                events: VecDeque::new(),
                dropped_through: 0,
                closed: false,
            }),
            ready: Condvar::new(),
            retention: retention.max(1),
        })
    }

    /// Hub seeded with events recovered from disk. Sequences start at 1, so
    /// everything before the first retained event counts as dropped.
    pub(crate) fn restore(retention: usize, events: Vec<ChangeEvent>, last_sequence: u64) -> Arc<ChangeHub> {
        let hub = ChangeHub::new(retention);
        {
            let mut log = hub.log.lock();
            log.dropped_through = events.first().map(|e| e.sequence - 1).unwrap_or(last_sequence);
            log.events = events.into();
        }
        hub.publish(Vec::new());
        hub
    }

    pub(crate) fn publish(&self, events: impl IntoIterator<Item = ChangeEvent>) {
        let mut log = self.log.lock();
        for e in events {
            log.events.push_back(e);
        }
        while log.events.len() > self.retention {
            let e = log.events.pop_front().expect("non-empty");
            log.dropped_through = e.sequence;
        }
        drop(log);
        self.ready.notify_all();
    }

    pub(crate) fn close(&self) {
        self.log.lock().closed = true;
        self.ready.notify_all();
    }

    pub(crate) fn retained(&self) -> Vec<ChangeEvent> {
        self.log.lock().events.iter().cloned().collect()
    }

    fn read_after(&self, after: u64, max: usize) -> Result<Vec<ChangeEvent>, StoreError> {
        let log = self.log.lock();
        Self::collect(&log, after, max)
    }

    fn collect(log: &Log, after: u64, max: usize) -> Result<Vec<ChangeEvent>, StoreError> {
        if after < log.dropped_through {
            return Err(StoreError::SequenceTruncated {
                requested: after,
                oldest_retained: log.dropped_through + 1,
            });
        }
        let start = log.events.partition_point(|e| e.sequence <= after);
        Ok(log.events.iter().skip(start).take(max).cloned().collect())
    }

    fn wait_after(
        &self,
        after: u64,
        max: usize,
        timeout: Duration,
    ) -> Result<Vec<ChangeEvent>, StoreError> {
        let deadline = Instant::now() + timeout;
        let mut log = self.log.lock();
        loop {
            let batch = Self::collect(&log, after, max)?;
            if !batch.is_empty() || log.closed {
                return Ok(batch);
            }
            if self.ready.wait_until(&mut log, deadline).timed_out() {
                return Self::collect(&log, after, max);
            }
        }
    }
}

/// Ordered, resumable view of the change stream.
///
/// Delivers every retained event with a sequence greater than the starting
/// point, then live events as they are committed. Callers resume after a
/// disconnect by subscribing again from the last sequence they processed;
/// events may repeat across resumptions but never skip.
pub struct Subscription {
    hub: Arc<ChangeHub>,
    position: u64,
}

impl Subscription {
    pub(crate) fn new(hub: Arc<ChangeHub>, from_sequence: u64) -> Result<Subscription, StoreError> {
        hub.read_after(from_sequence, 0)?;
        Ok(Subscription {
            hub,
            position: from_sequence,
        })
    }

    /// Sequence of the last event handed out.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Events already committed, without waiting.
    pub fn poll(&mut self, max: usize) -> Result<Vec<ChangeEvent>, StoreError> {
        let batch = self.hub.read_after(self.position, max)?;
        if let Some(last) = batch.last() {
            self.position = last.sequence;
        }
        Ok(batch)
    }

    /// Waits up to `timeout` for at least one event.
    pub fn next_batch(&mut self, max: usize, timeout: Duration) -> Result<Vec<ChangeEvent>, StoreError> {
        let batch = self.hub.wait_after(self.position, max, timeout)?;
        if let Some(last) = batch.last() {
            self.position = last.sequence;
        }
        Ok(batch)
    }
}
