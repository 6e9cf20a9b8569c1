//! Recomputing a Gold series at a new transform version from archived Bronze.
//!
//! New-version artifacts are written beside the old ones (the version is part
//! of the key), and the series' current-version pointer moves only after the
//! whole range is in place.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::Serialize;

use super::{compute_gold, harmonize, GoldContext, RefineError};
use crate::registry::Registry;
use crate::store::{Store, StoreError, UpsertReport};
use crate::time::TimeRange;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackfillRequest {
    /// Gold series name.
    pub metric_name: String,
    pub new_version: u32,
    /// Buckets starting in this range are recomputed.
    pub range: TimeRange,
    /// Artifacts per write batch.
    pub chunk_size: usize,
}

impl BackfillRequest {
    pub fn new(metric_name: &str, new_version: u32, range: TimeRange) -> Self {
        BackfillRequest {
            metric_name: metric_name.to_string(),
            new_version,
            range,
            chunk_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BackfillReport {
    pub metric_name: String,
    pub previous_version: u32,
    pub new_version: u32,
    pub range: TimeRange,
    pub artifacts: usize,
    pub chunks: usize,
    pub upsert: UpsertReport,
}

/// True if the union of `windows` covers `range`.
pub(crate) fn covers(windows: &[TimeRange], range: &TimeRange) -> bool {
    let mut sorted: Vec<&TimeRange> = windows.iter().filter(|w| !w.is_empty()).collect();
    sorted.sort_by_key(|w| (w.start, w.end));
    let mut reached = range.start;
    for w in sorted {
        if w.start > reached {
            break;
        }
        if w.end > reached {
            reached = w.end;
        }
        if reached >= range.end {
            return true;
        }
    }
    reached >= range.end
}

pub fn backfill(
    store: &Store,
    registry: &Registry,
    granularity: Duration,
    req: &BackfillRequest,
) -> Result<BackfillReport, RefineError> {
    let series = req.metric_name.as_str();
    if req.range.is_empty() {
        return Err(StoreError::InvalidRange {
            start: req.range.start,
            end: req.range.end,
        }
        .into());
    }
    if registry.series_aggregation(series).is_none() {
        return Err(RefineError::UnknownMetric(series.to_string()));
    }
    let catalog = store.catalog();
    let previous = catalog.current_version(series);
    if req.new_version <= previous {
        return Err(RefineError::VersionRegression {
            metric_name: series.to_string(),
            requested: req.new_version,
            current: previous,
        });
    }
    if catalog.logic(series, req.new_version).is_none() {
        return Err(RefineError::UnknownTransformVersion {
            metric_name: series.to_string(),
            version: req.new_version,
        });
    }
    let ctx = GoldContext {
        registry,
        catalog: &catalog,
        granularity,
    };
    ctx.check_granularity()?;

    let bronze = store.bronze_records();
    let silver = harmonize(&bronze).silver;
    let producing: BTreeSet<&str> = silver
        .iter()
        .filter(|s| s.metric_name == series)
        .map(|s| s.source_id.as_str())
        .collect();
    let windows: Vec<TimeRange> = bronze
        .iter()
        .filter(|b| producing.contains(b.source_id.as_str()))
        .map(|b| b.fetch_window)
        .collect();
    if !covers(&windows, &req.range) {
        return Err(RefineError::MissingBronze {
            metric_name: series.to_string(),
            start: req.range.start,
            end: req.range.end,
        });
    }

    let in_range: Vec<_> = silver
        .into_iter()
        .filter(|s| s.metric_name == series && req.range.contains(s.unified_ts.floor_to(granularity)))
        .collect();
    let mut artifacts = compute_gold(&ctx, &in_range, req.new_version)?;
    artifacts.sort_by(|a, b| (a.bucket_start, &a.gold_key).cmp(&(b.bucket_start, &b.gold_key)));

    let mut total = UpsertReport::default();
    let mut chunks = 0;
    for chunk in artifacts.chunks(req.chunk_size.max(1)) {
        store.faults().hit("backfill.before_chunk")?;
        let r = store.upsert_gold(chunk)?;
        total.inserted += r.inserted;
        total.replaced += r.replaced;
        total.unchanged += r.unchanged;
        chunks += 1;
    }
    store.faults().hit("backfill.before_flip")?;
    store.update_catalog(|c| {
        c.set_current(series, req.new_version);
        Ok::<_, RefineError>(())
    })?;
    Ok(BackfillReport {
        metric_name: series.to_string(),
        previous_version: previous,
        new_version: req.new_version,
        range: req.range,
        artifacts: artifacts.len(),
        chunks,
        upsert: total,
    })
}

/// Earliest bucket start and end of the latest bucket over all Bronze-derived
/// Silver rows of `series`, if any.
pub fn series_extent(store: &Store, series: &str, granularity: Duration) -> Option<TimeRange> {
    let silver = harmonize(&store.bronze_records()).silver;
    let mut ts = silver
        .iter()
        .filter(|s| s.metric_name == series)
        .map(|s| s.unified_ts.floor_to(granularity));
    let first = ts.next()?;
    let (lo, hi) = ts.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t)));
    Some(TimeRange::new(lo, hi + granularity))
}
