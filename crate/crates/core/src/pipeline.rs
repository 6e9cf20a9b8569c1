//! The write path as one sequence of steps: fetch into Bronze, harmonize to
//! Silver, aggregate to Gold. The CLI commands call exactly these functions.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::config::Resolved;
use crate::faults::SharedFaults;
use crate::ingest::{
    advance_cursors, execute_fetch, plan_fetch, CursorState, IngestError, RunRecord, SourcesConfig,
};
use crate::refine::{
    backfill as run_backfill, compute_gold, harmonize, series_extent, BackfillReport, BackfillRequest,
    GoldContext, RefineError, TransformVersion,
};
use crate::registry::Registry;
use crate::store::{SilverReport, Store, StoreConfig, StoreError, UpsertReport};
use crate::time::{TimeRange, Timestamp};

/// Everything the write path needs besides the store.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub registry: Registry,
    pub sources: SourcesConfig,
    pub transforms: Vec<TransformVersion>,
    pub granularity: Duration,
    pub parallelism: usize,
    /// Where cursor state lives.
    pub state_dir: PathBuf,
}

impl PipelineInputs {
    pub fn from_resolved(r: &Resolved) -> PipelineInputs {
        PipelineInputs {
            registry: r.registry.clone(),
            sources: r.sources.clone(),
            transforms: r.config.transforms.clone(),
            granularity: r.config.bucket_granularity,
            parallelism: r.config.parallelism,
            state_dir: r.config.data_dir.clone(),
        }
    }
}

pub fn open_store(r: &Resolved, faults: SharedFaults) -> Result<Store, StoreError> {
    Store::open_with_faults(r.config.store_dir(), StoreConfig::default(), faults)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub run_id: u64,
    pub now: Timestamp,
    pub tasks: usize,
    pub newly_archived: usize,
    pub bronze_total: usize,
}

/// Plans, fetches and archives everything pending up to `now`, then advances
/// cursors. Cursors move only after the whole plan is archived, so a failed or
/// interrupted run is simply repeated.
pub fn ingest(inputs: &PipelineInputs, store: &Store, now: Timestamp) -> Result<IngestReport, IngestError> {
    let mut state = CursorState::load(&inputs.state_dir)?;
    let sources = inputs.sources.descriptors(&state)?;
    let plan = plan_fetch(&sources, now, inputs.granularity, inputs.parallelism)?;
    let outcome = execute_fetch(&plan, &sources, store, now)?;
    state.run_id += 1;
    state.cursors = advance_cursors(&sources, &plan);
    state.last_run = Some(RunRecord {
        run_id: state.run_id,
        now,
        tasks: plan.tasks.clone(),
        newly_archived: outcome.newly_archived,
    });
    std::fs::create_dir_all(&inputs.state_dir)
        .map_err(|e| IngestError::Store(StoreError::io(&inputs.state_dir, e)))?;
    state.save(&inputs.state_dir, store.faults())?;
    Ok(IngestReport {
        run_id: state.run_id,
        now,
        tasks: plan.tasks.len(),
        newly_archived: outcome.newly_archived,
        bronze_total: store.stats().bronze,
    })
}

/// Adds configured transform versions to the store's catalog.
pub fn register_transforms(store: &Store, transforms: &[TransformVersion]) -> Result<usize, RefineError> {
    store.update_catalog(|c| {
        let mut added = 0;
        for t in transforms {
            if c.register(t.clone())? {
                added += 1;
            }
        }
        Ok::<_, RefineError>(added)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SeriesReport {
    pub series: String,
    pub transform_version: u32,
    pub artifacts: usize,
    pub upsert: UpsertReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RefineReport {
    pub silver: SilverReport,
    /// Silver rows whose metric no registry entry reads.
    pub unmapped_rows: usize,
    pub series: Vec<SeriesReport>,
}

/// Rebuilds Silver from all of Bronze and recomputes every registry series
/// at its current transform version.
pub fn refine(inputs: &PipelineInputs, store: &Store) -> Result<RefineReport, RefineError> {
    register_transforms(store, &inputs.transforms)?;
    let out = harmonize(&store.bronze_records());
    let silver = store.upsert_silver(&out.silver, &out.quarantined)?;
    let catalog = store.catalog();
    let ctx = GoldContext {
        registry: &inputs.registry,
        catalog: &catalog,
        granularity: inputs.granularity,
    };
    let series_names = inputs.registry.series();
    let unmapped_rows = out
        .silver
        .iter()
        .filter(|s| !series_names.contains(s.metric_name.as_str()))
        .count();
    let mut series = Vec::new();
    for name in series_names {
        let version = catalog.current_version(name);
        let rows: Vec<_> = out.silver.iter().filter(|s| s.metric_name == name).cloned().collect();
        let artifacts = compute_gold(&ctx, &rows, version)?;
        let upsert = store.upsert_gold(&artifacts)?;
        series.push(SeriesReport {
            series: name.to_string(),
            transform_version: version,
            artifacts: artifacts.len(),
            upsert,
        });
    }
    Ok(RefineReport {
        silver,
        unmapped_rows,
        series,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub ingest: IngestReport,
    pub refine: RefineReport,
}

/// Ingest followed by refine.
pub fn run(inputs: &PipelineInputs, store: &Store, now: Timestamp) -> Result<RunReport, PipelineError> {
    let ingest = ingest(inputs, store, now)?;
    let refine = refine(inputs, store)?;
    Ok(RunReport { ingest, refine })
}

/// Recomputes `series` at `version` over `range`, or over every bucket the
/// series has data for when no range is given.
pub fn backfill(
    inputs: &PipelineInputs,
    store: &Store,
    series: &str,
    version: u32,
    range: Option<TimeRange>,
) -> Result<BackfillReport, RefineError> {
    register_transforms(store, &inputs.transforms)?;
    let range = match range {
        Some(r) => r,
        None => series_extent(store, series, inputs.granularity).ok_or_else(|| RefineError::MissingBronze {
            metric_name: series.to_string(),
            start: Timestamp::default(),
            end: Timestamp::default(),
        })?,
    };
    run_backfill(
        store,
        &inputs.registry,
        inputs.granularity,
        &BackfillRequest::new(series, version, range),
    )
}

/// Writes the canonical Gold dump to `path`, or returns it when `path` is None.
pub fn dump_gold(store: &Store, version: Option<u32>, path: Option<&Path>) -> std::io::Result<String> {
    let dump = store.dump_gold(version);
    if let Some(p) = path {
        std::fs::write(p, &dump)?;
    }
    Ok(dump)
}
