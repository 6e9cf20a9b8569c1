//! Silver harmonization, Gold computation and versioned backfill.

mod backfill;
mod gold;
mod harmonize;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::digest::KeyHasher;
use crate::faults::InjectedCrash;
use crate::ingest::IngestError;
use crate::store::StoreError;
use crate::time::Timestamp;

pub use backfill::{backfill, series_extent, BackfillReport, BackfillRequest};
pub use gold::{compute_gold, rollup, GoldContext};
pub use harmonize::{harmonize, harmonize_with_raw, timestamp_precedence, HarmonizeOutput};

pub const SILVER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverRecord {
    pub silver_id: String,
    pub source_id: String,
    pub platform: String,
    pub metric_name: String,
    pub unified_ts: Timestamp,
    pub value: f64,
    pub schema_version: u32,
    pub bronze_ref: String,
}

pub fn silver_id(source_id: &str, identity: &str, unified_ts: Timestamp) -> String {
    KeyHasher::new("silver")
        .str(source_id)
        .str(identity)
        .i64(unified_ts.as_millis())
        .finish()
}

/// A Bronze row that failed harmonization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantinedRecord {
    pub quarantine_id: String,
    pub source_id: String,
    pub bronze_ref: String,
    /// Start of the fetch window the row arrived in.
    pub observed_at: Timestamp,
    pub raw: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldArtifact {
    pub gold_key: String,
    pub metric_name: String,
    pub platform: String,
    pub bucket_start: Timestamp,
    pub value: f64,
    pub sample_count: u64,
    pub transform_version: u32,
    pub computed_from: u64,
}

pub fn gold_key(metric_name: &str, platform: &str, bucket_start: Timestamp, version: u32) -> String {
    KeyHasher::new("gold")
        .str(metric_name)
        .str(platform)
        .i64(bucket_start.as_millis())
        .u64(u64::from(version))
        .finish()
}

/// What a transform version does to a bucket's Silver rows before aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformLogic {
    /// Aggregate every row.
    AllRows,
    /// Aggregate only rows with a strictly positive value.
    PositiveOnly,
}

impl TransformLogic {
    pub fn admits(self, value: f64) -> bool {
        match self {
            TransformLogic::AllRows => true,
            TransformLogic::PositiveOnly => value > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformVersion {
    pub version: u32,
    pub metric_name: String,
    pub description: String,
    pub logic: TransformLogic,
}

/// Transform history per Gold series plus the current version pointer.
/// Every series implicitly starts at version 1 with [`TransformLogic::AllRows`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformCatalog {
    versions: BTreeMap<String, Vec<TransformVersion>>,
    current: BTreeMap<String, u32>,
}

impl TransformCatalog {
    pub fn current_version(&self, series: &str) -> u32 {
        self.current.get(series).copied().unwrap_or(1)
    }

    pub fn history(&self, series: &str) -> Vec<TransformVersion> {
        let mut out = vec![TransformVersion {
            version: 1,
            metric_name: series.to_string(),
            description: "baseline: aggregate all rows".into(),
            logic: TransformLogic::AllRows,
        }];
        out.extend(self.versions.get(series).into_iter().flatten().cloned());
        out
    }

    pub fn logic(&self, series: &str, version: u32) -> Option<TransformLogic> {
        if version == 1 {
            return Some(TransformLogic::AllRows);
        }
        self.versions
            .get(series)?
            .iter()
            .find(|v| v.version == version)
            .map(|v| v.logic)
    }

    /// Adds a version. Re-registering an identical entry is a no-op.
    pub fn register(&mut self, tv: TransformVersion) -> Result<bool, RefineError> {
        if let Some(existing) = self.history(&tv.metric_name).iter().find(|v| v.version == tv.version) {
            if existing.logic == tv.logic && existing.description == tv.description {
                return Ok(false);
            }
            return Err(RefineError::TransformConflict {
                metric_name: tv.metric_name,
                version: tv.version,
            });
        }
        let newest = self.history(&tv.metric_name).last().map(|v| v.version).unwrap_or(1);
        if tv.version <= newest {
            return Err(RefineError::VersionRegression {
                metric_name: tv.metric_name,
                requested: tv.version,
                current: newest,
            });
        }
        self.versions.entry(tv.metric_name.clone()).or_default().push(tv);
        Ok(true)
    }

    pub fn set_current(&mut self, series: &str, version: u32) {
        self.current.insert(series.to_string(), version);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("Silver metric {0:?} is not read by any registry metric")]
    UnknownMetric(String),
    #[error("series {metric_name} has no transform version {version}")]
    UnknownTransformVersion { metric_name: String, version: u32 },
    #[error("transform {metric_name} v{version} already registered with different logic")]
    TransformConflict { metric_name: String, version: u32 },
    #[error("version regression for {metric_name}: requested {requested}, current {current}")]
    VersionRegression {
        metric_name: String,
        requested: u32,
        current: u32,
    },
    #[error("no Bronze covers {metric_name} over [{start}, {end})")]
    MissingBronze {
        metric_name: String,
        start: Timestamp,
        end: Timestamp,
    },
    #[error("invalid bucket granularity: {0}")]
    Granularity(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Crash(#[from] InjectedCrash),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}
