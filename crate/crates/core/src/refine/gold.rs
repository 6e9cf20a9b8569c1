use std::collections::BTreeMap;
use std::time::Duration;

use super::{gold_key, GoldArtifact, RefineError, SilverRecord, TransformCatalog};
use crate::registry::{Aggregation, Registry};
use crate::time::{duration_millis, Timestamp, MILLIS_PER_DAY};

/// Inputs that fix how Silver becomes Gold.
#[derive(Debug, Clone, Copy)]
pub struct GoldContext<'a> {
    pub registry: &'a Registry,
    pub catalog: &'a TransformCatalog,
    pub granularity: Duration,
}

impl GoldContext<'_> {
    pub fn check_granularity(&self) -> Result<(), RefineError> {
        let ms = duration_millis(self.granularity);
        if self.granularity.is_zero() || MILLIS_PER_DAY % ms != 0 {
            return Err(RefineError::Granularity(format!(
                "{:?} does not divide 24h evenly",
                self.granularity
            )));
        }
        Ok(())
    }
}

/// Groups Silver by `(metric, platform, bucket)` and aggregates each group
/// from scratch with the series' registry aggregation. Rows are visited in
/// `(unified_ts, silver_id)` order, so the result is independent of input
/// order. Groups left empty by the transform produce no artifact.
pub fn compute_gold(
    ctx: &GoldContext<'_>,
    silver: &[SilverRecord],
    transform_version: u32,
) -> Result<Vec<GoldArtifact>, RefineError> {
    ctx.check_granularity()?;
    let mut groups: BTreeMap<(&str, &str, Timestamp), Vec<&SilverRecord>> = BTreeMap::new();
    for rec in silver {
        let bucket = rec.unified_ts.floor_to(ctx.granularity);
        groups
            .entry((rec.metric_name.as_str(), rec.platform.as_str(), bucket))
            .or_default()
            .push(rec);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((metric, platform, bucket), mut rows) in groups {
        let aggregation = ctx
            .registry
            .series_aggregation(metric)
            .ok_or_else(|| RefineError::UnknownMetric(metric.to_string()))?;
        let logic = ctx.catalog.logic(metric, transform_version).ok_or_else(|| {
            RefineError::UnknownTransformVersion {
                metric_name: metric.to_string(),
                version: transform_version,
            }
        })?;
        rows.sort_by(|a, b| (a.unified_ts, &a.silver_id).cmp(&(b.unified_ts, &b.silver_id)));
        let computed_from = rows.len() as u64;
        let values: Vec<f64> = rows
            .iter()
            .map(|r| r.value)
            .filter(|v| logic.admits(*v))
            .collect();
        let Some(value) = aggregate(aggregation, &values) else {
            continue;
        };
        out.push(GoldArtifact {
            gold_key: gold_key(metric, platform, bucket, transform_version),
            metric_name: metric.to_string(),
            platform: platform.to_string(),
            bucket_start: bucket,
            value,
            sample_count: values.len() as u64,
            transform_version,
            computed_from,
        });
    }
    out.sort_by(|a, b| a.gold_key.cmp(&b.gold_key));
    Ok(out)
}

/// Aggregates values already in canonical order. `None` for an empty slice.
fn aggregate(aggregation: Aggregation, values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let sum = || values.iter().sum::<f64>();
    Some(match aggregation {
        Aggregation::Sum => sum(),
        Aggregation::Count => values.len() as f64,
        Aggregation::Mean => sum() / values.len() as f64,
        Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregation::Last => *values.last().expect("non-empty"),
    })
}

/// Combines per-bucket Gold values (ascending by bucket) into one figure for a
/// query window. Counts and sums add up, means are weighted by sample count,
/// and a single bucket always rolls up to its own value.
pub fn rollup(aggregation: Aggregation, buckets: &[GoldArtifact]) -> Option<f64> {
    match buckets {
        [] => None,
        [only] => Some(only.value),
        _ => Some(match aggregation {
            Aggregation::Sum | Aggregation::Count => buckets.iter().map(|b| b.value).sum(),
            Aggregation::Mean => {
                let n: u64 = buckets.iter().map(|b| b.sample_count).sum();
                let total: f64 = buckets.iter().map(|b| b.value * b.sample_count as f64).sum();
                if n == 0 {
                    return None;
                }
                total / n as f64
            }
            Aggregation::Max => buckets.iter().map(|b| b.value).fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Min => buckets.iter().map(|b| b.value).fold(f64::INFINITY, f64::min),
            Aggregation::Last => buckets.last().expect("non-empty").value,
        }),
    }
}
