use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;

use crate::refine::harmonize_with_raw;
use crate::serve::{CallError, Principal, Server};
use crate::store::{GoldReader, Store};
use crate::time::TimeRange;

/// Latency percentiles in microseconds, nearest-rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

impl LatencyStats {
    pub fn from_samples(mut samples: Vec<Duration>) -> LatencyStats {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        samples.sort();
        let rank = |p: f64| {
            let i = ((p * samples.len() as f64).ceil() as usize).clamp(1, samples.len()) - 1;
            samples[i].as_micros() as u64
        };
        LatencyStats {
            samples: samples.len(),
            p50_us: rank(0.50),
            p95_us: rank(0.95),
            p99_us: rank(0.99),
            max_us: samples[samples.len() - 1].as_micros() as u64,
        }
    }
}

/// Runs `op(loop_index, iteration)` in `loops` concurrent threads,
/// `per_loop` times each, timing every call.
pub fn latency_under_load(loops: usize, per_loop: usize, op: impl Fn(usize, usize) + Sync) -> LatencyStats {
    let op = &op;
    let samples: Vec<Duration> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..loops.max(1))
            .map(|l| {
                s.spawn(move || {
                    (0..per_loop)
                        .map(|i| {
                            let t = Instant::now();
                            op(l, i);
                            t.elapsed()
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("load thread panicked"))
            .collect()
    });
    LatencyStats::from_samples(samples)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasureRequest {
    pub label: String,
    pub metric_id: String,
    pub platform: String,
    pub window: TimeRange,
    pub concurrency: usize,
    pub calls_per_loop: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MeasurementReport {
    pub scenario: String,
    pub metric_id: String,
    pub platform: String,
    pub window: TimeRange,
    pub raw_event_count: usize,
    pub raw_serialized_bytes: usize,
    pub gold_artifact_count: usize,
    /// Gold artifacts as JSON lines plus the tool result payload.
    pub gold_serialized_bytes: usize,
    pub token_heuristic: &'static str,
    pub raw_tokens_approx: usize,
    pub gold_tokens_approx: usize,
    /// `tools_call` latency, cache included, under concurrent loops.
    pub tool_latency: LatencyStats,
    /// `query_gold` latency for the same window under the same load.
    pub query_latency: LatencyStats,
}

/// Sizes the raw rows and the Gold answer for one metric window, then drives
/// concurrent load against the server and the store.
pub fn measure(
    store: &Store,
    server: &Server,
    principal: &Principal,
    req: &MeasureRequest,
) -> Result<MeasurementReport, CallError> {
    let surface = server.surface();
    let def = surface
        .registry
        .get(&req.metric_id)
        .ok_or_else(|| CallError::UnknownTool(req.metric_id.clone()))?;
    let series = def.retrieval.source_metric.as_str();
    let tool = crate::compiler::tool_name_for(&req.metric_id);

    let raw = harmonize_with_raw(&store.bronze_records());
    let mut raw_event_count = 0;
    let mut lines = BTreeSet::new();
    for (s, line) in &raw {
        if s.metric_name == series && s.platform == req.platform && req.window.contains(s.unified_ts) {
            raw_event_count += 1;
            lines.insert(line.as_str());
        }
    }
    let raw_serialized_bytes: usize = lines.iter().map(|l| l.len() + 1).sum();

    let version = store.current_version(series);
    let gold = store
        .query_gold(series, &req.platform, req.window.start, req.window.end, version)
        .map_err(|e| CallError::UpstreamUnavailable(e.to_string()))?;
    let args = json!({
        "platform": req.platform,
        "start_time": req.window.start.to_rfc3339(),
        "end_time": req.window.end.to_rfc3339(),
    });
    let result = server.tools_call(principal, &tool, &args)?;
    let gold_serialized_bytes = gold
        .iter()
        .map(|a| serde_json::to_vec(a).expect("artifact serializes").len() + 1)
        .sum::<usize>()
        + result.payload.len();

    let tool_latency = latency_under_load(req.concurrency, req.calls_per_loop, |_, _| {
        let _ = server.tools_call(principal, &tool, &args);
    });
    let query_latency = latency_under_load(req.concurrency, req.calls_per_loop, |_, _| {
        let _ = store.query_gold(series, &req.platform, req.window.start, req.window.end, version);
    });

    Ok(MeasurementReport {
        scenario: req.label.clone(),
        metric_id: req.metric_id.clone(),
        platform: req.platform.clone(),
        window: req.window,
        raw_event_count,
        raw_serialized_bytes,
        gold_artifact_count: gold.len(),
        gold_serialized_bytes,
        token_heuristic: "bytes/4",
        raw_tokens_approx: raw_serialized_bytes / 4,
        gold_tokens_approx: gold_serialized_bytes / 4,
        tool_latency,
        query_latency,
    })
}
