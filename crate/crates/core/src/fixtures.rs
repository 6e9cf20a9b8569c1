//! Sample registry and generated fixture corpora for tests, benches and demos.
//!
//! Generated values are multiples of 1/1024, so sums of them are exact in
//! `f64` regardless of summation order.

use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::registry::Registry;
use crate::time::{Timestamp, MILLIS_PER_DAY};

pub const SAMPLE_REGISTRY: &str = r#"registry_version = "2024.1"

[metric.crash_rate]
description = "Crashes per active session"
platforms = ["ios", "android"]
source_metric = "crash_events"
aggregation = "mean"
default_window = "24h"
volatility = "high"
access_category = "stability_read"
unit = "ratio"
threshold_direction = "above"
threshold_warn = 0.05
threshold_critical = 0.10
version = 2

[metric.deploy_count]
description = "Production deployments"
platforms = ["ios", "android", "web"]
source_metric = "deployments"
aggregation = "count"
default_window = "7d"
volatility = "low"
access_category = "delivery_read"
unit = "deployments"
version = 1

[metric.p1_open]
description = "Open P1 incidents"
platforms = ["web"]
source_metric = "incidents"
aggregation = "last"
default_window = "1d"
volatility = "medium"
access_category = "incident_read"
unit = "count"
version = 1
"#;

pub const SAMPLE_IDENTITIES: &str = r#"[principal.ops]
categories = ["stability_read", "delivery_read", "incident_read"]

[principal.analyst]
categories = ["stability_read"]

[principal.guest]
categories = []
"#;

pub fn sample_registry() -> Registry {
    Registry::parse(SAMPLE_REGISTRY).expect("sample registry is valid")
}

/// 2024-01-01T00:00:00Z
pub const EPOCH_2024: Timestamp = Timestamp::from_millis(1_704_067_200_000);

pub fn event_line(event_id: &str, ts: Timestamp, platform: &str, metric: &str, value: f64) -> String {
    json!({
        "event_id": event_id,
        "ts": ts.to_rfc3339(),
        "platform": platform,
        "metric": metric,
        "value": value,
    })
    .to_string()
}

pub fn state_line(entity_id: &str, updated_at: Timestamp, state: Value) -> String {
    json!({
        "entity_id": entity_id,
        "updated_at": updated_at.to_rfc3339(),
        "state": state,
    })
    .to_string()
}

pub fn snapshot_line(interval: Timestamp, rows: Vec<Value>) -> String {
    json!({
        "snapshot_interval": &interval.to_rfc3339()[..10],
        "rows": rows,
    })
    .to_string()
}

/// Parameters of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub start: Timestamp,
    pub days: u32,
    pub crash_events: usize,
    pub platforms: Vec<String>,
    pub incidents: usize,
    pub snapshot_days: u32,
    /// Rows that cannot be harmonized, spread over the sources.
    pub malformed: usize,
}

impl CorpusSpec {
    pub fn new(seed: u64, crash_events: usize) -> Self {
        CorpusSpec {
            seed,
            start: EPOCH_2024,
            days: 2,
            crash_events,
            platforms: vec!["android".into(), "ios".into()],
            incidents: 12,
            snapshot_days: 2,
            malformed: 4,
        }
    }

    pub fn end(&self) -> Timestamp {
        Timestamp::from_millis(self.start.as_millis() + i64::from(self.days) * MILLIS_PER_DAY)
    }
}

/// Files of a corpus written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub config: PathBuf,
    pub registry: PathBuf,
    pub sources: PathBuf,
    pub identities: PathBuf,
    pub data_dir: PathBuf,
    pub crash_fixture: PathBuf,
    pub start: Timestamp,
    pub end: Timestamp,
}

/// Dyadic value in `[0, max_units / 1024]`.
fn dyadic(rng: &mut impl Rng, max_units: u32) -> f64 {
    f64::from(rng.gen_range(0..=max_units)) / 1024.0
}

pub fn crash_event_lines(spec: &CorpusSpec) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span_secs = i64::from(spec.days) * 86_400;
    let mut rows: Vec<(Timestamp, String)> = (0..spec.crash_events)
        .map(|i| {
            let ts = Timestamp::from_millis(spec.start.as_millis() + rng.gen_range(0..span_secs) * 1000);
            let platform = &spec.platforms[rng.gen_range(0..spec.platforms.len())];
            let value = dyadic(&mut rng, 160);
            (ts, event_line(&format!("ev-{}-{i}", spec.seed), ts, platform, "crash_events", value))
        })
        .collect();
    rows.sort();
    let mut lines: Vec<String> = rows.into_iter().map(|(_, l)| l).collect();
    let mid = Timestamp::from_millis(spec.start.as_millis() + 3_600_000);
    for i in 0..spec.malformed {
        let bad = match i % 4 {
            0 => "{\"event_id\": \"broken".to_string(),
            1 => json!({"event_id": format!("bad-{i}"), "ts": "yesterday", "platform": "ios", "metric": "crash_events", "value": 1}).to_string(),
            2 => json!({"event_id": format!("bad-{i}"), "ts": mid.to_rfc3339(), "platform": "ios", "metric": "crash_events"}).to_string(),
            _ => json!({"event_id": format!("bad-{i}"), "platform": "ios", "metric": "crash_events", "value": 1}).to_string(),
        };
        let at = (i * 7919) % (lines.len() + 1);
        lines.insert(at, bad);
    }
    lines
}

pub fn incident_lines(spec: &CorpusSpec) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1c1d);
    let span_secs = i64::from(spec.days) * 86_400;
    let mut rows = Vec::new();
    for i in 0..spec.incidents {
        let opened = spec.start.as_millis() + rng.gen_range(0..span_secs - 7_200) * 1000;
        let id = format!("INC-{i}");
        let field = ["merged_at", "resolved_at", "ts"][i % 3];
        let first = Timestamp::from_millis(opened);
        rows.push((
            first,
            state_line(
                &id,
                first,
                json!({"platform": "web", "metric": "incidents", "value": rng.gen_range(0..6), field: first.to_rfc3339()}),
            ),
        ));
        if i % 4 == 0 {
            // A later update to the same entity; the newest state wins in Silver.
            let later = Timestamp::from_millis(opened + 3_600_000);
            rows.push((
                later,
                state_line(
                    &id,
                    later,
                    json!({"platform": "web", "metric": "incidents", "value": rng.gen_range(0..6), field: first.to_rfc3339()}),
                ),
            ));
        }
    }
    rows.sort();
    let mut lines: Vec<String> = rows.into_iter().map(|(_, l)| l).collect();
    if spec.malformed > 0 {
        let when = Timestamp::from_millis(spec.start.as_millis() + 60_000);
        lines.push(state_line("INC-bad", when, json!({"platform": "web", "metric": "incidents", "value": 1})));
    }
    lines
}

pub fn deployment_lines(spec: &CorpusSpec) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xde9);
    (0..spec.snapshot_days)
        .map(|d| {
            let day = Timestamp::from_millis(spec.start.as_millis() + i64::from(d) * MILLIS_PER_DAY);
            let rows = (0..rng.gen_range(1..6))
                .map(|j| {
                    let platform = ["android", "ios", "web"][rng.gen_range(0..3)];
                    let ts = Timestamp::from_millis(day.as_millis() + rng.gen_range(0..24) * 3_600_000);
                    json!({"entity_id": format!("deploy-{d}-{j}"), "platform": platform, "metric": "deployments", "value": 1, "ts": ts.to_rfc3339()})
                })
                .collect();
            snapshot_line(day, rows)
        })
        .collect()
}

fn write_lines(path: &Path, lines: &[String]) -> io::Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text)
}

/// Writes registry, sources, identities, fixtures and `regal.toml` under `root`.
pub fn write_corpus(root: &Path, spec: &CorpusSpec) -> io::Result<Corpus> {
    let fixtures = root.join("fixtures");
    std::fs::create_dir_all(&fixtures)?;
    let crash_fixture = fixtures.join("crash_events.jsonl");
    write_lines(&crash_fixture, &crash_event_lines(spec))?;
    write_lines(&fixtures.join("incidents.jsonl"), &incident_lines(spec))?;
    write_lines(&fixtures.join("deployments.jsonl"), &deployment_lines(spec))?;

    let registry = root.join("registry.toml");
    std::fs::write(&registry, SAMPLE_REGISTRY)?;
    let identities = root.join("identities.toml");
    std::fs::write(&identities, SAMPLE_IDENTITIES)?;
    let start = spec.start.to_rfc3339();
    let sources = root.join("sources.toml");
    std::fs::write(
        &sources,
        format!(
            r#"[[source]]
id = "crash_events"
pattern = "event_based"
fixture = "fixtures/crash_events.jsonl"
start = "{start}"

[[source]]
id = "incidents"
pattern = "state_based"
fixture = "fixtures/incidents.jsonl"
start = "{start}"

[[source]]
id = "deployments"
pattern = "snapshot"
fixture = "fixtures/deployments.jsonl"
"#
        ),
    )?;
    let config = root.join("regal.toml");
    std::fs::write(
        &config,
        r#"registry = "registry.toml"
sources = "sources.toml"
data_dir = "data"
identity_map = "identities.toml"
bucket_granularity = "1h"
parallelism = 4

[stability]
margin = 0.1
cooldown = "15m"

[[transform]]
metric_name = "crash_events"
version = 2
description = "ignore zero-crash sessions"
logic = "positive_only"
"#,
    )?;
    Ok(Corpus {
        root: root.to_path_buf(),
        data_dir: root.join("data"),
        config,
        registry,
        sources,
        identities,
        crash_fixture,
        start: spec.start,
        end: spec.end(),
    })
}

/// Registry counting crash events per bucket; used with [`five_events`].
pub const COUNT_REGISTRY: &str = r#"registry_version = "count.1"

[metric.crash_count]
description = "Crash events"
platforms = ["ios"]
source_metric = "crash_events"
aggregation = "count"
default_window = "1h"
volatility = "medium"
access_category = "stability_read"
unit = "events"
version = 1
"#;

/// Five iOS crash events in the first hour of 2024, three with a positive
/// value. Counting all rows gives 5; counting positive rows gives 3.
pub fn five_events() -> Vec<String> {
    [0.0, 2.0, 0.0, 1.0, 3.0]
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ts = Timestamp::from_millis(EPOCH_2024.as_millis() + (i as i64 + 1) * 60_000);
            event_line(&format!("five-{i}"), ts, "ios", "crash_events", *v)
        })
        .collect()
}
