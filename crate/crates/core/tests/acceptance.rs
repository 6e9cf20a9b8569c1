//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! the real stdout (bypassing libtest capture) and the test fails if any
//! criterion fails. Set `ACCEPTANCE_ONLY=3,7` to run a subset.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use regal_core::compiler::{compile, verify_alignment, CachePolicy};
use regal_core::config::Resolved;
use regal_core::faults::{Faults, SharedFaults};
use regal_core::fixtures::{
    crash_event_lines, five_events, write_corpus, CorpusSpec, COUNT_REGISTRY, EPOCH_2024,
    SAMPLE_IDENTITIES,
};
use regal_core::harness::{self, InProcess, MeasureRequest};
use regal_core::ingest::{BronzeRecord, ExtractionPattern};
use regal_core::pipeline::{self, PipelineInputs};
use regal_core::pushpath::{
    apply_cooldown, evaluate, resolution_bound, AlertState, AlertStatus, Delivery, MetricStability, Notification,
    NotificationKind, PushEngine, Severity, StabilityConfig,
};
use regal_core::refine::{compute_gold, gold_key, harmonize, silver_id, GoldArtifact, GoldContext, TransformCatalog};
use regal_core::registry::{
    Aggregation, GroupBy, MetricDefinition, Registry, RetrievalSpec, SeverityThresholds, ThresholdDirection,
    VolatilityClass,
};
use regal_core::serve::{IdentityMap, Principal, Server};
use regal_core::store::{ChangeEvent, GoldReader, Store};
use regal_core::time::{TimeRange, Timestamp};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const HOUR_MS: i64 = 3_600_000;

fn hours_after(t: Timestamp, h: i64) -> Timestamp {
    Timestamp::from_millis(t.as_millis() + h * HOUR_MS)
}

/// A generated corpus on disk plus its resolved configuration.
struct Fixture {
    _dir: tempfile::TempDir,
    spec: CorpusSpec,
    config: std::path::PathBuf,
}

impl Fixture {
    fn new(spec: CorpusSpec) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_corpus(dir.path(), &spec).unwrap();
        Fixture {
            _dir: dir,
            spec,
            config: corpus.config,
        }
    }

    fn resolved(&self, data_dir: &Path) -> Resolved {
        Resolved::load_with_data_dir(&self.config, Some(data_dir)).unwrap()
    }
}

/// Full ingest + refine into a fresh store at `data_dir`; returns the dump.
fn full_run(fx: &Fixture, data_dir: &Path, parallelism: usize, faults: SharedFaults) -> Result<String, String> {
    let r = fx.resolved(data_dir);
    let mut inputs = PipelineInputs::from_resolved(&r);
    inputs.parallelism = parallelism;
    let store = pipeline::open_store(&r, faults).map_err(|e| e.to_string())?;
    pipeline::run(&inputs, &store, fx.spec.end()).map_err(|e| e.to_string())?;
    Ok(store.dump_gold(None))
}

// 1 ------------------------------------------------------------------------

fn replay_determinism() -> Check {
    let sizes = [40, 500, 2_000, 6_000, 12_000];
    let root = tempfile::tempdir().unwrap();
    let mut crash_base = None;
    for (i, n) in sizes.into_iter().enumerate() {
        let fx = Fixture::new(CorpusSpec::new(100 + i as u64, n));
        let a = full_run(&fx, &root.path().join(format!("c{i}a")), 1, Faults::new())?;
        let b = full_run(&fx, &root.path().join(format!("c{i}b")), 8, Faults::new())?;
        ensure!(!a.is_empty(), "corpus {i} produced no Gold");
        ensure!(a == b, "corpus {i} ({n} events): dumps differ between runs");
        if n == 2_000 {
            crash_base = Some((fx, a));
        }
    }

    let (fx, clean) = crash_base.expect("crash corpus");
    let probe = Faults::new();
    full_run(&fx, &root.path().join("probe"), 4, probe.clone())?;
    let points: Vec<(String, u64)> = probe.hit_counts().into_iter().filter(|(_, n)| *n > 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc2a5);
    let mut kills = Vec::new();
    for k in 0..20 {
        let (point, hits) = &points[rng.gen_range(0..points.len())];
        let nth = rng.gen_range(0..*hits);
        let dir = root.path().join(format!("crash{k}"));
        let faults = Faults::new();
        faults.arm(point, nth);
        ensure!(
            full_run(&fx, &dir, 4, faults).is_err(),
            "kill point {point}#{nth} was never reached"
        );
        let recovered = full_run(&fx, &dir, 4, Faults::new())?;
        ensure!(recovered == clean, "run killed at {point}#{nth} did not converge");
        kills.push(format!("{point}#{nth}"));
    }
    let distinct: BTreeSet<&str> = kills.iter().map(|k| k.split('#').next().unwrap()).collect();
    Ok(format!(
        "5 corpora (40..12000 events) byte-identical; 20 kills over {} distinct points converged",
        distinct.len()
    ))
}

// 2 ------------------------------------------------------------------------

fn non_interference() -> Check {
    let fx = Fixture::new(CorpusSpec::new(7, 4_000));
    let root = tempfile::tempdir().unwrap();

    let quiet_dir = root.path().join("quiet");
    let r = fx.resolved(&quiet_dir);
    let quiet_store = pipeline::open_store(&r, Faults::new()).unwrap();
    pipeline::run(&PipelineInputs::from_resolved(&r), &quiet_store, fx.spec.end()).map_err(|e| e.to_string())?;
    let quiet = quiet_store.dump_gold(None);
    let quiet_batches = quiet_store.write_batches();

    let loaded_dir = root.path().join("loaded");
    let r = fx.resolved(&loaded_dir);
    let store = Arc::new(pipeline::open_store(&r, Faults::new()).unwrap());
    let server = Arc::new(Server::new(r.registry.clone(), r.policy, store.clone()));
    let tools: Vec<(String, Vec<String>)> = server
        .surface()
        .tools
        .tools
        .iter()
        .map(|t| (t.tool_name.clone(), t.param_schema.platform.iter().cloned().collect()))
        .collect();
    let stop = AtomicBool::new(false);
    let calls = AtomicUsize::new(0);
    let principals: Vec<Principal> = ["ops", "analyst", "guest"].iter().map(|p| r.identities.resolve(p)).collect();
    let (start, end) = (fx.spec.start, fx.spec.end());
    std::thread::scope(|s| {
        for caller in 0..50u64 {
            let transport = InProcess {
                server: server.clone(),
                principal: principals[caller as usize % principals.len()].clone(),
            };
            let (tools, stop, calls) = (&tools, &stop, &calls);
            s.spawn(move || {
                let mut round = 0;
                loop {
                    let script = harness::random_script(caller * 1000 + round, 20, tools, start, end);
                    let t = harness::simulate(&transport, &script);
                    let n = t.entries.iter().filter(|e| e.request["method"] == "tools/call").count();
                    calls.fetch_add(n, Ordering::Relaxed);
                    round += 1;
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                }
            });
        }
        let result = pipeline::run(&PipelineInputs::from_resolved(&r), &store, fx.spec.end());
        // Keep the readers going across a second refine as well.
        let again = pipeline::refine(&PipelineInputs::from_resolved(&r), &store);
        stop.store(true, Ordering::Relaxed);
        result.unwrap();
        again.unwrap();
    });
    let loaded = store.dump_gold(None);
    ensure!(loaded == quiet, "Gold dump differs under read load");
    let n = calls.load(Ordering::Relaxed);
    let audited = server.audit().call_count();
    ensure!(audited == n, "{n} tool calls but {audited} audit entries");
    let extra = store.write_batches() - quiet_batches;
    // The second refine writes nothing new; readers never write.
    ensure!(extra == 0, "read load caused {extra} extra write batches");
    Ok(format!("{n} scripted tool calls from 50 callers; dumps byte-identical, no extra writes"))
}

// 3 ------------------------------------------------------------------------

fn random_definition(rng: &mut ChaCha8Rng, i: usize) -> MetricDefinition {
    let platforms = ["ios", "android", "web", "desktop"];
    let n = rng.gen_range(1..=platforms.len());
    let scope: BTreeSet<String> = platforms.choose_multiple(rng, n).map(|s| s.to_string()).collect();
    let thresholds = rng.gen_bool(0.5).then(|| {
        let warn = f64::from(rng.gen_range(1..1000u32)) / 100.0;
        let delta = f64::from(rng.gen_range(0..500u32)) / 100.0;
        if rng.gen_bool(0.5) {
            SeverityThresholds { warn, critical: warn + delta, direction: ThresholdDirection::Above }
        } else {
            SeverityThresholds { warn, critical: warn - delta, direction: ThresholdDirection::Below }
        }
    });
    MetricDefinition {
        metric_id: format!("metric_{i}_{}", rng.gen_range(0..1000)),
        description: format!("Generated metric number {}", rng.gen::<u32>()),
        platform_scope: scope,
        retrieval: RetrievalSpec {
            source_metric: format!("series_{i}"),
            aggregation: *Aggregation::ALL.choose(rng).unwrap(),
            default_window: Duration::from_secs(rng.gen_range(1..=7 * 24) * 3600),
            allowed_group_by: BTreeSet::from([GroupBy::Platform]),
        },
        volatility_class: *VolatilityClass::ALL.choose(rng).unwrap(),
        access_category: ["stability_read", "delivery_read", "incident_read"].choose(rng).unwrap().to_string(),
        thresholds,
        unit: ["ratio", "count", "ms"].choose(rng).unwrap().to_string(),
        definition_version: rng.gen_range(1..10),
    }
}

fn mutate(rng: &mut ChaCha8Rng, d: &mut MetricDefinition, field: usize) {
    match field {
        0 => d.description.push('!'),
        1 => {
            if !d.platform_scope.insert("tv".into()) {
                d.platform_scope.remove("tv");
            }
        }
        2 => d.retrieval.source_metric.push_str("_v2"),
        3 => {
            let next = Aggregation::ALL.iter().copied().find(|a| *a != d.retrieval.aggregation).unwrap();
            d.retrieval.aggregation = next;
        }
        4 => d.retrieval.default_window += Duration::from_secs(3600),
        5 => {
            d.volatility_class = *VolatilityClass::ALL
                .iter()
                .find(|v| **v != d.volatility_class)
                .unwrap()
        }
        6 => d.access_category.push_str("_x"),
        7 => {
            d.thresholds = match d.thresholds {
                None => Some(SeverityThresholds { warn: 1.0, critical: 2.0, direction: ThresholdDirection::Above }),
                Some(mut t) if rng.gen_bool(0.5) => {
                    t.warn += if t.direction == ThresholdDirection::Above { -0.5 } else { 0.5 };
                    Some(t)
                }
                Some(_) => None,
            }
        }
        8 => d.unit.push_str("_per_s"),
        _ => d.definition_version += 1,
    }
}

fn compile_determinism() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let mut mutations = 0;
    for case in 0..200 {
        let n = rng.gen_range(1..8);
        let defs: Vec<MetricDefinition> = (0..n).map(|i| random_definition(&mut rng, i)).collect();
        let r = Registry::new(format!("gen.{case}"), defs.clone()).map_err(|e| format!("case {case}: {e}"))?;
        let bytes = compile(&r).canonical_bytes();
        ensure!(bytes == compile(&r).canonical_bytes(), "case {case}: recompilation differs");
        let reparsed = Registry::parse(&r.to_source()).map_err(|e| e.to_string())?;
        ensure!(compile(&reparsed).canonical_bytes() == bytes, "case {case}: source round trip changed tools");
        let mut shuffled = defs.clone();
        shuffled.shuffle(&mut rng);
        let r2 = Registry::new(format!("gen.{case}"), shuffled).unwrap();
        ensure!(compile(&r2).canonical_bytes() == bytes, "case {case}: entry order leaked into output");
        let report = verify_alignment(&compile(&r), &r);
        ensure!(report.is_empty(), "case {case}: {report:?}");

        for field in 0..10 {
            let mut changed = defs.clone();
            let target = rng.gen_range(0..changed.len());
            mutate(&mut rng, &mut changed[target], field);
            let Ok(m) = Registry::new(format!("gen.{case}"), changed) else {
                return Err(format!("case {case}: mutation {field} made the registry invalid"));
            };
            ensure!(
                !verify_alignment(&compile(&r), &m).is_empty(),
                "case {case}: mutation of field {field} went undetected"
            );
            mutations += 1;
        }
    }
    Ok(format!("200 registries stable and aligned; {mutations} single-field mutations all detected"))
}

// 4 ------------------------------------------------------------------------

fn gold_store() -> Arc<Store> {
    let s = Store::in_memory();
    let mut arts = Vec::new();
    for h in 0..48 {
        for p in ["ios", "android"] {
            let b = hours_after(EPOCH_2024, h);
            arts.push(GoldArtifact {
                gold_key: gold_key("crash_events", p, b, 1),
                metric_name: "crash_events".into(),
                platform: p.into(),
                bucket_start: b,
                value: f64::from(h as u32) / 1024.0,
                sample_count: 3,
                transform_version: 1,
                computed_from: 3,
            });
        }
    }
    s.upsert_gold(&arts).unwrap();
    Arc::new(s)
}

fn random_value(rng: &mut ChaCha8Rng) -> Value {
    match rng.gen_range(0..8) {
        0 => json!(null),
        1 => json!(rng.gen::<i32>()),
        2 => json!("ios"),
        3 => json!([1, "x"]),
        4 => json!({"nested": true}),
        5 => json!(hours_after(EPOCH_2024, rng.gen_range(-5..60)).to_rfc3339()),
        6 => json!("2024-13-45T99:00:00Z"),
        _ => json!(["ios", "android", "web", "", "IOS"][rng.gen_range(0..5)]),
    }
}

fn bounded_action_space() -> Check {
    let registry = regal_core::fixtures::sample_registry();
    let server = Server::new(registry, CachePolicy::default(), gold_store());
    let compiled: BTreeSet<String> = server.surface().tools.tool_names().iter().map(|s| s.to_string()).collect();
    let ids = IdentityMap::parse(SAMPLE_IDENTITIES).unwrap();
    let principals = ["ops", "analyst", "guest", "intruder"].map(|p| ids.resolve(p));
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0b);
    let decoys = [
        "get_crash_rate ", "GET_CRASH_RATE", "get_crash_rate;drop", "crash_rate", "get_", "", "get_crash_events",
        "tools/call", "get_deploy_count\0", "get_p1_open/../crash_rate",
    ];
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..1_000 {
        let tool: String = match rng.gen_range(0..4) {
            0 => compiled.iter().nth(rng.gen_range(0..compiled.len())).unwrap().clone(),
            1 => decoys[rng.gen_range(0..decoys.len())].to_string(),
            2 => (0..rng.gen_range(1..16)).map(|_| rng.gen_range(b'!'..=b'~') as char).collect(),
            _ => format!("get_{}", ["crash_rate", "secrets", "deploy_count", "users"][rng.gen_range(0..4)]),
        };
        let args = if rng.gen_bool(0.4) {
            let a = rng.gen_range(-2..50);
            let platform = ["ios", "android", "web"][rng.gen_range(0..3)];
            json!({
                "platform": platform,
                "start_time": hours_after(EPOCH_2024, a).to_rfc3339(),
                "end_time": hours_after(EPOCH_2024, a + rng.gen_range(-1..6)).to_rfc3339(),
            })
        } else {
            let mut m = serde_json::Map::new();
            for _ in 0..rng.gen_range(0..5) {
                let k = ["platform", "start_time", "end_time", "limit", "sql"][rng.gen_range(0..5)];
                m.insert(k.into(), random_value(&mut rng));
            }
            if rng.gen_bool(0.1) {
                random_value(&mut rng)
            } else {
                Value::Object(m)
            }
        };
        let who = &principals[rng.gen_range(0..principals.len())];
        let outside = !compiled.contains(&tool);
        match server.tools_call(who, &tool, &args) {
            Ok(r) => {
                ensure!(!outside, "attempt {i}: data returned for uncompiled tool {tool:?}");
                ensure!(who.may_use(server.surface().tools.get(&tool).unwrap()), "attempt {i}: ACL bypass");
                let p = r.parsed();
                ensure!(tool == format!("get_{}", p.metric), "attempt {i}: result for a different metric");
                *tally.entry("ok").or_default() += 1;
            }
            Err(e) => {
                ensure!(
                    matches!(e.code(), "unknown_tool" | "access_denied" | "invalid_arguments"),
                    "attempt {i}: unexpected error {e}"
                );
                ensure!(!outside || e.code() == "unknown_tool", "attempt {i}: {tool:?} not rejected as unknown");
                *tally.entry(e.code()).or_default() += 1;
            }
        }
    }
    let audited = server.audit().call_count();
    ensure!(audited == 1_000, "audit holds {audited} entries for 1000 attempts");
    Ok(format!("1000 fuzzed calls -> {tally:?}; audit entries = 1000"))
}

// 5 ------------------------------------------------------------------------

fn oracle(lines: &[String], agg: Aggregation) -> BTreeMap<(String, i64), (f64, u64)> {
    let mut groups: BTreeMap<(String, i64), Vec<(i64, String, f64)>> = BTreeMap::new();
    for line in lines {
        let Ok(Value::Object(o)) = serde_json::from_str::<Value>(line) else { continue };
        let (Some(id), Some(ts), Some(p), Some(_), Some(v)) = (
            o.get("event_id").and_then(Value::as_str),
            o.get("ts").and_then(Value::as_str),
            o.get("platform").and_then(Value::as_str),
            o.get("metric").and_then(Value::as_str),
            o.get("value").and_then(Value::as_f64),
        ) else {
            continue;
        };
        let Ok(ts) = Timestamp::parse(ts) else { continue };
        let ms = ts.as_millis();
        let bucket = ms - ms.rem_euclid(HOUR_MS);
        let sid = silver_id("crash_events", id, ts);
        groups.entry((p.to_string(), bucket)).or_default().push((ms, sid, v));
    }
    groups
        .into_iter()
        .map(|(k, mut rows)| {
            rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
            let vals: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let n = vals.len() as f64;
            let v = match agg {
                Aggregation::Count => n,
                Aggregation::Sum => vals.iter().sum(),
                Aggregation::Mean => vals.iter().sum::<f64>() / n,
                Aggregation::Max => vals.iter().cloned().fold(f64::MIN, f64::max),
                Aggregation::Min => vals.iter().cloned().fold(f64::MAX, f64::min),
                Aggregation::Last => *vals.last().unwrap(),
            };
            (k, (v, vals.len() as u64))
        })
        .collect()
}

fn aggregation_oracle() -> Check {
    let mut fixtures: Vec<Vec<String>> = vec![five_events()];
    for (i, n) in [10, 100, 1_000, 5_000, 10_000].into_iter().enumerate() {
        fixtures.push(crash_event_lines(&CorpusSpec::new(500 + i as u64, n)));
    }
    let window = TimeRange::new(hours_after(EPOCH_2024, -24), hours_after(EPOCH_2024, 24 * 5));
    let mut compared = 0;
    for (f, lines) in fixtures.iter().enumerate() {
        let payload = (lines.join("\n") + "\n").into_bytes();
        let bronze = BronzeRecord::new("crash_events", ExtractionPattern::EventBased, window, payload, EPOCH_2024);
        let silver = harmonize(&[bronze]).silver;
        for agg in Aggregation::ALL {
            let reg = Registry::parse(&COUNT_REGISTRY.replace("\"count\"", &format!("\"{}\"", agg.as_str()))).unwrap();
            let catalog = TransformCatalog::default();
            let ctx = GoldContext { registry: &reg, catalog: &catalog, granularity: Duration::from_secs(3600) };
            let got: BTreeMap<(String, i64), (f64, u64)> = compute_gold(&ctx, &silver, 1)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|a| ((a.platform, a.bucket_start.as_millis()), (a.value, a.sample_count)))
                .collect();
            let want = oracle(lines, agg);
            ensure!(
                got.keys().collect::<Vec<_>>() == want.keys().collect::<Vec<_>>(),
                "fixture {f} {agg}: bucket sets differ"
            );
            for (k, (gv, gn)) in &got {
                let (wv, wn) = want[k];
                ensure!(*gn == wn, "fixture {f} {agg} {k:?}: sample_count {gn} vs {wn}");
                let ok = if agg == Aggregation::Mean {
                    (gv - wv).abs() <= 1e-12 * wv.abs().max(f64::MIN_POSITIVE)
                } else {
                    gv.to_bits() == wv.to_bits()
                };
                ensure!(ok, "fixture {f} {agg} {k:?}: {gv} vs oracle {wv}");
                compared += 1;
            }
        }
    }
    Ok(format!("{} fixtures x 6 operators, {compared} buckets equal to the brute-force oracle", fixtures.len()))
}

// 6 ------------------------------------------------------------------------

fn five_event_config(dir: &Path) -> std::path::PathBuf {
    std::fs::write(dir.join("registry.toml"), COUNT_REGISTRY).unwrap();
    std::fs::write(dir.join("five.jsonl"), five_events().join("\n") + "\n").unwrap();
    std::fs::write(
        dir.join("sources.toml"),
        format!(
            "[[source]]\nid = \"crash_events\"\npattern = \"event_based\"\nfixture = \"five.jsonl\"\nstart = \"{}\"\n",
            EPOCH_2024.to_rfc3339()
        ),
    )
    .unwrap();
    let cfg = dir.join("regal.toml");
    std::fs::write(
        &cfg,
        "registry = \"registry.toml\"\nsources = \"sources.toml\"\ndata_dir = \"data\"\n\n[[transform]]\nmetric_name = \"crash_events\"\nversion = 2\ndescription = \"positive rows only\"\nlogic = \"positive_only\"\n",
    )
    .unwrap();
    cfg
}

fn backfill_correctness() -> Check {
    let root = tempfile::tempdir().unwrap();
    let cfg = five_event_config(root.path());
    let hour = TimeRange::new(EPOCH_2024, hours_after(EPOCH_2024, 1));
    let now = hours_after(EPOCH_2024, 1);

    let prepare = |name: &str, faults: SharedFaults| {
        let r = Resolved::load_with_data_dir(&cfg, Some(&root.path().join(name))).unwrap();
        let inputs = PipelineInputs::from_resolved(&r);
        let store = pipeline::open_store(&r, faults).unwrap();
        pipeline::run(&inputs, &store, now).unwrap();
        (r, inputs, store)
    };
    let (_r, inputs, store) = prepare("clean", Faults::new());
    let value = |s: &Store, v| s.query_gold("crash_events", "ios", hour.start, hour.end, v).unwrap()[0].value;
    ensure!(value(&store, 1) == 5.0, "v1 value {} != 5", value(&store, 1));
    let bronze_before = serde_json::to_vec(&store.bronze_records()).unwrap();
    pipeline::backfill(&inputs, &store, "crash_events", 2, Some(hour)).map_err(|e| e.to_string())?;
    let (v1, v2) = (value(&store, 1), value(&store, 2));
    ensure!((v1, v2) == (5.0, 3.0), "after backfill v1={v1} v2={v2}");
    ensure!(store.current_version("crash_events") == 2, "current version not flipped");
    ensure!(serde_json::to_vec(&store.bronze_records()).unwrap() == bronze_before, "Bronze changed");
    let clean = store.dump_gold(None);

    let points = ["backfill.before_chunk", "store.before_commit", "backfill.before_flip", "store.manifest_tmp"];
    for (i, point) in points.iter().enumerate() {
        let faults = Faults::new();
        let name = format!("crash{i}");
        let (_r, inputs, store) = prepare(&name, faults.clone());
        faults.arm(point, 0);
        ensure!(
            pipeline::backfill(&inputs, &store, "crash_events", 2, Some(hour)).is_err(),
            "{point} not reached"
        );
        drop(store);
        let r = Resolved::load_with_data_dir(&cfg, Some(&root.path().join(&name))).unwrap();
        let store = pipeline::open_store(&r, Faults::new()).unwrap();
        if store.current_version("crash_events") == 1 {
            pipeline::backfill(&inputs, &store, "crash_events", 2, Some(hour)).map_err(|e| e.to_string())?;
        }
        ensure!(store.dump_gold(None) == clean, "backfill killed at {point} did not converge");
    }
    Ok("v1=5, v2=3, both retrievable; Bronze unchanged; 4 interrupted backfills converged".into())
}

// 7 and 12 -----------------------------------------------------------------

/// Inserts one crash_events artifact per hour and platform; every change
/// event is an insert, so stored values equal event values.
fn alert_stream(seed: u64) -> (Arc<Store>, Vec<ChangeEvent>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = [0.01, 0.03, 0.044, 0.047, 0.049, 0.05, 0.07, 0.1, 0.2];
    let store = Store::in_memory();
    for h in 0..72 {
        let b = hours_after(EPOCH_2024, h);
        let arts: Vec<GoldArtifact> = ["android", "ios"]
            .iter()
            .map(|p| GoldArtifact {
                gold_key: gold_key("crash_events", p, b, 1),
                metric_name: "crash_events".into(),
                platform: p.to_string(),
                bucket_start: b,
                value: *levels.choose(&mut rng).unwrap(),
                sample_count: 10,
                transform_version: 1,
                computed_from: 10,
            })
            .collect();
        store.upsert_gold(&arts).unwrap();
    }
    let events = store.retained_changes();
    (Arc::new(store), events)
}

fn engine() -> PushEngine {
    PushEngine::in_memory(Arc::new(regal_core::fixtures::sample_registry()), StabilityConfig::default())
}

type RunResult = (BTreeMap<String, AlertState>, BTreeSet<String>, Vec<Notification>);

fn run_engine(store: &Store, events: &[ChangeEvent]) -> RunResult {
    let mut e = engine();
    let mut sent = Vec::new();
    for ev in events {
        sent.extend(e.handle(ev, store).unwrap());
    }
    let outbox: BTreeSet<String> = e.outbox().records().iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    (e.book().states.clone(), outbox, sent)
}

/// Interleaves per-platform queues at random, with immediate duplicates and
/// replays of already-delivered suffixes (as after a reconnect).
fn schedule(events: &[ChangeEvent], rng: &mut ChaCha8Rng) -> Vec<ChangeEvent> {
    let mut queues: BTreeMap<&str, Vec<&ChangeEvent>> = BTreeMap::new();
    for e in events {
        queues.entry(e.platform.as_str()).or_default().push(e);
    }
    let mut next: BTreeMap<&str, usize> = queues.keys().map(|k| (*k, 0)).collect();
    let mut out: Vec<ChangeEvent> = Vec::new();
    loop {
        let live: Vec<&str> = next.iter().filter(|(k, i)| **i < queues[*k].len()).map(|(k, _)| *k).collect();
        let Some(&k) = live.choose(rng) else { break };
        let i = next[k];
        out.push(queues[k][i].clone());
        if rng.gen_bool(0.15) {
            out.push(queues[k][i].clone());
        }
        if i > 0 && rng.gen_bool(0.05) {
            let from = rng.gen_range(0..i);
            out.extend(queues[k][from..=i].iter().map(|e| (*e).clone()));
        }
        *next.get_mut(k).unwrap() += 1;
    }
    out
}

fn at_least_once() -> Check {
    let (store, events) = alert_stream(0xa1);
    let (clean_states, clean_outbox, _) = run_engine(&store, &events);
    ensure!(clean_outbox.len() >= 4, "clean run produced only {} notifications", clean_outbox.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0x5c4ed);
    let mut delivered = 0;
    for s in 0..100 {
        let sched = schedule(&events, &mut rng);
        delivered += sched.len();
        let (states, outbox, _) = run_engine(&store, &sched);
        ensure!(states == clean_states, "schedule {s}: final alert state differs");
        ensure!(outbox == clean_outbox, "schedule {s}: notification set differs");
    }
    Ok(format!(
        "100 schedules ({delivered} deliveries of {} events) converge; {} notifications each",
        events.len(),
        clean_outbox.len()
    ))
}

fn shared_semantics() -> Check {
    let (store, events) = alert_stream(0xa1);
    let (_, _, sent) = run_engine(&store, &events);
    let server = Server::new(regal_core::fixtures::sample_registry(), CachePolicy::default(), store.clone());
    let ops = IdentityMap::parse(SAMPLE_IDENTITIES).unwrap().resolve("ops");
    for n in &sent {
        let args = json!({
            "platform": n.platform,
            "start_time": n.emitted_at.to_rfc3339(),
            "end_time": hours_after(n.emitted_at, 1).to_rfc3339(),
        });
        let p = server
            .tools_call(&ops, &format!("get_{}", n.metric_id), &args)
            .map_err(|e| e.to_string())?
            .parsed();
        ensure!(p.buckets.len() == 1, "{}: expected one bucket", n.dedup_key);
        let pulled = p.buckets[0].value;
        ensure!(pulled.to_bits() == n.value.to_bits(), "{}: pull {pulled} vs push {}", n.dedup_key, n.value);
        ensure!(
            p.aggregate_value.map(f64::to_bits) == Some(n.value.to_bits()),
            "{}: aggregate differs",
            n.dedup_key
        );
        let key = gold_key("crash_events", &n.platform, n.emitted_at, 1);
        ensure!(n.gold_key == key, "{}: notification names another artifact", n.dedup_key);
    }
    ensure!(!sent.is_empty(), "no notifications to compare");
    Ok(format!("{} notifications; pulled bucket values bit-identical", sent.len()))
}

// 8 ------------------------------------------------------------------------

fn event_at(secs: i64, value: f64) -> ChangeEvent {
    let bucket = Timestamp::from_secs(secs);
    ChangeEvent {
        sequence: 1,
        gold_key: gold_key("crash_events", "ios", bucket, 1),
        metric_name: "crash_events".into(),
        platform: "ios".into(),
        bucket_start: bucket,
        transform_version: 1,
        old_value: None,
        new_value: value,
        kind: regal_core::store::ChangeKind::Insert,
    }
}

fn hysteresis() -> Check {
    use NotificationKind::*;
    use Severity::*;
    // Hand-evaluated: (thresholds, [past bound, in band, warn zone, critical zone])
    let tables = [
        (SeverityThresholds { warn: 0.05, critical: 0.10, direction: ThresholdDirection::Above }, [0.044, 0.049, 0.06, 0.12]),
        (SeverityThresholds { warn: 10.0, critical: 5.0, direction: ThresholdDirection::Below }, [11.5, 10.5, 7.0, 3.0]),
    ];
    let stab = MetricStability { margin: 0.1, cooldown: Duration::from_secs(900) };
    let mut cells = 0;
    for (t, [past, band, warn, crit]) in tables {
        let inactive = AlertState::new("crash_rate", "ios");
        let firing = |sev| AlertState {
            status: AlertStatus::Firing,
            severity: Some(sev),
            fired_at: Some(Timestamp::from_secs(0)),
            resolution_bound: Some(resolution_bound(&t, 0.1)),
            ..inactive.clone()
        };
        let expected = [
            (inactive.clone(), past, None, None),
            (inactive.clone(), band, None, None),
            (inactive.clone(), warn, Some(Warn), Some(Fired)),
            (inactive.clone(), crit, Some(Critical), Some(Fired)),
            (firing(Warn), past, None, Some(Resolved)),
            (firing(Warn), band, Some(Warn), None),
            (firing(Warn), warn, Some(Warn), None),
            (firing(Warn), crit, Some(Critical), Some(Escalated)),
            (firing(Critical), past, None, Some(Resolved)),
            (firing(Critical), band, Some(Critical), None),
            (firing(Critical), warn, Some(Critical), None),
            (firing(Critical), crit, Some(Critical), None),
        ];
        for (start, v, sev, kind) in expected {
            let (next, n) = evaluate(&start, &event_at(3600, v), &t, &stab);
            ensure!(
                next.severity == sev && n.as_ref().map(|n| n.kind) == kind,
                "{:?} {:?} @ {v}: got {:?}/{:?}",
                t.direction,
                start.severity,
                next.severity,
                n.map(|n| n.kind)
            );
            cells += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x4e5);
    let mut steps = 0;
    for w in 0..1_000 {
        let above = rng.gen_bool(0.5);
        let warn = rng.gen_range(0.5..100.0);
        let margin = rng.gen_range(0.01..0.5);
        let t = if above {
            SeverityThresholds { warn, critical: warn * 2.0, direction: ThresholdDirection::Above }
        } else {
            SeverityThresholds { warn, critical: warn / 2.0, direction: ThresholdDirection::Below }
        };
        let stab = MetricStability { margin, cooldown: Duration::from_secs(900) };
        let bound = resolution_bound(&t, margin);
        let (s, first) = evaluate(&AlertState::new("m", "ios"), &event_at(0, warn), &t, &stab);
        ensure!(first.map(|n| n.kind) == Some(Fired), "walk {w}: initial crossing did not fire");
        let (lo, hi) = if above { (bound, warn) } else { (warn, bound) };
        let mut s = s;
        let mut v = (lo + hi) / 2.0;
        for i in 1..=50 {
            v = (v + rng.gen_range(-0.3..0.3) * (hi - lo)).clamp(lo, hi);
            if v <= lo || v >= hi {
                v = (lo + hi) / 2.0;
            }
            let (next, n) = evaluate(&s, &event_at(i * 3600, v), &t, &stab);
            ensure!(n.is_none(), "walk {w} step {i}: value {v} in band ({lo}, {hi}) notified");
            s = next;
            steps += 1;
        }
    }
    Ok(format!("{cells} transition cells match; 1000 in-band walks ({steps} steps) silent"))
}

// 9 ------------------------------------------------------------------------

fn fired(secs: i64, kind: NotificationKind) -> Notification {
    let (_, n) = evaluate(
        &AlertState::new("crash_rate", "ios"),
        &event_at(secs, 0.06),
        &SeverityThresholds { warn: 0.05, critical: 0.10, direction: ThresholdDirection::Above },
        &MetricStability { margin: 0.1, cooldown: Duration::from_secs(900) },
    );
    Notification { kind, ..n.unwrap() }
}

fn cooldown() -> Check {
    let cd = Duration::from_secs(900);
    let mut s = AlertState::new("crash_rate", "ios");
    let mut delivered = Vec::new();
    for t in [0, 300, 1000] {
        let (d, next) = apply_cooldown(&fired(t, NotificationKind::Fired), &s, cd);
        if d == Delivery::Deliver {
            delivered.push(t);
        }
        s = next;
    }
    ensure!(delivered == [0, 1000], "deliveries at {delivered:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(0xc001);
    let mut resolved = 0;
    for _ in 0..200 {
        let mut s = AlertState::new("crash_rate", "ios");
        let mut t = 0;
        for _ in 0..30 {
            t += rng.gen_range(0..1200);
            let kind = *[NotificationKind::Fired, NotificationKind::Escalated, NotificationKind::Resolved]
                .choose(&mut rng)
                .unwrap();
            let (d, next) = apply_cooldown(&fired(t, kind), &s, cd);
            if kind == NotificationKind::Resolved {
                ensure!(d == Delivery::Deliver, "resolution at {t}s suppressed");
                resolved += 1;
            }
            s = next;
        }
    }
    Ok(format!("deliveries at 0s and 1000s only; {resolved} randomized resolutions all delivered"))
}

// 10 -----------------------------------------------------------------------

fn one_day_spec(seed: u64, n: usize) -> CorpusSpec {
    CorpusSpec {
        days: 1,
        platforms: vec!["ios".into()],
        ..CorpusSpec::new(seed, n)
    }
}

fn measured(n: usize, window: TimeRange) -> Result<harness::MeasurementReport, String> {
    let fx = Fixture::new(one_day_spec(77, n));
    let dir = tempfile::tempdir().unwrap();
    let r = fx.resolved(dir.path());
    let store = Arc::new(pipeline::open_store(&r, Faults::new()).unwrap());
    pipeline::run(&PipelineInputs::from_resolved(&r), &store, fx.spec.end()).map_err(|e| e.to_string())?;
    let server = Server::new(r.registry.clone(), r.policy, store.clone());
    let req = MeasureRequest {
        label: format!("{n} events"),
        metric_id: "crash_rate".into(),
        platform: "ios".into(),
        window,
        concurrency: 4,
        calls_per_loop: 25,
    };
    harness::measure(&store, &server, &r.identities.resolve("ops"), &req).map_err(|e| e.to_string())
}

fn token_scaling() -> Check {
    let day = TimeRange::new(EPOCH_2024, hours_after(EPOCH_2024, 24));
    let small = measured(10_000, day)?;
    let large = measured(20_000, day)?;
    let buckets = ((day.end.as_millis() - day.start.as_millis()) / HOUR_MS) as usize;
    ensure!(small.gold_artifact_count == buckets, "{} artifacts for {buckets} buckets", small.gold_artifact_count);
    ensure!(large.gold_artifact_count == buckets, "{} artifacts after doubling", large.gold_artifact_count);
    let raw = large.raw_serialized_bytes as f64 / small.raw_serialized_bytes as f64;
    let gold = (large.gold_serialized_bytes as f64 / small.gold_serialized_bytes as f64 - 1.0).abs();
    ensure!((1.8..=2.2).contains(&raw), "raw bytes grew {raw:.3}x");
    ensure!(gold < 0.05, "gold bytes changed {:.2}%", gold * 100.0);
    let empty = measured(200, TimeRange::new(hours_after(EPOCH_2024, -48), hours_after(EPOCH_2024, -24)))?;
    ensure!(empty.raw_event_count == 0 && empty.gold_artifact_count == 0, "empty window not empty");
    Ok(format!(
        "raw {} -> {} bytes ({raw:.2}x); gold {} -> {} bytes ({:+.2}%); {buckets} artifacts; empty window {} gold bytes",
        small.raw_serialized_bytes,
        large.raw_serialized_bytes,
        small.gold_serialized_bytes,
        large.gold_serialized_bytes,
        gold * 100.0,
        empty.gold_serialized_bytes
    ))
}

// 11 -----------------------------------------------------------------------

fn latency_shape() -> Check {
    let fx = Fixture::new(CorpusSpec::new(11, 10_000));
    let dir = tempfile::tempdir().unwrap();
    let r = fx.resolved(dir.path());
    let inputs = PipelineInputs::from_resolved(&r);
    let small = Store::in_memory();
    let large = Store::in_memory();
    for s in [&small, &large] {
        let mut i = inputs.clone();
        i.state_dir = dir.path().join(format!("cursors{}", s.stats().gold));
        let _ = std::fs::remove_dir_all(&i.state_dir);
        pipeline::run(&i, s, fx.spec.end()).map_err(|e| e.to_string())?;
    }
    // Grow the large store 10x with Gold outside the queried days.
    let base = large.stats().gold;
    let mut filler = Vec::new();
    let mut h = 0;
    while filler.len() < base * 9 {
        let b = hours_after(EPOCH_2024, -24 * 30 - h);
        for p in ["ios", "android"] {
            filler.push(GoldArtifact {
                gold_key: gold_key("crash_events", p, b, 1),
                metric_name: "crash_events".into(),
                platform: p.into(),
                bucket_start: b,
                value: 0.5,
                sample_count: 1,
                transform_version: 1,
                computed_from: 1,
            });
        }
        h += 1;
    }
    for chunk in filler.chunks(512) {
        large.upsert_gold(chunk).unwrap();
    }
    let (n_small, n_large) = (small.stats().gold, large.stats().gold);
    ensure!(n_large >= 10 * n_small, "large store has {n_large} artifacts vs {n_small}");

    let (t1, t2) = (hours_after(EPOCH_2024, 10), hours_after(EPOCH_2024, 13));
    let scans = |s: &Store| s.query_gold_with_stats("crash_events", "ios", t1, t2, 1).unwrap();
    let (a, sa) = scans(&small);
    let (b, sb) = scans(&large);
    ensure!(a == b && a.len() == 3, "query results differ or are not 3 buckets");
    ensure!(sa == sb, "partition scans differ: {sa:?} vs {sb:?}");

    let p99 = |s: &Store| {
        let mut ns: Vec<u128> = std::thread::scope(|scope| {
            let loops: Vec<_> = (0..20)
                .map(|_| {
                    scope.spawn(|| {
                        (0..400)
                            .map(|_| {
                                let t = Instant::now();
                                std::hint::black_box(s.query_gold("crash_events", "ios", t1, t2, 1).unwrap());
                                t.elapsed().as_nanos()
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            loops.into_iter().flat_map(|h| h.join().unwrap()).collect()
        });
        ns.sort_unstable();
        ns[ns.len() * 99 / 100]
    };
    // Alternate and take the median of several trials to damp scheduler noise.
    let (mut ps, mut pl) = (Vec::new(), Vec::new());
    for _ in 0..7 {
        ps.push(p99(&small));
        pl.push(p99(&large));
    }
    ps.sort_unstable();
    pl.sort_unstable();
    let (ms, ml) = (ps[3].max(1), pl[3].max(1));
    let ratio = ml as f64 / ms as f64;
    ensure!(ratio < 2.0, "p99 {ml}ns (large) vs {ms}ns (small): ratio {ratio:.2}");
    Ok(format!(
        "{n_small} vs {n_large} Gold artifacts; p99 {ms}ns vs {ml}ns (ratio {ratio:.2}); {} partitions scanned each",
        sa.partitions_scanned
    ))
}

// ---------------------------------------------------------------------------

fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, &str, fn() -> Check); 12] = [
        (1, "replay determinism", replay_determinism),
        (2, "non-interference under read load", non_interference),
        (3, "compile determinism and drift detection", compile_determinism),
        (4, "bounded action space", bounded_action_space),
        (5, "aggregation oracle equivalence", aggregation_oracle),
        (6, "backfill correctness", backfill_correctness),
        (7, "at-least-once convergence", at_least_once),
        (8, "hysteresis without flapping", hysteresis),
        (9, "cooldown", cooldown),
        (10, "token scaling shape", token_scaling),
        (11, "retrieval latency shape", latency_shape),
        (12, "push/pull shared semantics", shared_semantics),
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => report(&format!("acceptance {n:>2} PASS  {name} ({secs:.1}s): {detail}")),
            Err(why) => {
                report(&format!("acceptance {n:>2} FAIL  {name} ({secs:.1}s): {why}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
