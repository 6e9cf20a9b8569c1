use std::sync::Arc;
use std::time::Duration;

use serde_json::json;

use super::rpc::handle_text;
use super::*;
use crate::fixtures::{sample_registry, EPOCH_2024, SAMPLE_IDENTITIES, SAMPLE_REGISTRY};
use crate::refine::{gold_key, GoldArtifact};
use crate::store::{Store, StoreError};

const HOUR: i64 = 3_600_000;

fn art(platform: &str, hour: i64, value: f64, samples: u64) -> GoldArtifact {
    let bucket = Timestamp::from_millis(EPOCH_2024.as_millis() + hour * HOUR);
    GoldArtifact {
        gold_key: gold_key("crash_events", platform, bucket, 1),
        metric_name: "crash_events".into(),
        platform: platform.into(),
        bucket_start: bucket,
        value,
        sample_count: samples,
        transform_version: 1,
        computed_from: samples,
    }
}

fn store() -> Arc<Store> {
    let s = Store::in_memory();
    s.upsert_gold(&[art("ios", 0, 0.25, 4), art("ios", 1, 0.5, 2), art("ios", 2, 0.125, 2)])
        .unwrap();
    Arc::new(s)
}

fn clock() -> Arc<ManualClock> {
    Arc::new(ManualClock::new(EPOCH_2024))
}

fn server_with(clock: Arc<ManualClock>) -> Server {
    Server::new(sample_registry(), CachePolicy::default(), store()).with_clock(clock)
}

fn ids() -> IdentityMap {
    IdentityMap::parse(SAMPLE_IDENTITIES).unwrap()
}

fn window(h1: i64, h2: i64) -> Value {
    let t = |h: i64| Timestamp::from_millis(EPOCH_2024.as_millis() + h * HOUR).to_rfc3339();
    json!({"platform": "ios", "start_time": t(h1), "end_time": t(h2)})
}

#[test]
fn tools_list_hides_tools_outside_granted_categories() {
    let s = server_with(clock());
    let names = |p: &str| -> Vec<String> {
        s.tools_list(&ids().resolve(p))["tools"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["name"].as_str().unwrap().to_string())
            .collect()
    };
    assert_eq!(names("ops"), ["get_crash_rate", "get_deploy_count", "get_p1_open"]);
    assert_eq!(names("analyst"), ["get_crash_rate"]);
    assert!(names("guest").is_empty());
    assert!(names("nobody").is_empty());
    let ops = ids().resolve("ops");
    assert_eq!(s.tools_list_bytes(&ops), s.tools_list_bytes(&ops));
}

#[test]
fn result_rolls_up_buckets_with_the_registry_aggregation() {
    let s = server_with(clock());
    let r = s.tools_call(&ids().resolve("analyst"), "get_crash_rate", &window(0, 3)).unwrap();
    let p = r.parsed();
    assert_eq!(p.buckets.len(), 3);
    // Sample-weighted mean: (0.25*4 + 0.5*2 + 0.125*2) / 8
    assert_eq!(p.aggregate_value, Some(2.25 / 8.0));
    assert_eq!(p.unit, "ratio");
    assert_eq!(p.definition_version, 2);
    assert_eq!(p.registry_hash, sample_registry().content_hash());

    // Half-open: the bucket at hour 2 is excluded.
    let r = s.tools_call(&ids().resolve("analyst"), "get_crash_rate", &window(1, 2)).unwrap();
    assert_eq!(r.parsed().buckets.len(), 1);
}

#[test]
fn second_call_within_ttl_is_a_byte_identical_cache_hit() {
    let c = clock();
    let s = server_with(c.clone());
    let p = ids().resolve("ops");
    let a = s.tools_call(&p, "get_crash_rate", &window(0, 3)).unwrap();
    let b = s.tools_call(&p, "get_crash_rate", &window(0, 3)).unwrap();
    assert!(!a.cache_hit && b.cache_hit);
    assert_eq!(a.payload, b.payload);
    assert_eq!(s.store_reads(), 1);

    let ttl = CachePolicy::default().high;
    c.advance(ttl - Duration::from_secs(1));
    assert!(s.tools_call(&p, "get_crash_rate", &window(0, 3)).unwrap().cache_hit);
    c.advance(Duration::from_secs(1));
    assert!(!s.tools_call(&p, "get_crash_rate", &window(0, 3)).unwrap().cache_hit);
    assert_eq!(s.store_reads(), 2);
}

#[test]
fn equivalent_timestamp_spellings_share_a_cache_entry() {
    let s = server_with(clock());
    let p = ids().resolve("ops");
    s.tools_call(&p, "get_crash_rate", &window(0, 1)).unwrap();
    let alt = json!({"end_time": "2024-01-01T01:00:00+00:00", "platform": "ios", "start_time": "2024-01-01T00:00:00.000Z"});
    assert!(s.tools_call(&p, "get_crash_rate", &alt).unwrap().cache_hit);
}

#[test]
fn resolution_order_is_tool_then_acl_then_arguments() {
    let s = server_with(clock());
    let guest = ids().resolve("guest");
    let bad = json!({"platform": "web"});
    assert_eq!(
        s.tools_call(&guest, "get_nothing", &bad).unwrap_err().code(),
        "unknown_tool"
    );
    assert_eq!(
        s.tools_call(&guest, "get_crash_rate", &bad).unwrap_err().code(),
        "access_denied"
    );
    let ops = ids().resolve("ops");
    for args in [
        bad,
        json!([1, 2]),
        json!({"platform": "ios", "start_time": "2024-01-01T02:00:00Z", "end_time": "2024-01-01T01:00:00Z"}),
        json!({"platform": "ios", "start_time": "2024-01-01T01:00:00Z", "end_time": "2024-01-01T01:00:00Z"}),
        json!({"platform": "ios", "start_time": "noon", "end_time": "2024-01-01T01:00:00Z"}),
        json!({"platform": "ios", "start_time": "2024-01-01T00:00:00Z", "end_time": "2024-01-01T01:00:00Z", "limit": 5}),
        json!({"platform": 3, "start_time": "2024-01-01T00:00:00Z", "end_time": "2024-01-01T01:00:00Z"}),
    ] {
        assert_eq!(
            s.tools_call(&ops, "get_crash_rate", &args).unwrap_err().code(),
            "invalid_arguments",
            "{args}"
        );
    }
    assert_eq!(s.store_reads(), 0);
}

#[test]
fn every_attempt_is_audited_including_denials() {
    let s = server_with(clock());
    let analyst = ids().resolve("analyst");
    s.tools_call(&analyst, "get_crash_rate", &window(0, 1)).unwrap();
    s.tools_call(&analyst, "get_crash_rate", &window(0, 1)).unwrap();
    s.tools_call(&analyst, "get_deploy_count", &window(0, 1)).unwrap_err();
    s.tools_call(&analyst, "drop_tables", &json!({})).unwrap_err();
    let calls = s.audit().calls();
    let summary: Vec<(Outcome, bool, Option<&str>)> = calls
        .iter()
        .map(|e| (e.outcome, e.cache_hit, e.error_code.as_deref()))
        .collect();
    assert_eq!(
        summary,
        [
            (Outcome::Ok, false, None),
            (Outcome::Ok, true, None),
            (Outcome::Denied, false, Some("access_denied")),
            (Outcome::Error, false, Some("unknown_tool")),
        ]
    );
    assert!(calls.iter().all(|e| e.principal_id == "analyst"));
}

struct Broken;

impl GoldReader for Broken {
    fn query_gold(&self, _: &str, _: &str, _: Timestamp, _: Timestamp, _: u32) -> Result<Vec<GoldArtifact>, StoreError> {
        Err(StoreError::Poisoned)
    }

    fn current_version(&self, _: &str) -> u32 {
        1
    }
}

#[test]
fn store_failure_is_reported_not_an_empty_result() {
    let s = Server::new(sample_registry(), CachePolicy::default(), Arc::new(Broken));
    let err = s
        .tools_call(&ids().resolve("ops"), "get_crash_rate", &window(0, 1))
        .unwrap_err();
    assert_eq!(err.code(), "upstream_unavailable");
    assert!(s.cache_keys().is_empty());
}

#[test]
fn reload_with_identical_registry_is_a_noop() {
    let s = server_with(clock());
    let ops = ids().resolve("ops");
    s.tools_call(&ops, "get_crash_rate", &window(0, 1)).unwrap();
    let r = s.reload(sample_registry());
    assert!(r.noop);
    assert_eq!(r.invalidated, 0);
    assert!(s.tools_call(&ops, "get_crash_rate", &window(0, 1)).unwrap().cache_hit);
}

#[test]
fn reload_invalidates_only_changed_tools() {
    let s = server_with(clock());
    let ops = ids().resolve("ops");
    s.tools_call(&ops, "get_crash_rate", &window(0, 1)).unwrap();
    s.tools_call(&ops, "get_crash_rate", &window(0, 2)).unwrap();
    s.tools_call(&ops, "get_deploy_count", &window(0, 1)).unwrap();
    let before = s.cache_keys();

    let bumped = Registry::parse(&SAMPLE_REGISTRY.replace("version = 2", "version = 3")).unwrap();
    let r = s.reload(bumped);
    let after = s.cache_keys();
    let dropped: BTreeSet<_> = before.difference(&after).map(|(_, tool)| tool.as_str()).collect();
    assert_eq!(dropped, BTreeSet::from(["get_crash_rate"]));
    assert_eq!(r.invalidated, before.len() - after.len());
    assert_eq!(r.changed, BTreeSet::from(["get_crash_rate".to_string()]));
    assert!(!r.noop);

    let p = s.tools_call(&ops, "get_crash_rate", &window(0, 1)).unwrap();
    assert!(!p.cache_hit);
    assert_eq!(p.parsed().definition_version, 3);
    assert!(s.tools_call(&ops, "get_deploy_count", &window(0, 1)).unwrap().cache_hit);
    assert!(s.audit().records().iter().any(|r| matches!(r, AuditRecord::Reload { .. })));
}

#[test]
fn reload_removing_a_metric_removes_its_tool() {
    let s = server_with(clock());
    let start = SAMPLE_REGISTRY.find("[metric.p1_open]").unwrap();
    let r = s.reload(Registry::parse(&SAMPLE_REGISTRY[..start]).unwrap());
    assert_eq!(r.removed, BTreeSet::from(["get_p1_open".to_string()]));
    let err = s
        .tools_call(&ids().resolve("ops"), "get_p1_open", &json!({}))
        .unwrap_err();
    assert_eq!(err.code(), "unknown_tool");
}

#[test]
fn failed_reload_keeps_the_old_surface() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("registry.toml");
    std::fs::write(&path, "registry_version = \"x\"\n").unwrap();
    let s = server_with(clock());
    let before = s.registry_hash();
    assert!(s.reload_from(&path).is_err());
    assert_eq!(s.registry_hash(), before);
}

#[test]
fn json_rpc_distinguishes_protocol_and_tool_errors() {
    let s = server_with(clock());
    let ops = ids().resolve("ops");
    let call = |msg: Value| -> Value { serde_json::from_str(&handle_text(&s, &ops, &msg.to_string()).unwrap()).unwrap() };

    let init = call(json!({"jsonrpc": "2.0", "id": 1, "method": "initialize", "params": {}}));
    assert_eq!(init["result"]["serverInfo"]["name"], "regal");
    assert!(handle_text(&s, &ops, r#"{"jsonrpc":"2.0","method":"notifications/initialized"}"#).is_none());

    let list = call(json!({"jsonrpc": "2.0", "id": 2, "method": "tools/list"}));
    assert_eq!(list["result"]["tools"].as_array().unwrap().len(), 3);

    let ok = call(json!({"jsonrpc": "2.0", "id": 3, "method": "tools/call",
        "params": {"name": "get_crash_rate", "arguments": window(0, 2)}}));
    assert_eq!(ok["result"]["isError"], false);
    assert_eq!(ok["result"]["structuredContent"]["buckets"].as_array().unwrap().len(), 2);
    assert_eq!(ok["result"]["_meta"]["cache_hit"], false);

    let unknown = call(json!({"jsonrpc": "2.0", "id": 4, "method": "tools/call",
        "params": {"name": "get_secrets", "arguments": {}}}));
    assert_eq!(unknown["error"]["code"], -32601);
    assert_eq!(unknown["error"]["data"]["code"], "unknown_tool");

    let invalid = call(json!({"jsonrpc": "2.0", "id": 5, "method": "tools/call",
        "params": {"name": "get_crash_rate", "arguments": {"platform": "web"}}}));
    assert_eq!(invalid["result"]["isError"], true);
    assert_eq!(invalid["result"]["structuredContent"]["code"], "invalid_arguments");

    let garbage: Value = serde_json::from_str(&handle_text(&s, &ops, "{not json").unwrap()).unwrap();
    assert_eq!(garbage["error"]["code"], -32700);
    assert_eq!(s.audit().call_count(), 3);
}

#[test]
fn audit_file_receives_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit").join("audit.jsonl");
    let s = server_with(clock()).with_audit(AuditLog::with_file(&path).unwrap());
    let ops = ids().resolve("ops");
    s.tools_call(&ops, "get_crash_rate", &window(0, 1)).unwrap();
    s.tools_call(&ops, "get_unknown", &window(0, 1)).unwrap_err();
    s.reload(sample_registry());
    let text = std::fs::read_to_string(&path).unwrap();
    let records: Vec<AuditRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records, s.audit().records());
    assert_eq!(records.len(), 3);
}
