use std::collections::BTreeSet;
use std::sync::Arc;

use regal_core::compiler::{compile_with_policy, verify_alignment_with_policy, CachePolicy, CompiledToolSet};
use regal_core::config::{ConfigError, Resolved, RunConfig};
use regal_core::faults::Faults;
use regal_core::harness::{self, Http, InProcess, MeasureRequest, Script, Transport};
use regal_core::ingest::IngestError;
use regal_core::pipeline::{self, PipelineInputs};
use regal_core::refine::RefineError;
use regal_core::registry::Registry;
use regal_core::serve::{Principal, Server};
use regal_core::store::{Store, StoreConfig, StoreError};
use regal_core::time::{TimeRange, Timestamp};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{emit, Cli, Command, Failure, MeasureArgs, Output, SimulateArgs};

pub fn dispatch(cli: &Cli, out: &Output) -> Result<(), Failure> {
    match &cli.command {
        Command::Ingest { until, sources } => ingest(cli, out, *until, sources.as_deref()),
        Command::Refine => refine(cli, out),
        Command::Backfill {
            series,
            version,
            start,
            end,
        } => {
            let range = start.zip(*end).map(|(s, e)| TimeRange::new(s, e));
            backfill(cli, out, series, *version, range)
        }
        Command::DumpGold { version, out: path } => dump_gold(cli, out, *version, path.as_deref()),
        Command::Compile {
            registry,
            policy,
            out: path,
        } => {
            let (registry, policy) = registry_and_policy(cli, registry.as_deref(), policy.as_deref())?;
            let tools = compile_with_policy(&registry, &policy);
            let doc = tools.to_document();
            let text = match out.format {
                crate::Format::Human => serde_json::to_string_pretty(&doc).expect("JSON"),
                crate::Format::Machine => String::from_utf8(tools.canonical_bytes()).expect("UTF-8"),
            };
            match path {
                Some(p) => {
                    std::fs::write(p, text + "\n").map_err(|e| runtime(format!("{}: {e}", p.display())))?;
                    out.record(
                        "compile",
                        json!({"path": p, "tools": tools.tools.len(), "registry_hash": tools.source_registry_hash}),
                        |_| format!("wrote {} tools to {}", tools.tools.len(), p.display()),
                    );
                }
                None => emit(&(text + "\n")),
            }
            Ok(())
        }
        Command::Diff {
            tools,
            registry,
            policy,
        } => diff(cli, out, tools, registry.as_deref(), policy.as_deref()),
        Command::Serve(args) => crate::serve::run(cli, out, args),
        Command::Measure(args) => measure(cli, out, args),
        Command::SimulateAgent(args) => simulate(cli, out, args),
    }
}

pub fn runtime(msg: impl Into<String>) -> Failure {
    Failure::Runtime(msg.into())
}

/// Every configuration problem is a validation failure, reported before any
/// side effect.
pub fn config_failure(e: ConfigError) -> Failure {
    Failure::Validation(e.to_string())
}

fn ingest_failure(e: IngestError) -> Failure {
    match e {
        IngestError::ClockSkew { .. } | IngestError::Config(_) | IngestError::CursorState(_) => {
            Failure::Validation(e.to_string())
        }
        e => runtime(e.to_string()),
    }
}

fn refine_failure(e: RefineError) -> Failure {
    match e {
        RefineError::Store(_) | RefineError::Crash(_) => runtime(e.to_string()),
        RefineError::Ingest(e) => ingest_failure(e),
        e => Failure::Validation(e.to_string()),
    }
}

fn store_failure(e: StoreError) -> Failure {
    runtime(e.to_string())
}

/// Loads and validates the whole configuration, applying CLI overrides.
pub fn resolve(cli: &Cli, sources: Option<&std::path::Path>) -> Result<Resolved, Failure> {
    let mut cfg = RunConfig::load(&cli.config).map_err(config_failure)?;
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(s) = sources {
        cfg.sources = s.to_path_buf();
    }
    cfg.resolve().map_err(config_failure)
}

fn open_store(r: &Resolved) -> Result<Store, Failure> {
    pipeline::open_store(r, Faults::new()).map_err(store_failure)
}

/// For commands that only read: never repairs or creates anything on disk.
pub fn open_store_read_only(r: &Resolved) -> Result<Store, Failure> {
    Store::open_read_only(r.config.store_dir(), StoreConfig::default()).map_err(store_failure)
}

fn as_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn ingest(cli: &Cli, out: &Output, until: Option<Timestamp>, sources: Option<&std::path::Path>) -> Result<(), Failure> {
    let r = resolve(cli, sources)?;
    let store = open_store(&r)?;
    let now = until.unwrap_or_else(Timestamp::now);
    let report = pipeline::ingest(&PipelineInputs::from_resolved(&r), &store, now).map_err(ingest_failure)?;
    out.record("ingest", as_value(&report), |_| {
        format!(
            "run {}: {} fetch tasks up to {}, {} new bronze records ({} total)",
            report.run_id,
            report.tasks,
            report.now,
            report.newly_archived,
            report.bronze_total
        )
    });
    Ok(())
}

fn refine(cli: &Cli, out: &Output) -> Result<(), Failure> {
    let r = resolve(cli, None)?;
    let store = open_store(&r)?;
    let report = pipeline::refine(&PipelineInputs::from_resolved(&r), &store).map_err(refine_failure)?;
    out.record("refine", as_value(&report), |_| {
        let mut lines = vec![format!(
            "silver: {} inserted, {} replaced, {} unchanged, {} quarantined; {} rows for unregistered metrics",
            report.silver.inserted,
            report.silver.replaced,
            report.silver.unchanged,
            report.silver.quarantined,
            report.unmapped_rows
        )];
        for s in &report.series {
            lines.push(format!(
                "gold {} v{}: {} artifacts ({} inserted, {} replaced)",
                s.series, s.transform_version, s.artifacts, s.upsert.inserted, s.upsert.replaced
            ));
        }
        lines.join("\n")
    });
    Ok(())
}

fn backfill(cli: &Cli, out: &Output, series: &str, version: u32, range: Option<TimeRange>) -> Result<(), Failure> {
    let r = resolve(cli, None)?;
    let store = open_store(&r)?;
    let inputs = PipelineInputs::from_resolved(&r);
    let report = pipeline::backfill(&inputs, &store, series, version, range).map_err(refine_failure)?;
    out.record("backfill", as_value(&report), |_| {
        format!(
            "{} v{} -> v{} over [{}, {}): {} artifacts in {} chunks",
            report.metric_name,
            report.previous_version,
            report.new_version,
            report.range.start,
            report.range.end,
            report.artifacts,
            report.chunks
        )
    });
    Ok(())
}

fn dump_gold(cli: &Cli, out: &Output, version: Option<u32>, path: Option<&std::path::Path>) -> Result<(), Failure> {
    let r = resolve(cli, None)?;
    let store = open_store_read_only(&r)?;
    let dump = pipeline::dump_gold(&store, version, path).map_err(|e| runtime(e.to_string()))?;
    match path {
        Some(p) => out.record(
            "dump_gold",
            json!({"path": p, "artifacts": dump.lines().count(), "bytes": dump.len()}),
            |_| format!("wrote {} artifacts to {}", dump.lines().count(), p.display()),
        ),
        None => emit(&dump),
    }
    Ok(())
}

fn registry_and_policy(
    cli: &Cli,
    registry: Option<&std::path::Path>,
    policy: Option<&std::path::Path>,
) -> Result<(Registry, CachePolicy), Failure> {
    match registry {
        Some(path) => {
            let reg = Registry::load(path).map_err(|e| Failure::Validation(e.to_string()))?;
            let pol = match policy {
                Some(p) => CachePolicy::load(p).map_err(|e| Failure::Validation(e.to_string()))?,
                None => CachePolicy::default(),
            };
            Ok((reg, pol))
        }
        None => {
            let r = resolve(cli, None)?;
            Ok((r.registry, r.policy))
        }
    }
}

fn diff(
    cli: &Cli,
    out: &Output,
    tools: &std::path::Path,
    registry: Option<&std::path::Path>,
    policy: Option<&std::path::Path>,
) -> Result<(), Failure> {
    let (registry, policy) = registry_and_policy(cli, registry, policy)?;
    let text = std::fs::read_to_string(tools).map_err(|e| Failure::Usage(format!("{}: {e}", tools.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", tools.display())))?;
    let set = CompiledToolSet::from_document(&doc).map_err(|e| Failure::Validation(e.to_string()))?;
    let report = verify_alignment_with_policy(&set, &registry, &policy);
    out.record("alignment", as_value(&report), |v| {
        if report.is_empty() {
            "tool document matches the registry".to_string()
        } else {
            serde_json::to_string_pretty(&v["discrepancies"]).expect("JSON")
        }
    });
    if report.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "{} discrepancies between {} and the registry",
            report.discrepancies.len(),
            tools.display()
        )))
    }
}

/// A principal holding every category the registry uses.
fn operator(registry: &Registry) -> Principal {
    let cats: BTreeSet<String> = registry.entries().iter().map(|d| d.access_category.clone()).collect();
    Principal::new("operator", cats)
}

fn measure(cli: &Cli, out: &Output, args: &MeasureArgs) -> Result<(), Failure> {
    if args.start >= args.end {
        return Err(Failure::Usage("--start must be before --end".into()));
    }
    let r = resolve(cli, None)?;
    if r.registry.get(&args.metric).is_none() {
        return Err(Failure::Validation(format!("unknown metric {}", args.metric)));
    }
    let store = Arc::new(open_store_read_only(&r)?);
    let server = Server::new(r.registry.clone(), r.policy, store.clone());
    let req = MeasureRequest {
        label: args.label.clone(),
        metric_id: args.metric.clone(),
        platform: args.platform.clone(),
        window: TimeRange::new(args.start, args.end),
        concurrency: args.concurrency.max(1),
        calls_per_loop: args.calls,
    };
    let report =
        harness::measure(&store, &server, &operator(&r.registry), &req).map_err(|e| Failure::Validation(e.to_string()))?;
    out.record("measurement", as_value(&report), |v| serde_json::to_string_pretty(v).expect("JSON"));
    Ok(())
}

fn simulate(cli: &Cli, out: &Output, args: &SimulateArgs) -> Result<(), Failure> {
    let script = match (&args.script, args.seed) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<Script>(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?
        }
        (None, Some(seed)) => {
            let r = resolve(cli, None)?;
            let tools: Vec<(String, Vec<String>)> = compile_with_policy(&r.registry, &r.policy)
                .tools
                .iter()
                .map(|t| (t.tool_name.clone(), t.param_schema.platform.iter().cloned().collect()))
                .collect();
            let store = open_store_read_only(&r)?;
            let (start, end) = gold_extent(&store);
            harness::random_script(seed, args.steps, &tools, start, end)
        }
        (None, None) => return Err(Failure::Usage("give --script or --seed".into())),
    };
    let transport: Box<dyn Transport> = match &args.url {
        Some(url) => Box::new(Http::new(url, &args.principal)),
        None => {
            let r = resolve(cli, None)?;
            let store = Arc::new(open_store_read_only(&r)?);
            let principal = r.identities.resolve(&args.principal);
            Box::new(InProcess {
                server: Arc::new(Server::new(r.registry, r.policy, store)),
                principal,
            })
        }
    };
    let transcript = harness::simulate(transport.as_ref(), &script);
    match out.format {
        crate::Format::Machine => {
            for e in &transcript.entries {
                out.record("transcript_entry", as_value(e), |_| String::new());
            }
        }
        crate::Format::Human => emit(&(serde_json::to_string_pretty(&transcript).expect("JSON") + "\n")),
    }
    Ok(())
}

/// The span of stored Gold, or one day from the epoch when there is none.
fn gold_extent(store: &Store) -> (Timestamp, Timestamp) {
    let arts = store.gold_artifacts(None);
    let start = arts.iter().map(|a| a.bucket_start).min();
    let end = arts.iter().map(|a| a.bucket_start).max();
    match start.zip(end) {
        Some((s, e)) => (s, Timestamp::from_millis(e.as_millis() + 3_600_000)),
        None => (Timestamp::from_millis(0), Timestamp::from_millis(86_400_000)),
    }
}
