//! `regal serve`: the MCP surface and the alert consumer over one store.
//!
//! Everything that can fail at startup (config, store recovery, alert state)
//! happens before a transport is bound. SIGTERM or SIGINT stops both
//! transports and the consumer; alert state is persisted after every event,
//! so a stop at any point resumes where it left off. SIGHUP reloads the
//! registry file.

use std::io::BufReader;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::Args;
use parking_lot::Mutex;
use regal_core::faults::Faults;
use regal_core::pipeline::{self, PipelineInputs};
use regal_core::pushpath::{run_consumer, PushEngine, WebhookSink};
use regal_core::serve::rpc::{handle_text, serve_lines, PRINCIPAL_HEADER};
use regal_core::serve::{AuditLog, Server};
use regal_core::time::Timestamp;
use serde_json::json;

use crate::commands::{resolve, runtime};
use crate::{Cli, Failure, Output};

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Serve HTTP POST /mcp on this address instead of stdio.
    #[arg(long, value_name = "ADDR")]
    pub http: Option<String>,
    /// Principal for the stdio session. HTTP callers name theirs in the
    /// X-Regal-Principal header.
    #[arg(long, env = "REGAL_PRINCIPAL", default_value = "anonymous")]
    pub principal: String,
    /// Also run ingest and refine every this many seconds.
    #[arg(long, value_name = "SECS")]
    pub pipeline_every: Option<u64>,
    /// Serve tools only; do not evaluate alerts.
    #[arg(long)]
    pub no_alerts: bool,
}

const POLL: Duration = Duration::from_millis(100);

pub fn run(cli: &Cli, out: &Output, args: &ServeArgs) -> Result<(), Failure> {
    let r = resolve(cli, None)?;
    let store = Arc::new(pipeline::open_store(&r, Faults::new()).map_err(|e| runtime(e.to_string()))?);
    let audit_path = r.config.audit_path();
    let audit = AuditLog::with_file(&audit_path).map_err(|e| runtime(format!("{}: {e}", audit_path.display())))?;
    let server = Arc::new(Server::new(r.registry.clone(), r.policy, store.clone()).with_audit(audit));
    let engine = if args.no_alerts {
        None
    } else {
        let mut e = PushEngine::open(
            &r.config.push_dir(),
            Arc::new(r.registry.clone()),
            r.config.stability.clone(),
            Faults::new(),
        )
        .map_err(|e| runtime(e.to_string()))?;
        if let Some(url) = &r.config.webhook_url {
            e = e.with_webhook(WebhookSink::new(url));
        }
        Some(Arc::new(Mutex::new(e)))
    };

    let stop = Arc::new(AtomicBool::new(false));
    let reload = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, stop.clone()).map_err(|e| runtime(e.to_string()))?;
    }
    signal_hook::flag::register(signal_hook::consts::SIGHUP, reload.clone()).map_err(|e| runtime(e.to_string()))?;

    let mut workers = Vec::new();
    if let Some(engine) = &engine {
        let (store, engine, stop) = (store.clone(), engine.clone(), stop.clone());
        workers.push(thread::spawn(move || {
            if let Err(e) = run_consumer(store, engine, stop.clone()) {
                log::error!("alert consumer stopped: {e}");
                stop.store(true, Ordering::SeqCst);
            }
        }));
    }
    if let Some(secs) = args.pipeline_every {
        let (store, stop) = (store.clone(), stop.clone());
        let inputs = PipelineInputs::from_resolved(&r);
        let every = Duration::from_secs(secs.max(1));
        workers.push(thread::spawn(move || {
            let mut next = Instant::now();
            while !stop.load(Ordering::SeqCst) {
                if Instant::now() >= next {
                    match pipeline::run(&inputs, &store, Timestamp::now()) {
                        Ok(rep) => log::info!(
                            "pipeline: {} new bronze, {} series refreshed",
                            rep.ingest.newly_archived,
                            rep.refine.series.len()
                        ),
                        Err(e) => log::error!("pipeline run failed: {e}"),
                    }
                    next = Instant::now() + every;
                }
                thread::sleep(POLL);
            }
        }));
    }

    let on_reload = || {
        match server.reload_from(&r.config.registry) {
            Ok(rep) => {
                if let Some(engine) = &engine {
                    engine.lock().set_registry(Arc::new(server.surface().registry.clone()));
                }
                log::warn!(
                    "registry reloaded: {} added, {} removed, {} changed, {} cache entries dropped",
                    rep.added.len(),
                    rep.removed.len(),
                    rep.changed.len(),
                    rep.invalidated
                );
            }
            Err(e) => log::error!("registry reload rejected, keeping the current one: {e}"),
        }
    };

    let transport = match &args.http {
        Some(addr) => serve_http(addr, &server, &r.identities, &stop, &reload, &on_reload, out),
        None => serve_stdio(&server, r.identities.resolve(&args.principal), &stop, &reload, &on_reload),
    };

    stop.store(true, Ordering::SeqCst);
    for w in workers {
        let _ = w.join();
    }
    server.audit().flush();
    transport
}

fn take(flag: &AtomicBool) -> bool {
    flag.swap(false, Ordering::SeqCst)
}

fn serve_stdio(
    server: &Arc<Server>,
    principal: regal_core::serve::Principal,
    stop: &AtomicBool,
    reload: &AtomicBool,
    on_reload: &dyn Fn(),
) -> Result<(), Failure> {
    let done = Arc::new(AtomicBool::new(false));
    {
        let (server, done) = (server.clone(), done.clone());
        // Not joined: on a signal the process exits while this is blocked on stdin.
        thread::spawn(move || {
            let stdin = std::io::stdin();
            if let Err(e) = serve_lines(&server, &principal, BufReader::new(stdin.lock()), std::io::stdout()) {
                log::error!("stdio transport: {e}");
            }
            done.store(true, Ordering::SeqCst);
        });
    }
    while !stop.load(Ordering::SeqCst) && !done.load(Ordering::SeqCst) {
        if take(reload) {
            on_reload();
        }
        thread::sleep(POLL);
    }
    Ok(())
}

fn serve_http(
    addr: &str,
    server: &Arc<Server>,
    identities: &regal_core::serve::IdentityMap,
    stop: &AtomicBool,
    reload: &AtomicBool,
    on_reload: &dyn Fn(),
    out: &Output,
) -> Result<(), Failure> {
    let http = tiny_http::Server::http(addr).map_err(|e| runtime(format!("cannot listen on {addr}: {e}")))?;
    let bound = http.server_addr().to_ip().map(|a| a.to_string()).unwrap_or_else(|| addr.to_string());
    out.record("listening", json!({"url": format!("http://{bound}/mcp")}), |v| {
        format!("listening on {}", v["url"].as_str().unwrap_or_default())
    });
    let json_header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    while !stop.load(Ordering::SeqCst) {
        if take(reload) {
            on_reload();
        }
        let mut req = match http.recv_timeout(POLL) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(e) => return Err(runtime(format!("http transport: {e}"))),
        };
        if req.url() != "/mcp" {
            let _ = req.respond(tiny_http::Response::empty(404));
            continue;
        }
        if *req.method() != tiny_http::Method::Post {
            let _ = req.respond(tiny_http::Response::empty(405));
            continue;
        }
        let principal_id = req
            .headers()
            .iter()
            .find(|h| h.field.equiv(PRINCIPAL_HEADER))
            .map(|h| h.value.as_str().to_string())
            .unwrap_or_else(|| "anonymous".to_string());
        let principal = identities.resolve(&principal_id);
        let (server, header) = (server.clone(), json_header.clone());
        thread::spawn(move || {
            let mut body = String::new();
            if let Err(e) = req.as_reader().read_to_string(&mut body) {
                let _ = req.respond(tiny_http::Response::from_string(e.to_string()).with_status_code(400));
                return;
            }
            let _ = match handle_text(&server, &principal, &body) {
                Some(reply) => req.respond(tiny_http::Response::from_string(reply).with_header(header)),
                None => req.respond(tiny_http::Response::empty(202)),
            };
        });
    }
    Ok(())
}
