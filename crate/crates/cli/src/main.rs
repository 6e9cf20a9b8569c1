//! `regal`: run the pipeline, compile and serve the tool surface, backfill,
//! and measure. Every command is a thin wrapper over `regal_core`.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.

mod commands;
mod serve;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use regal_core::time::Timestamp;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "regal", version, about = "Registry-compiled metric tools over a Bronze/Silver/Gold store")]
pub struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "regal.toml")]
    pub config: PathBuf,
    /// Overrides `data_dir` from the configuration.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// `machine` prints one JSON record per line on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Human,
    Machine,
}

fn timestamp(s: &str) -> Result<Timestamp, String> {
    Timestamp::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fetch everything pending from the sources into Bronze.
    Ingest {
        /// Fetch up to this instant (default: the current time).
        #[arg(long, alias = "now", value_parser = timestamp)]
        until: Option<Timestamp>,
        /// Overrides the sources file from the configuration.
        #[arg(long)]
        sources: Option<PathBuf>,
    },
    /// Recompute Silver and current-version Gold from Bronze.
    Refine,
    /// Recompute one series under a new transform version, then make it current.
    Backfill {
        #[arg(long)]
        series: String,
        #[arg(long)]
        version: u32,
        /// Start of the range (default: the first bucket with data).
        #[arg(long, value_parser = timestamp, requires = "end")]
        start: Option<Timestamp>,
        #[arg(long, value_parser = timestamp, requires = "start")]
        end: Option<Timestamp>,
    },
    /// Write the canonical Gold dump.
    DumpGold {
        /// Only artifacts of this transform version.
        #[arg(long)]
        version: Option<u32>,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compile the registry into the tool document.
    Compile {
        /// Registry to compile instead of the configured one; no config needed.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Cache policy used with `--registry`.
        #[arg(long, requires = "registry")]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a previously compiled tool document with the registry.
    /// Exits 2 when they have drifted apart.
    Diff {
        /// Tool document produced by `compile`.
        tools: PathBuf,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, requires = "registry")]
        policy: Option<PathBuf>,
    },
    /// Serve MCP over stdio (default) or HTTP and evaluate alerts until SIGTERM.
    Serve(serve::ServeArgs),
    /// Raw-versus-Gold sizes and retrieval latency for one metric window.
    Measure(MeasureArgs),
    /// Run a scripted tool caller and print its transcript.
    SimulateAgent(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct MeasureArgs {
    #[arg(long)]
    pub metric: String,
    #[arg(long)]
    pub platform: String,
    #[arg(long, value_parser = timestamp)]
    pub start: Timestamp,
    #[arg(long, value_parser = timestamp)]
    pub end: Timestamp,
    #[arg(long, default_value = "measurement")]
    pub label: String,
    /// Concurrent call loops.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Calls per loop.
    #[arg(long, default_value_t = 100)]
    pub calls: usize,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// JSON script: {"steps": [{"op": "list"}, {"op": "call", "tool": ..., "arguments": {...}}]}
    #[arg(long, conflicts_with = "seed")]
    pub script: Option<PathBuf>,
    /// Generate a random script from this seed instead.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value = "anonymous")]
    pub principal: String,
    /// POST to a running server's /mcp endpoint instead of serving in-process.
    #[arg(long)]
    pub url: Option<String>,
}

/// A command failure, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Validation(_) => "validation",
            Failure::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

/// Writes `text` to stdout. A closed pipe (`regal dump-gold | head`) ends
/// the process quietly instead of panicking.
pub fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("regal: cannot write output: {e}");
        std::process::exit(3);
    }
}

/// Prints reports as pretty text or as JSON lines.
pub struct Output {
    pub format: Format,
}

impl Output {
    /// `kind` tags the machine record; `human` is the text form.
    pub fn record(&self, kind: &str, body: Value, human: impl FnOnce(&Value) -> String) {
        match self.format {
            Format::Machine => {
                let mut rec = json!({ "type": kind });
                if let (Value::Object(r), Value::Object(b)) = (&mut rec, &body) {
                    r.extend(b.clone());
                } else {
                    rec["value"] = body.clone();
                }
                emit(&format!("{rec}\n"));
            }
            Format::Human => emit(&(human(&body) + "\n")),
        }
    }

    fn failure(&self, f: &Failure) {
        match self.format {
            Format::Machine => emit(&format!(
                "{}\n",
                json!({"type": "error", "kind": f.kind(), "message": f.message()})
            )),
            Format::Human => eprintln!("regal: {} error: {}", f.kind(), f.message()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let out = Output { format: cli.format };
    match commands::dispatch(&cli, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            out.failure(&f);
            ExitCode::from(f.code())
        }
    }
}
