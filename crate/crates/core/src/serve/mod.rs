//! The read path: compiled tools behind ACL, argument validation and a TTL
//! cache, with every invocation attempt audited.
//!
//! The server only ever sees the store through [`GoldReader`], so it has no
//! way to write Bronze, Silver or Gold.

mod audit;
pub mod rpc;

use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use lru::LruCache;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::compiler::{compile_with_policy, CachePolicy, CompiledTool, CompiledToolSet};
use crate::digest::KeyHasher;
use crate::refine::rollup;
use crate::registry::{canonical_json, Registry, RegistryError};
use crate::store::GoldReader;
use crate::time::Timestamp;

pub use audit::{AuditEntry, AuditLog, AuditRecord, Outcome};

pub const DEFAULT_CACHE_CAPACITY: usize = 10_000;

/// A caller and the access categories granted to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub principal_id: String,
    pub granted_categories: BTreeSet<String>,
}

impl Principal {
    pub fn new<I, S>(principal_id: &str, categories: I) -> Principal
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Principal {
            principal_id: principal_id.to_string(),
            granted_categories: categories.into_iter().map(Into::into).collect(),
        }
    }

    pub fn may_use(&self, tool: &CompiledTool) -> bool {
        self.granted_categories.contains(&tool.acl_binding)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IdentityError {
    #[error("cannot read identity map {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed identity map: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIdentity {
    categories: BTreeSet<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIdentityMap {
    #[serde(default)]
    principal: BTreeMap<String, RawIdentity>,
}

/// Server-side mapping from principal id to granted categories.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdentityMap {
    principals: BTreeMap<String, BTreeSet<String>>,
}

impl IdentityMap {
    pub fn parse(text: &str) -> Result<IdentityMap, IdentityError> {
        let raw: RawIdentityMap = toml::from_str(text)?;
        Ok(IdentityMap {
            principals: raw.principal.into_iter().map(|(k, v)| (k, v.categories)).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<IdentityMap, IdentityError> {
        let text = std::fs::read_to_string(path).map_err(|source| IdentityError::Io {
            path: path.display().to_string(),
            source,
        })?;
        IdentityMap::parse(&text)
    }

    /// Unknown principals resolve to an identity with no categories.
    pub fn resolve(&self, principal_id: &str) -> Principal {
        Principal {
            principal_id: principal_id.to_string(),
            granted_categories: self.principals.get(principal_id).cloned().unwrap_or_default(),
        }
    }

    pub fn principal_ids(&self) -> impl Iterator<Item = &str> {
        self.principals.keys().map(String::as_str)
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(at: Timestamp) -> ManualClock {
        ManualClock(AtomicI64::new(at.as_millis()))
    }

    pub fn set(&self, at: Timestamp) {
        self.0.store(at.as_millis(), Ordering::SeqCst);
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(crate::time::duration_millis(by), Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_millis(self.0.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CallError {
    #[error("unknown tool {0}")]
    UnknownTool(String),
    #[error("principal {principal} may not call {tool}")]
    AccessDenied { principal: String, tool: String },
    #[error("invalid arguments: {0}")]
    InvalidArguments(String),
    #[error("upstream unavailable: {0}")]
    UpstreamUnavailable(String),
}

impl CallError {
    pub fn code(&self) -> &'static str {
        match self {
            CallError::UnknownTool(_) => "unknown_tool",
            CallError::AccessDenied { .. } => "access_denied",
            CallError::InvalidArguments(_) => "invalid_arguments",
            CallError::UpstreamUnavailable(_) => "upstream_unavailable",
        }
    }

    fn outcome(&self) -> Outcome {
        match self {
            CallError::AccessDenied { .. } => Outcome::Denied,
            _ => Outcome::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketValue {
    pub bucket_start: Timestamp,
    pub value: f64,
    pub sample_count: u64,
}

/// Body of a successful tool result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolPayload {
    pub metric: String,
    pub platform: String,
    pub window: Window,
    pub buckets: Vec<BucketValue>,
    pub aggregate_value: Option<f64>,
    pub unit: String,
    pub definition_version: u32,
    pub registry_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolResult {
    /// Serialized [`ToolPayload`]; identical bytes on a cache hit.
    pub payload: Arc<str>,
    pub cache_hit: bool,
}

impl ToolResult {
    pub fn parsed(&self) -> ToolPayload {
        serde_json::from_str(&self.payload).expect("payload was produced by the server")
    }
}

/// Validated `{platform, start_time, end_time}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolArgs {
    pub platform: String,
    pub start: Timestamp,
    pub end: Timestamp,
}

impl ToolArgs {
    /// Normalized form used for cache keys, so equivalent spellings of a
    /// timestamp share an entry.
    fn canonical(&self) -> String {
        let v = serde_json::json!({
            "platform": self.platform,
            "start_time": self.start.to_rfc3339(),
            "end_time": self.end.to_rfc3339(),
        });
        String::from_utf8(canonical_json(&v)).expect("canonical json is utf-8")
    }
}

pub fn validate_args(tool: &CompiledTool, args: &Value) -> Result<ToolArgs, CallError> {
    let invalid = |m: String| CallError::InvalidArguments(m);
    let obj = args
        .as_object()
        .ok_or_else(|| invalid("arguments must be an object".into()))?;
    if let Some(extra) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "platform" | "start_time" | "end_time"))
    {
        return Err(invalid(format!("unexpected argument {extra}")));
    }
    let text = |k: &str| {
        obj.get(k)
            .ok_or_else(|| invalid(format!("missing argument {k}")))?
            .as_str()
            .ok_or_else(|| invalid(format!("argument {k} must be a string")))
    };
    let platform = text("platform")?;
    if !tool.param_schema.platform.contains(platform) {
        return Err(invalid(format!("platform {platform} is not in scope for {}", tool.tool_name)));
    }
    let time = |k: &str| {
        let s = text(k)?;
        Timestamp::parse(s).map_err(|e| invalid(format!("{k}: {e}")))
    };
    let (start, end) = (time("start_time")?, time("end_time")?);
    if start >= end {
        return Err(invalid("start_time must precede end_time".into()));
    }
    Ok(ToolArgs {
        platform: platform.to_string(),
        start,
        end,
    })
}

pub fn cache_key(tool_name: &str, canonical_args: &str) -> String {
    KeyHasher::new("tool-call").str(tool_name).str(canonical_args).finish()
}

fn canonical_text(v: &Value) -> String {
    String::from_utf8(canonical_json(v)).expect("canonical json is utf-8")
}

struct CacheEntry {
    tool: CompiledTool,
    payload: Arc<str>,
    stored_at: Timestamp,
    ttl: Duration,
}

impl CacheEntry {
    fn fresh(&self, now: Timestamp) -> bool {
        now.millis_since(self.stored_at) < crate::time::duration_millis(self.ttl)
    }
}

/// The registry and the tools compiled from it; swapped as one unit.
pub struct Surface {
    pub registry: Registry,
    pub tools: CompiledToolSet,
}

#[derive(Debug, thiserror::Error)]
pub enum ReloadError {
    #[error("registry failed to compile: {0}")]
    CompileFailure(#[from] RegistryError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReloadReport {
    pub old_registry_hash: String,
    pub new_registry_hash: String,
    pub noop: bool,
    pub added: BTreeSet<String>,
    pub removed: BTreeSet<String>,
    pub changed: BTreeSet<String>,
    pub invalidated: usize,
}

pub struct Server {
    surface: RwLock<Arc<Surface>>,
    reader: Arc<dyn GoldReader>,
    policy: CachePolicy,
    cache: Mutex<LruCache<String, CacheEntry>>,
    audit: AuditLog,
    clock: Arc<dyn Clock>,
    store_reads: AtomicU64,
}

impl Server {
    pub fn new(registry: Registry, policy: CachePolicy, reader: Arc<dyn GoldReader>) -> Server {
        let tools = compile_with_policy(&registry, &policy);
        Server {
            surface: RwLock::new(Arc::new(Surface { registry, tools })),
            reader,
            policy,
            cache: Mutex::new(LruCache::new(
                NonZeroUsize::new(DEFAULT_CACHE_CAPACITY).expect("non-zero"),
            )),
            audit: AuditLog::new(),
            clock: Arc::new(SystemClock),
            store_reads: AtomicU64::new(0),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Server {
        self.clock = clock;
        self
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Server {
        self.audit = audit;
        self
    }

    pub fn with_cache_capacity(self, capacity: usize) -> Server {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("non-zero");
        self.cache.lock().resize(cap);
        self
    }

    pub fn surface(&self) -> Arc<Surface> {
        self.surface.read().clone()
    }

    pub fn registry_hash(&self) -> String {
        self.surface().tools.source_registry_hash.clone()
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    /// Number of calls that reached the store.
    pub fn store_reads(&self) -> u64 {
        self.store_reads.load(Ordering::Relaxed)
    }

    /// `(cache_key, tool_name)` for every live cache entry.
    pub fn cache_keys(&self) -> BTreeSet<(String, String)> {
        self.cache
            .lock()
            .iter()
            .map(|(k, e)| (k.clone(), e.tool.tool_name.clone()))
            .collect()
    }

    /// Tool document restricted to what `principal` may call.
    pub fn tools_list(&self, principal: &Principal) -> Value {
        self.surface().tools.document_filtered(|t| principal.may_use(t))
    }

    pub fn tools_list_bytes(&self, principal: &Principal) -> Vec<u8> {
        canonical_json(&self.tools_list(principal))
    }

    pub fn tools_call(&self, principal: &Principal, tool_name: &str, args: &Value) -> Result<ToolResult, CallError> {
        let surface = self.surface();
        let result = self.resolve(&surface, principal, tool_name, args);
        let (outcome, cache_hit, error_code) = match &result {
            Ok(r) => (Outcome::Ok, r.cache_hit, None),
            Err(e) => (e.outcome(), false, Some(e.code().to_string())),
        };
        self.audit.append(AuditRecord::Call(AuditEntry {
            timestamp: self.clock.now(),
            principal_id: principal.principal_id.clone(),
            tool_name: tool_name.to_string(),
            arguments: canonical_text(args),
            outcome,
            cache_hit,
            registry_hash: surface.tools.source_registry_hash.clone(),
            error_code,
        }));
        result
    }

    fn resolve(
        &self,
        surface: &Surface,
        principal: &Principal,
        tool_name: &str,
        args: &Value,
    ) -> Result<ToolResult, CallError> {
        let tool = surface
            .tools
            .get(tool_name)
            .ok_or_else(|| CallError::UnknownTool(tool_name.to_string()))?;
        if !principal.may_use(tool) {
            return Err(CallError::AccessDenied {
                principal: principal.principal_id.clone(),
                tool: tool_name.to_string(),
            });
        }
        let args = validate_args(tool, args)?;
        let key = cache_key(tool_name, &args.canonical());
        let now = self.clock.now();
        {
            let mut cache = self.cache.lock();
            match cache.get(&key) {
                Some(e) if e.fresh(now) && e.tool == *tool => {
                    return Ok(ToolResult {
                        payload: e.payload.clone(),
                        cache_hit: true,
                    })
                }
                Some(_) => {
                    cache.pop(&key);
                }
                None => {}
            }
        }
        let payload: Arc<str> = self.execute(surface, tool, &args)?.into();
        self.cache.lock().put(
            key,
            CacheEntry {
                tool: tool.clone(),
                payload: payload.clone(),
                stored_at: now,
                ttl: tool.cache_ttl,
            },
        );
        Ok(ToolResult {
            payload,
            cache_hit: false,
        })
    }

    fn execute(&self, surface: &Surface, tool: &CompiledTool, args: &ToolArgs) -> Result<String, CallError> {
        let def = surface
            .registry
            .get(&tool.metric_id)
            .expect("compiled tools come from this registry");
        let series = &def.retrieval.source_metric;
        self.store_reads.fetch_add(1, Ordering::Relaxed);
        let version = self.reader.current_version(series);
        let buckets = self
            .reader
            .query_gold(series, &args.platform, args.start, args.end, version)
            .map_err(|e| CallError::UpstreamUnavailable(e.to_string()))?;
        let payload = ToolPayload {
            metric: def.metric_id.clone(),
            platform: args.platform.clone(),
            window: Window {
                start: args.start,
                end: args.end,
            },
            aggregate_value: rollup(def.retrieval.aggregation, &buckets),
            buckets: buckets
                .iter()
                .map(|b| BucketValue {
                    bucket_start: b.bucket_start,
                    value: b.value,
                    sample_count: b.sample_count,
                })
                .collect(),
            unit: def.unit.clone(),
            definition_version: def.definition_version,
            registry_hash: surface.tools.source_registry_hash.clone(),
        };
        Ok(serde_json::to_string(&payload).expect("payload serializes"))
    }

    /// Swaps in a new registry. Calls already holding the old surface finish
    /// against it; cache entries of removed or changed tools are dropped.
    pub fn reload(&self, registry: Registry) -> ReloadReport {
        let tools = compile_with_policy(&registry, &self.policy);
        let next = Arc::new(Surface { registry, tools });
        let mut guard = self.surface.write();
        let old = guard.clone();
        let by_name = |set: &CompiledToolSet| -> BTreeMap<String, CompiledTool> {
            set.tools.iter().map(|t| (t.tool_name.clone(), t.clone())).collect()
        };
        let (before, after) = (by_name(&old.tools), by_name(&next.tools));
        let added: BTreeSet<String> = after.keys().filter(|k| !before.contains_key(*k)).cloned().collect();
        let removed: BTreeSet<String> = before.keys().filter(|k| !after.contains_key(*k)).cloned().collect();
        let changed: BTreeSet<String> = before
            .iter()
            .filter(|(k, t)| after.get(*k).is_some_and(|n| n != *t))
            .map(|(k, _)| k.clone())
            .collect();
        let invalidated = {
            let mut cache = self.cache.lock();
            let stale: Vec<String> = cache
                .iter()
                .filter(|(_, e)| removed.contains(&e.tool.tool_name) || changed.contains(&e.tool.tool_name))
                .map(|(k, _)| k.clone())
                .collect();
            for k in &stale {
                cache.pop(k);
            }
            stale.len()
        };
        let report = ReloadReport {
            old_registry_hash: old.tools.source_registry_hash.clone(),
            new_registry_hash: next.tools.source_registry_hash.clone(),
            noop: old.registry.content_hash() == next.registry.content_hash(),
            added,
            removed,
            changed,
            invalidated,
        };
        *guard = next;
        drop(guard);
        self.audit.append(AuditRecord::Reload {
            timestamp: self.clock.now(),
            old_registry_hash: report.old_registry_hash.clone(),
            new_registry_hash: report.new_registry_hash.clone(),
            invalidated,
        });
        report
    }

    /// Loads and swaps in the registry at `path`; on failure the current
    /// surface stays active.
    pub fn reload_from(&self, path: &Path) -> Result<ReloadReport, ReloadError> {
        let registry = Registry::load(path)?;
        Ok(self.reload(registry))
    }
}

#[cfg(test)]
mod tests;
