//! Compiles a [`Registry`] into the MCP tool surface.
//!
//! Every field of a [`CompiledTool`] is derived from exactly one
//! [`MetricDefinition`] plus the cache policy; nothing is hand-authored. The
//! serialized [`CompiledToolSet`] is the document `tools/list` returns.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::registry::{canonical_json, MetricDefinition, Registry, VolatilityClass};
use crate::time::{duration_str, format_duration};

pub const TOOL_PREFIX: &str = "get_";

pub fn tool_name_for(metric_id: &str) -> String {
    format!("{TOOL_PREFIX}{metric_id}")
}

/// Volatility class to cache TTL mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CachePolicy {
    #[serde(with = "duration_str")]
    pub high: Duration,
    #[serde(with = "duration_str")]
    pub medium: Duration,
    #[serde(with = "duration_str")]
    pub low: Duration,
}

impl Default for CachePolicy {
    fn default() -> Self {
        CachePolicy {
            high: Duration::from_secs(30),
            medium: Duration::from_secs(300),
            low: Duration::from_secs(3_600),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("cannot read policy file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid policy file: {0}")]
    Parse(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(default)]
    cache_ttl: Option<PartialPolicy>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialPolicy {
    high: Option<String>,
    medium: Option<String>,
    low: Option<String>,
}

impl CachePolicy {
    pub fn ttl(&self, class: VolatilityClass) -> Duration {
        match class {
            VolatilityClass::High => self.high,
            VolatilityClass::Medium => self.medium,
            VolatilityClass::Low => self.low,
        }
    }

    /// Reads a policy file; absent keys keep their defaults.
    ///
    /// ```text
    /// [cache_ttl]
    /// high = "30s"
    /// medium = "5m"
    /// low = "1h"
    /// ```
    pub fn load(path: impl AsRef<Path>) -> Result<CachePolicy, PolicyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        CachePolicy::parse(&text)
    }

    pub fn parse(text: &str) -> Result<CachePolicy, PolicyError> {
        let file: PolicyFile =
            toml::from_str(text).map_err(|e| PolicyError::Parse(e.message().to_string()))?;
        let mut policy = CachePolicy::default();
        if let Some(p) = file.cache_ttl {
            for (slot, value) in [
                (&mut policy.high, p.high),
                (&mut policy.medium, p.medium),
                (&mut policy.low, p.low),
            ] {
                if let Some(v) = value {
                    *slot = crate::time::parse_duration(&v)
                        .map_err(|e| PolicyError::Parse(e.to_string()))?;
                }
            }
        }
        Ok(policy)
    }
}

/// Parameters every compiled tool accepts: `platform`, `start_time`, `end_time`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSchema {
    pub platform: BTreeSet<String>,
}

impl ParamSchema {
    pub fn to_json(&self) -> Value {
        json!({
            "type": "object",
            "properties": {
                "platform": {
                    "type": "string",
                    "enum": self.platform,
                    "description": "Platform to query",
                },
                "start_time": {
                    "type": "string",
                    "format": "date-time",
                    "description": "Inclusive window start (RFC 3339)",
                },
                "end_time": {
                    "type": "string",
                    "format": "date-time",
                    "description": "Exclusive window end (RFC 3339)",
                },
            },
            "required": ["platform", "start_time", "end_time"],
            "additionalProperties": false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledTool {
    pub tool_name: String,
    pub description: String,
    pub param_schema: ParamSchema,
    pub metric_id: String,
    pub acl_binding: String,
    pub cache_ttl: Duration,
    pub definition_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledToolSet {
    pub tools: Vec<CompiledTool>,
    pub source_registry_hash: String,
    pub compiled_at_version: String,
}

pub fn render_description(def: &MetricDefinition) -> String {
    let platforms: Vec<&str> = def.platform_scope.iter().map(String::as_str).collect();
    format!(
        "{}. Unit: {}. Aggregation: {} over Gold series '{}'. Default window: {}. Platforms: {}.",
        def.description,
        def.unit,
        def.retrieval.aggregation,
        def.retrieval.source_metric,
        format_duration(def.retrieval.default_window),
        platforms.join(", "),
    )
}

pub fn compile_definition(def: &MetricDefinition, policy: &CachePolicy) -> CompiledTool {
    CompiledTool {
        tool_name: tool_name_for(&def.metric_id),
        description: render_description(def),
        param_schema: ParamSchema {
            platform: def.platform_scope.clone(),
        },
        metric_id: def.metric_id.clone(),
        acl_binding: def.access_category.clone(),
        cache_ttl: policy.ttl(def.volatility_class),
        definition_version: def.definition_version,
    }
}

/// Compiles with the default cache policy.
pub fn compile(registry: &Registry) -> CompiledToolSet {
    compile_with_policy(registry, &CachePolicy::default())
}

pub fn compile_with_policy(registry: &Registry, policy: &CachePolicy) -> CompiledToolSet {
    let mut tools: Vec<CompiledTool> = registry
        .entries()
        .iter()
        .map(|d| compile_definition(d, policy))
        .collect();
    tools.sort_by(|a, b| a.tool_name.cmp(&b.tool_name));
    CompiledToolSet {
        tools,
        source_registry_hash: registry.content_hash().to_string(),
        compiled_at_version: registry.registry_version().to_string(),
    }
}

impl CompiledTool {
    pub fn to_json(&self, registry_hash: &str) -> Value {
        json!({
            "name": self.tool_name,
            "description": self.description,
            "inputSchema": self.param_schema.to_json(),
            "x_acl_category": self.acl_binding,
            "x_cache_ttl_seconds": self.cache_ttl.as_secs(),
            "x_definition_version": self.definition_version,
            "x_registry_hash": registry_hash,
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("malformed tool document: {0}")]
pub struct ToolDocumentError(pub String);

impl CompiledToolSet {
    pub fn get(&self, tool_name: &str) -> Option<&CompiledTool> {
        self.tools
            .binary_search_by(|t| t.tool_name.as_str().cmp(tool_name))
            .ok()
            .map(|i| &self.tools[i])
    }

    pub fn tool_names(&self) -> BTreeSet<&str> {
        self.tools.iter().map(|t| t.tool_name.as_str()).collect()
    }

    /// The tool document restricted to tools passing `keep`.
    pub fn document_filtered(&self, keep: impl Fn(&CompiledTool) -> bool) -> Value {
        let tools: Vec<Value> = self
            .tools
            .iter()
            .filter(|t| keep(t))
            .map(|t| t.to_json(&self.source_registry_hash))
            .collect();
        json!({
            "tools": tools,
            "x_registry_version": self.compiled_at_version,
        })
    }

    pub fn to_document(&self) -> Value {
        self.document_filtered(|_| true)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(&self.to_document())
    }

    /// Parses a document produced by [`CompiledToolSet::to_document`].
    pub fn from_document(doc: &Value) -> Result<CompiledToolSet, ToolDocumentError> {
        let err = |m: &str| ToolDocumentError(m.to_string());
        let compiled_at_version = doc["x_registry_version"]
            .as_str()
            .ok_or_else(|| err("missing x_registry_version"))?
            .to_string();
        let mut hashes = BTreeSet::new();
        let mut tools = Vec::new();
        for t in doc["tools"].as_array().ok_or_else(|| err("missing tools array"))? {
            let s = |k: &str| {
                t[k].as_str()
                    .map(str::to_string)
                    .ok_or_else(|| ToolDocumentError(format!("tool field {k} missing")))
            };
            let tool_name = s("name")?;
            let metric_id = tool_name
                .strip_prefix(TOOL_PREFIX)
                .ok_or_else(|| err("tool name lacks get_ prefix"))?
                .to_string();
            let platform = t["inputSchema"]["properties"]["platform"]["enum"]
                .as_array()
                .ok_or_else(|| err("platform enum missing"))?
                .iter()
                .map(|p| p.as_str().map(str::to_string).ok_or_else(|| err("platform not a string")))
                .collect::<Result<BTreeSet<_>, _>>()?;
            hashes.insert(s("x_registry_hash")?);
            tools.push(CompiledTool {
                description: s("description")?,
                param_schema: ParamSchema { platform },
                metric_id,
                acl_binding: s("x_acl_category")?,
                cache_ttl: Duration::from_secs(
                    t["x_cache_ttl_seconds"].as_u64().ok_or_else(|| err("ttl missing"))?,
                ),
                definition_version: t["x_definition_version"]
                    .as_u64()
                    .and_then(|v| u32::try_from(v).ok())
                    .ok_or_else(|| err("definition version missing"))?,
                tool_name,
            });
        }
        if hashes.len() > 1 {
            return Err(err("tools carry different registry hashes"));
        }
        tools.sort_by(|a, b| a.tool_name.cmp(&b.tool_name));
        Ok(CompiledToolSet {
            tools,
            source_registry_hash: hashes.into_iter().next().unwrap_or_default(),
            compiled_at_version,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Discrepancy {
    /// The registry declares a metric with no compiled tool.
    MissingTool { tool_name: String },
    /// A compiled tool whose metric is no longer declared.
    OrphanedTool { tool_name: String },
    StaleDescription { tool_name: String },
    StaleSchema { tool_name: String },
    VersionMismatch {
        tool_name: String,
        compiled: u32,
        declared: u32,
    },
    StalePolicy { tool_name: String },
    RegistryMismatch { compiled_hash: String, registry_hash: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AlignmentReport {
    pub discrepancies: Vec<Discrepancy>,
}

impl AlignmentReport {
    pub fn is_empty(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

pub fn verify_alignment(tool_set: &CompiledToolSet, registry: &Registry) -> AlignmentReport {
    verify_alignment_with_policy(tool_set, registry, &CachePolicy::default())
}

/// Lists every way `tool_set` differs from a fresh compilation of `registry`.
/// Empty exactly when the two serialize identically.
pub fn verify_alignment_with_policy(
    tool_set: &CompiledToolSet,
    registry: &Registry,
    policy: &CachePolicy,
) -> AlignmentReport {
    let expected = compile_with_policy(registry, policy);
    let have: BTreeMap<&str, &CompiledTool> =
        tool_set.tools.iter().map(|t| (t.tool_name.as_str(), t)).collect();
    let want: BTreeMap<&str, &CompiledTool> =
        expected.tools.iter().map(|t| (t.tool_name.as_str(), t)).collect();
    let mut out = Vec::new();
    for (name, w) in &want {
        let Some(h) = have.get(name) else {
            out.push(Discrepancy::MissingTool {
                tool_name: name.to_string(),
            });
            continue;
        };
        let tool_name = name.to_string();
        if h.definition_version != w.definition_version {
            out.push(Discrepancy::VersionMismatch {
                tool_name: tool_name.clone(),
                compiled: h.definition_version,
                declared: w.definition_version,
            });
        }
        if h.description != w.description {
            out.push(Discrepancy::StaleDescription {
                tool_name: tool_name.clone(),
            });
        }
        if h.param_schema != w.param_schema || h.metric_id != w.metric_id {
            out.push(Discrepancy::StaleSchema {
                tool_name: tool_name.clone(),
            });
        }
        if h.acl_binding != w.acl_binding || h.cache_ttl != w.cache_ttl {
            out.push(Discrepancy::StalePolicy { tool_name });
        }
    }
    for name in have.keys() {
        if !want.contains_key(name) {
            out.push(Discrepancy::OrphanedTool {
                tool_name: name.to_string(),
            });
        }
    }
    if tool_set.source_registry_hash != expected.source_registry_hash
        || tool_set.compiled_at_version != expected.compiled_at_version
    {
        out.push(Discrepancy::RegistryMismatch {
            compiled_hash: tool_set.source_registry_hash.clone(),
            registry_hash: expected.source_registry_hash,
        });
    }
    AlignmentReport { discrepancies: out }
}
