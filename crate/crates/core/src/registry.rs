//! The declarative metrics registry.
//!
//! A registry file declares every metric the system knows about: its meaning,
//! how it is retrieved from Gold, which platforms it covers and the governance
//! metadata (access category, volatility) that the compiler turns into ACL and
//! cache policy. Nothing downstream invents metric semantics; they all read a
//! [`Registry`].
//!
//! The source grammar is a TOML subset:
//!
//! ```text
//! registry_version = "2024.1"
//! [metric.crash_rate]
//! description = "Crashes per active session"
//! platforms = ["ios", "android"]
//! source_metric = "crash_events"
//! aggregation = "mean"
//! default_window = "24h"
//! volatility = "high"
//! access_category = "stability_read"
//! unit = "ratio"
//! threshold_direction = "above"
//! threshold_warn = 0.05
//! threshold_critical = 0.10
//! version = 2
//! ```
//!
//! The canonical form is compact JSON with sorted keys and entries sorted by
//! `metric_id`; `content_hash` is the SHA-256 of those bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::time::{format_duration, parse_duration};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("cannot read registry {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("registry parse error: {0}")]
    Parse(String),
    #[error("metric_id {0:?} declared more than once")]
    DuplicateMetricId(String),
    #[error("invalid thresholds for {metric_id}: {reason}")]
    InvalidThresholds { metric_id: String, reason: String },
    #[error("registry declares no metrics")]
    EmptyRegistry,
    #[error("invalid {field} for {metric_id}: {reason}")]
    InvalidField {
        metric_id: String,
        field: &'static str,
        reason: String,
    },
    #[error("Gold series {source_metric:?} is read with conflicting aggregations ({first} vs {second})")]
    ConflictingAggregation {
        source_metric: String,
        first: Aggregation,
        second: Aggregation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolatilityClass {
    High,
    Medium,
    Low,
}

impl VolatilityClass {
    pub const ALL: [VolatilityClass; 3] = [Self::High, Self::Medium, Self::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::High => "high",
            Self::Medium => "medium",
            Self::Low => "low",
        }
    }
}

/// The closed set of aggregation operators a metric may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    Count,
    Mean,
    Max,
    Min,
    Last,
}

impl Aggregation {
    pub const ALL: [Aggregation; 6] = [
        Self::Sum,
        Self::Count,
        Self::Mean,
        Self::Max,
        Self::Min,
        Self::Last,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Count => "count",
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Min => "min",
            Self::Last => "last",
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Platform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdDirection {
    Above,
    Below,
}

impl ThresholdDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Above => "above",
            Self::Below => "below",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeverityThresholds {
    pub warn: f64,
    pub critical: f64,
    pub direction: ThresholdDirection,
}

impl SeverityThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if !self.warn.is_finite() || !self.critical.is_finite() {
            return Err("thresholds must be finite numbers".into());
        }
        match self.direction {
            ThresholdDirection::Above if self.critical < self.warn => Err(format!(
                "direction=above requires critical ({}) >= warn ({})",
                self.critical, self.warn
            )),
            ThresholdDirection::Below if self.critical > self.warn => Err(format!(
                "direction=below requires critical ({}) <= warn ({})",
                self.critical, self.warn
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSpec {
    /// Name of the Gold series this metric reads.
    pub source_metric: String,
    pub aggregation: Aggregation,
    #[serde(rename = "default_window_secs", with = "duration_secs")]
    pub default_window: Duration,
    pub allowed_group_by: BTreeSet<GroupBy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricDefinition {
    pub metric_id: String,
    pub description: String,
    pub platform_scope: BTreeSet<String>,
    pub retrieval: RetrievalSpec,
    pub volatility_class: VolatilityClass,
    pub access_category: String,
    pub thresholds: Option<SeverityThresholds>,
    pub unit: String,
    pub definition_version: u32,
}

impl MetricDefinition {
    pub fn validate(&self) -> Result<(), RegistryError> {
        let invalid = |field, reason: &str| RegistryError::InvalidField {
            metric_id: self.metric_id.clone(),
            field,
            reason: reason.to_string(),
        };
        if !is_snake_identifier(&self.metric_id) {
            return Err(invalid("metric_id", "must be lowercase snake_case"));
        }
        if self.platform_scope.is_empty() {
            return Err(invalid("platforms", "platform scope must not be empty"));
        }
        if self.platform_scope.iter().any(|p| p.trim().is_empty()) {
            return Err(invalid("platforms", "platform identifiers must be non-blank"));
        }
        if self.retrieval.source_metric.trim().is_empty() {
            return Err(invalid("source_metric", "must be non-empty"));
        }
        if self.retrieval.default_window.is_zero() {
            return Err(invalid("default_window", "must be greater than zero"));
        }
        if self.definition_version < 1 {
            return Err(invalid("version", "must be at least 1"));
        }
        if self.access_category.trim().is_empty() {
            return Err(invalid("access_category", "must be non-empty"));
        }
        if let Some(t) = &self.thresholds {
            t.validate()
                .map_err(|reason| RegistryError::InvalidThresholds {
                    metric_id: self.metric_id.clone(),
                    reason,
                })?;
        }
        Ok(())
    }
}

fn is_snake_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

/// A validated, immutable registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    entries: Vec<MetricDefinition>,
    registry_version: String,
    content_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CanonicalRegistry {
    entries: Vec<MetricDefinition>,
    registry_version: String,
}

impl Registry {
    /// Validates a set of definitions and seals them into a registry.
    pub fn new(
        registry_version: impl Into<String>,
        mut entries: Vec<MetricDefinition>,
    ) -> Result<Registry, RegistryError> {
        if entries.is_empty() {
            return Err(RegistryError::EmptyRegistry);
        }
        entries.sort_by(|a, b| a.metric_id.cmp(&b.metric_id));
        for pair in entries.windows(2) {
            if pair[0].metric_id == pair[1].metric_id {
                return Err(RegistryError::DuplicateMetricId(pair[0].metric_id.clone()));
            }
        }
        let mut series: BTreeMap<&str, Aggregation> = BTreeMap::new();
        for def in &entries {
            def.validate()?;
            let agg = def.retrieval.aggregation;
            if let Some(&first) = series.get(def.retrieval.source_metric.as_str()) {
                if first != agg {
                    return Err(RegistryError::ConflictingAggregation {
                        source_metric: def.retrieval.source_metric.clone(),
                        first,
                        second: agg,
                    });
                }
            }
            series.insert(&def.retrieval.source_metric, agg);
        }
        let mut registry = Registry {
            entries,
            registry_version: registry_version.into(),
            content_hash: String::new(),
        };
        registry.content_hash = sha256_hex(&registry.canonicalize());
        Ok(registry)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Registry, RegistryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Registry::parse(&text)
    }

    /// Parses the registry source grammar.
    pub fn parse(text: &str) -> Result<Registry, RegistryError> {
        check_duplicate_tables(text)?;
        let raw: RawRegistry =
            toml::from_str(text).map_err(|e| RegistryError::Parse(e.message().to_string()))?;
        let entries = raw
            .metric
            .into_iter()
            .map(|(id, m)| m.into_definition(id))
            .collect::<Result<Vec<_>, _>>()?;
        Registry::new(raw.registry_version, entries)
    }

    /// Re-parses canonical bytes produced by [`Registry::canonicalize`].
    pub fn from_canonical(bytes: &[u8]) -> Result<Registry, RegistryError> {
        let c: CanonicalRegistry =
            serde_json::from_slice(bytes).map_err(|e| RegistryError::Parse(e.to_string()))?;
        Registry::new(c.registry_version, c.entries)
    }

    /// Compact JSON, keys sorted, entries sorted by `metric_id`.
    pub fn canonicalize(&self) -> Vec<u8> {
        let doc = serde_json::json!({
            "entries": self.entries,
            "registry_version": self.registry_version,
        });
        canonical_json(&doc)
    }

    /// Renders the registry back to its source grammar.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "registry_version = {}", toml_str(&self.registry_version));
        for def in &self.entries {
            let _ = writeln!(out, "\n[metric.{}]", def.metric_id);
            let _ = writeln!(out, "description = {}", toml_str(&def.description));
            let platforms: Vec<String> = def.platform_scope.iter().map(|p| toml_str(p)).collect();
            let _ = writeln!(out, "platforms = [{}]", platforms.join(", "));
            let _ = writeln!(out, "source_metric = {}", toml_str(&def.retrieval.source_metric));
            let _ = writeln!(out, "aggregation = \"{}\"", def.retrieval.aggregation);
            let _ = writeln!(
                out,
                "default_window = \"{}\"",
                format_duration(def.retrieval.default_window)
            );
            if def.retrieval.allowed_group_by.is_empty() {
                let _ = writeln!(out, "group_by = []");
            }
            let _ = writeln!(out, "volatility = \"{}\"", def.volatility_class.as_str());
            let _ = writeln!(out, "access_category = {}", toml_str(&def.access_category));
            let _ = writeln!(out, "unit = {}", toml_str(&def.unit));
            if let Some(t) = &def.thresholds {
                let _ = writeln!(out, "threshold_direction = \"{}\"", t.direction.as_str());
                let _ = writeln!(out, "threshold_warn = {:?}", t.warn);
                let _ = writeln!(out, "threshold_critical = {:?}", t.critical);
            }
            let _ = writeln!(out, "version = {}", def.definition_version);
        }
        out
    }

    pub fn entries(&self) -> &[MetricDefinition] {
        &self.entries
    }

    pub fn registry_version(&self) -> &str {
        &self.registry_version
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, metric_id: &str) -> Option<&MetricDefinition> {
        self.entries
            .binary_search_by(|d| d.metric_id.as_str().cmp(metric_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Aggregation used to materialise a Gold series, if any metric reads it.
    pub fn series_aggregation(&self, source_metric: &str) -> Option<Aggregation> {
        self.entries
            .iter()
            .find(|d| d.retrieval.source_metric == source_metric)
            .map(|d| d.retrieval.aggregation)
    }

    /// Metrics reading a Gold series, in `metric_id` order.
    pub fn metrics_for_series<'a>(
        &'a self,
        source_metric: &'a str,
    ) -> impl Iterator<Item = &'a MetricDefinition> + 'a {
        self.entries
            .iter()
            .filter(move |d| d.retrieval.source_metric == source_metric)
    }

    /// Every distinct Gold series referenced by the registry.
    pub fn series(&self) -> BTreeSet<&str> {
        self.entries
            .iter()
            .map(|d| d.retrieval.source_metric.as_str())
            .collect()
    }
}

/// Metrics added, removed or changed between two registries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RegistryDiff {
    pub added: BTreeSet<String>,
    pub removed: BTreeSet<String>,
    pub changed: BTreeSet<String>,
}

impl RegistryDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

pub fn diff_registries(old: &Registry, new: &Registry) -> RegistryDiff {
    let canon = |d: &MetricDefinition| canonical_json(&serde_json::to_value(d).expect("serializable"));
    let old_map: BTreeMap<&str, Vec<u8>> = old
        .entries
        .iter()
        .map(|d| (d.metric_id.as_str(), canon(d)))
        .collect();
    let new_map: BTreeMap<&str, Vec<u8>> = new
        .entries
        .iter()
        .map(|d| (d.metric_id.as_str(), canon(d)))
        .collect();
    let mut diff = RegistryDiff::default();
    for (id, bytes) in &new_map {
        match old_map.get(id) {
            None => {
                diff.added.insert(id.to_string());
            }
            Some(old_bytes) if old_bytes != bytes => {
                diff.changed.insert(id.to_string());
            }
            Some(_) => {}
        }
    }
    for id in old_map.keys() {
        if !new_map.contains_key(id) {
            diff.removed.insert(id.to_string());
        }
    }
    diff
}

/// Compact JSON with object keys in lexicographic order and shortest
/// round-trip float formatting.
pub fn canonical_json(value: &serde_json::Value) -> Vec<u8> {
    // serde_json's default map is a BTreeMap, so keys already come out sorted.
    serde_json::to_vec(value).expect("JSON values always serialize")
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn check_duplicate_tables(text: &str) -> Result<(), RegistryError> {
    let mut seen = BTreeSet::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        let Some(inner) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) else {
            continue;
        };
        let Some(id) = inner.trim().strip_prefix("metric.") else {
            continue;
        };
        let id = id.trim().trim_matches('"').to_string();
        if !seen.insert(id.clone()) {
            return Err(RegistryError::DuplicateMetricId(id));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegistry {
    registry_version: String,
    #[serde(default)]
    metric: BTreeMap<String, RawMetric>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetric {
    description: String,
    platforms: Vec<String>,
    source_metric: String,
    aggregation: Aggregation,
    default_window: String,
    #[serde(default)]
    group_by: Option<Vec<GroupBy>>,
    volatility: VolatilityClass,
    access_category: String,
    unit: String,
    threshold_direction: Option<ThresholdDirection>,
    threshold_warn: Option<toml::Value>,
    threshold_critical: Option<toml::Value>,
    version: i64,
}

impl RawMetric {
    fn into_definition(self, metric_id: String) -> Result<MetricDefinition, RegistryError> {
        let invalid = |field, reason: String| RegistryError::InvalidField {
            metric_id: metric_id.clone(),
            field,
            reason,
        };
        let default_window = parse_duration(&self.default_window)
            .map_err(|e| invalid("default_window", e.to_string()))?;
        let definition_version = u32::try_from(self.version)
            .map_err(|_| invalid("version", format!("{} is out of range", self.version)))?;
        let number = |field, v: toml::Value| match v {
            toml::Value::Float(f) => Ok(f),
            toml::Value::Integer(i) => Ok(i as f64),
            other => Err(RegistryError::Parse(format!(
                "metric {metric_id}: {field} must be a number, found {}",
                other.type_str()
            ))),
        };
        let thresholds = match (self.threshold_direction, self.threshold_warn, self.threshold_critical) {
            (None, None, None) => None,
            (Some(direction), Some(w), Some(c)) => Some(SeverityThresholds {
                warn: number("threshold_warn", w)?,
                critical: number("threshold_critical", c)?,
                direction,
            }),
            _ => {
                return Err(RegistryError::InvalidThresholds {
                    metric_id,
                    reason: "threshold_direction, threshold_warn and threshold_critical must be given together".into(),
                })
            }
        };
        Ok(MetricDefinition {
            description: self.description,
            platform_scope: self.platforms.into_iter().collect(),
            retrieval: RetrievalSpec {
                source_metric: self.source_metric,
                aggregation: self.aggregation,
                default_window,
                allowed_group_by: self
                    .group_by
                    .map(|g| g.into_iter().collect())
                    .unwrap_or_else(|| BTreeSet::from([GroupBy::Platform])),
            },
            volatility_class: self.volatility,
            access_category: self.access_category,
            thresholds,
            unit: self.unit,
            definition_version,
            metric_id,
        })
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}
