//! Threshold alerting driven by the Gold change stream.
//!
//! [`evaluate`] and [`apply_cooldown`] are pure: the only clock is the
//! `bucket_start` of the change event being evaluated. [`PushEngine`] adds
//! redelivery tolerance, persistence and the notification outbox.

mod engine;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::digest::KeyHasher;
use crate::registry::{SeverityThresholds, ThresholdDirection};
use crate::store::ChangeEvent;
use crate::time::{duration_str, Timestamp};

pub use engine::{run_consumer, AlertBook, EngineError, NotificationRecord, Outbox, PushEngine, WebhookSink};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warn,
    Critical,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Warn => "warn",
            Severity::Critical => "critical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertStatus {
    Inactive,
    Firing,
}

/// Alert state of one `(metric_id, platform)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertState {
    pub metric_id: String,
    pub platform: String,
    pub status: AlertStatus,
    pub severity: Option<Severity>,
    pub fired_at: Option<Timestamp>,
    pub last_notified: BTreeMap<Severity, Timestamp>,
    /// Value the metric must cross back over to resolve; set while firing.
    pub resolution_bound: Option<f64>,
}

impl AlertState {
    pub fn new(metric_id: &str, platform: &str) -> Self {
        AlertState {
            metric_id: metric_id.to_string(),
            platform: platform.to_string(),
            status: AlertStatus::Inactive,
            severity: None,
            fired_at: None,
            last_notified: BTreeMap::new(),
            resolution_bound: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationKind {
    Fired,
    Escalated,
    Resolved,
}

impl NotificationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NotificationKind::Fired => "fired",
            NotificationKind::Escalated => "escalated",
            NotificationKind::Resolved => "resolved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub dedup_key: String,
    pub kind: NotificationKind,
    pub metric_id: String,
    pub platform: String,
    pub severity: Severity,
    /// The Gold value that caused the transition.
    pub value: f64,
    /// Threshold crossed: warn or critical when firing, the resolution bound when resolving.
    pub threshold: f64,
    /// Start of the Gold bucket whose update caused the transition.
    pub emitted_at: Timestamp,
    pub gold_key: String,
}

pub fn dedup_key(
    kind: NotificationKind,
    metric_id: &str,
    platform: &str,
    severity: Severity,
    fired_at: Timestamp,
) -> String {
    KeyHasher::new("notification")
        .str(kind.as_str())
        .str(metric_id)
        .str(platform)
        .str(severity.as_str())
        .i64(fired_at.as_millis())
        .finish()
}

/// Hysteresis margin and cooldown in effect for one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricStability {
    /// Fraction of `|warn|` the value must retreat past before resolving.
    pub margin: f64,
    pub cooldown: Duration,
}

fn default_margin() -> f64 {
    0.1
}

fn default_cooldown() -> Duration {
    Duration::from_secs(15 * 60)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginOverride {
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_cooldown", with = "duration_str")]
    pub cooldown: Duration,
    /// Per-metric margin, keyed by metric_id.
    #[serde(default)]
    pub overrides: BTreeMap<String, MarginOverride>,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            margin: default_margin(),
            cooldown: default_cooldown(),
            overrides: BTreeMap::new(),
        }
    }
}

impl StabilityConfig {
    pub fn for_metric(&self, metric_id: &str) -> MetricStability {
        MetricStability {
            margin: self.overrides.get(metric_id).map_or(self.margin, |o| o.margin),
            cooldown: self.cooldown,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |m: f64| m.is_finite() && (0.0..1.0).contains(&m);
        if !ok(self.margin) {
            return Err(format!("margin {} must be in [0, 1)", self.margin));
        }
        for (id, o) in &self.overrides {
            if !ok(o.margin) {
                return Err(format!("margin {} for {id} must be in [0, 1)", o.margin));
            }
        }
        Ok(())
    }
}

/// Where a firing alert resolves: `margin · |warn|` back past the warn threshold.
pub fn resolution_bound(t: &SeverityThresholds, margin: f64) -> f64 {
    let slack = margin * t.warn.abs();
    match t.direction {
        ThresholdDirection::Above => t.warn - slack,
        ThresholdDirection::Below => t.warn + slack,
    }
}

fn severity_of(t: &SeverityThresholds, v: f64) -> Option<Severity> {
    let (crit, warn) = match t.direction {
        ThresholdDirection::Above => (v >= t.critical, v >= t.warn),
        ThresholdDirection::Below => (v <= t.critical, v <= t.warn),
    };
    if crit {
        Some(Severity::Critical)
    } else if warn {
        Some(Severity::Warn)
    } else {
        None
    }
}

fn past_bound(t: &SeverityThresholds, v: f64, bound: f64) -> bool {
    match t.direction {
        ThresholdDirection::Above => v < bound,
        ThresholdDirection::Below => v > bound,
    }
}

fn threshold_for(t: &SeverityThresholds, s: Severity) -> f64 {
    match s {
        Severity::Warn => t.warn,
        Severity::Critical => t.critical,
    }
}

/// Applies one Gold value to an alert.
///
/// Inactive alerts fire once the value reaches warn (critical if it also
/// reaches critical). A firing warn alert escalates on reaching critical.
/// A firing alert resolves only when the value moves past the resolution
/// bound; inside the band between bound and warn nothing happens.
pub fn evaluate(
    state: &AlertState,
    event: &ChangeEvent,
    thresholds: &SeverityThresholds,
    stability: &MetricStability,
) -> (AlertState, Option<Notification>) {
    let v = event.new_value;
    let at = event.bucket_start;
    let mut next = state.clone();
    let notify = |next: &AlertState, kind, severity, threshold, fired_at| Notification {
        dedup_key: dedup_key(kind, &next.metric_id, &next.platform, severity, fired_at),
        kind,
        metric_id: next.metric_id.clone(),
        platform: next.platform.clone(),
        severity,
        value: v,
        threshold,
        emitted_at: at,
        gold_key: event.gold_key.clone(),
    };
    match (state.status, state.severity) {
        (AlertStatus::Inactive, _) | (AlertStatus::Firing, None) => {
            let Some(sev) = severity_of(thresholds, v) else {
                return (next, None);
            };
            next.status = AlertStatus::Firing;
            next.severity = Some(sev);
            next.fired_at = Some(at);
            next.resolution_bound = Some(resolution_bound(thresholds, stability.margin));
            let n = notify(&next, NotificationKind::Fired, sev, threshold_for(thresholds, sev), at);
            (next, Some(n))
        }
        (AlertStatus::Firing, Some(sev)) => {
            let fired_at = state.fired_at.unwrap_or(at);
            let bound = state
                .resolution_bound
                .unwrap_or_else(|| resolution_bound(thresholds, stability.margin));
            if past_bound(thresholds, v, bound) {
                next.status = AlertStatus::Inactive;
                next.severity = None;
                next.fired_at = None;
                next.resolution_bound = None;
                let n = notify(state, NotificationKind::Resolved, sev, bound, fired_at);
                return (next, Some(n));
            }
            if sev == Severity::Warn && severity_of(thresholds, v) == Some(Severity::Critical) {
                next.severity = Some(Severity::Critical);
                let n = notify(
                    &next,
                    NotificationKind::Escalated,
                    Severity::Critical,
                    thresholds.critical,
                    fired_at,
                );
                return (next, Some(n));
            }
            (next, None)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    Deliver,
    Suppress,
}

/// Rate-limits fired and escalated notifications per severity. Resolutions
/// always deliver. Delivering records the time in `last_notified`.
pub fn apply_cooldown(
    notification: &Notification,
    state: &AlertState,
    cooldown: Duration,
) -> (Delivery, AlertState) {
    let mut next = state.clone();
    if notification.kind == NotificationKind::Resolved {
        return (Delivery::Deliver, next);
    }
    if let Some(last) = state.last_notified.get(&notification.severity) {
        let gap = notification.emitted_at.millis_since(*last).unsigned_abs();
        if u128::from(gap) < cooldown.as_millis() {
            return (Delivery::Suppress, next);
        }
    }
    next.last_notified
        .insert(notification.severity, notification.emitted_at);
    (Delivery::Deliver, next)
}
