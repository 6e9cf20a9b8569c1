use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::{silver_id, QuarantinedRecord, SilverRecord, SILVER_SCHEMA_VERSION};
use crate::digest::{sha256_hex, KeyHasher};
use crate::ingest::{BronzeRecord, ExtractionPattern};
use crate::time::Timestamp;

/// Timestamp fields consulted, in order, to fill `unified_ts`. The first field
/// present wins; if it does not parse the row is quarantined.
pub fn timestamp_precedence(pattern: ExtractionPattern) -> &'static [&'static str] {
    match pattern {
        ExtractionPattern::StateBased => &["merged_at", "resolved_at", "ts"],
        ExtractionPattern::EventBased => &["ts"],
        ExtractionPattern::Snapshot => &["ts"],
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HarmonizeOutput {
    /// Sorted by `silver_id`, one record per id.
    pub silver: Vec<SilverRecord>,
    /// Sorted by `quarantine_id`, one record per id.
    pub quarantined: Vec<QuarantinedRecord>,
}

struct Candidate {
    record: SilverRecord,
    /// Extraction marker; the newest observation of an id wins.
    marker: Timestamp,
    raw: String,
}

/// Maps Bronze payload rows to Silver. Output depends only on the set of
/// input records, not their order.
pub fn harmonize(bronze: &[BronzeRecord]) -> HarmonizeOutput {
    let (silver, quarantined) = select(bronze);
    let mut silver: Vec<SilverRecord> = silver.into_values().map(|c| c.record).collect();
    silver.sort_by(|a, b| a.silver_id.cmp(&b.silver_id));
    HarmonizeOutput {
        silver,
        quarantined: quarantined.into_values().collect(),
    }
}

/// Like [`harmonize`], pairing each Silver record with the raw source line it
/// came from. Quarantined rows are left out.
pub fn harmonize_with_raw(bronze: &[BronzeRecord]) -> Vec<(SilverRecord, String)> {
    let mut out: Vec<(SilverRecord, String)> = select(bronze)
        .0
        .into_values()
        .map(|c| (c.record, c.raw))
        .collect();
    out.sort_by(|a, b| a.0.silver_id.cmp(&b.0.silver_id));
    out
}

type Selected = (
    BTreeMap<(String, String), Candidate>,
    BTreeMap<String, QuarantinedRecord>,
);

fn select(bronze: &[BronzeRecord]) -> Selected {
    // Keyed by (source, entity or event identity): the newest observation of
    // an entity replaces older ones even when its timestamp moved.
    let mut silver: BTreeMap<(String, String), Candidate> = BTreeMap::new();
    let mut quarantined: BTreeMap<String, QuarantinedRecord> = BTreeMap::new();
    for rec in bronze {
        let text = String::from_utf8_lossy(&rec.payload);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rows = match parse_line(rec.pattern, line) {
                Ok(rows) => rows,
                Err(reason) => {
                    quarantine(&mut quarantined, rec, line, reason);
                    continue;
                }
            };
            for row in rows {
                match row_to_silver(rec, &row) {
                    Ok((record, marker)) => {
                        let cand = Candidate {
                            record,
                            marker,
                            raw: line.to_string(),
                        };
                        let key = (rec.source_id.clone(), row.identity.clone());
                        match silver.get(&key) {
                            Some(existing) if !supersedes(&cand, existing) => {}
                            _ => {
                                silver.insert(key, cand);
                            }
                        }
                    }
                    Err(reason) => quarantine(&mut quarantined, rec, line, reason),
                }
            }
        }
    }
    (silver, quarantined)
}

fn supersedes(new: &Candidate, old: &Candidate) -> bool {
    (new.marker, &new.raw, std::cmp::Reverse(&new.record.bronze_ref))
        > (old.marker, &old.raw, std::cmp::Reverse(&old.record.bronze_ref))
}

fn quarantine(
    out: &mut BTreeMap<String, QuarantinedRecord>,
    rec: &BronzeRecord,
    line: &str,
    reason: String,
) {
    let id = KeyHasher::new("quarantine").str(&rec.source_id).str(line).finish();
    let entry = QuarantinedRecord {
        quarantine_id: id.clone(),
        source_id: rec.source_id.clone(),
        bronze_ref: rec.bronze_id.clone(),
        observed_at: rec.fetch_window.start,
        raw: line.to_string(),
        reason,
    };
    match out.get(&id) {
        Some(existing) if existing.bronze_ref <= entry.bronze_ref => {}
        _ => {
            out.insert(id, entry);
        }
    }
}

enum Parsed {
    Event(Map<String, Value>),
    State(Map<String, Value>),
    Snapshot(Map<String, Value>),
}

fn parse_line(pattern: ExtractionPattern, line: &str) -> Result<Vec<OwnedRow>, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed row: {e}"))?;
    let Value::Object(obj) = value else {
        return Err("malformed row: not an object".into());
    };
    let parsed = match pattern {
        ExtractionPattern::EventBased => Parsed::Event(obj),
        ExtractionPattern::StateBased => Parsed::State(obj),
        ExtractionPattern::Snapshot => Parsed::Snapshot(obj),
    };
    let line_digest = || sha256_hex(line.as_bytes());
    match parsed {
        Parsed::Event(obj) => {
            let identity = obj
                .get("event_id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .unwrap_or_else(line_digest);
            Ok(vec![OwnedRow {
                fields: obj,
                identity,
                marker: None,
                fallback_ts: None,
            }])
        }
        Parsed::State(mut obj) => {
            let identity = obj
                .get("entity_id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or("missing entity_id")?;
            let marker = obj
                .get("updated_at")
                .and_then(Value::as_str)
                .and_then(|s| Timestamp::parse(s).ok());
            let Some(Value::Object(state)) = obj.remove("state") else {
                return Err("missing state object".into());
            };
            Ok(vec![OwnedRow {
                fields: state,
                identity,
                marker,
                fallback_ts: None,
            }])
        }
        Parsed::Snapshot(mut obj) => {
            let interval = obj
                .get("snapshot_interval")
                .and_then(Value::as_str)
                .ok_or("missing snapshot_interval")?;
            let interval = Timestamp::parse(interval).map_err(|_| "unparseable snapshot_interval")?;
            let Some(Value::Array(rows)) = obj.remove("rows") else {
                return Err("missing rows array".into());
            };
            rows.into_iter()
                .enumerate()
                .map(|(i, row)| {
                    let Value::Object(fields) = row else {
                        return Err(format!("snapshot row {i} is not an object"));
                    };
                    let entity = fields
                        .get("entity_id")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .unwrap_or_else(|| format!("row#{i}"));
                    Ok(OwnedRow {
                        fields,
                        identity: format!("{}/{}", interval.as_millis(), entity),
                        marker: Some(interval),
                        fallback_ts: Some(interval),
                    })
                })
                .collect()
        }
    }
}

struct OwnedRow {
    fields: Map<String, Value>,
    identity: String,
    marker: Option<Timestamp>,
    fallback_ts: Option<Timestamp>,
}

fn row_to_silver(rec: &BronzeRecord, row: &OwnedRow) -> Result<(SilverRecord, Timestamp), String> {
    let unified_ts = unify_timestamp(rec.pattern, &row.fields, row.fallback_ts)?;
    let text = |k: &str| -> Result<String, String> {
        match row.fields.get(k) {
            Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
            Some(_) => Err(format!("invalid {k}")),
            None => Err(format!("missing {k}")),
        }
    };
    let platform = text("platform")?;
    let metric_name = text("metric")?;
    let value = match row.fields.get("value") {
        Some(Value::Number(n)) => n.as_f64().filter(|v| v.is_finite()).ok_or("invalid value")?,
        Some(_) => return Err("invalid value".into()),
        None => return Err("missing value".into()),
    };
    let record = SilverRecord {
        silver_id: silver_id(&rec.source_id, &row.identity, unified_ts),
        source_id: rec.source_id.clone(),
        platform,
        metric_name,
        unified_ts,
        value,
        schema_version: SILVER_SCHEMA_VERSION,
        bronze_ref: rec.bronze_id.clone(),
    };
    Ok((record, row.marker.unwrap_or(unified_ts)))
}

fn unify_timestamp(
    pattern: ExtractionPattern,
    fields: &Map<String, Value>,
    fallback: Option<Timestamp>,
) -> Result<Timestamp, String> {
    for field in timestamp_precedence(pattern) {
        match fields.get(*field) {
            None | Some(Value::Null) => continue,
            Some(Value::String(s)) => {
                return Timestamp::parse(s).map_err(|_| format!("unparseable {field}"))
            }
            Some(_) => return Err(format!("unparseable {field}")),
        }
    }
    fallback.ok_or_else(|| "no timestamp".to_string())
}
