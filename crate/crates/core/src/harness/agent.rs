use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::serve::rpc::{handle_value, PRINCIPAL_HEADER};
use crate::serve::{Principal, Server};
use crate::time::Timestamp;

/// Carries one JSON-RPC request to a server and returns its reply.
pub trait Transport {
    fn request(&self, msg: &Value) -> Result<Value, String>;
}

/// Calls a [`Server`] in the same process.
pub struct InProcess {
    pub server: Arc<Server>,
    pub principal: Principal,
}

impl Transport for InProcess {
    fn request(&self, msg: &Value) -> Result<Value, String> {
        handle_value(&self.server, &self.principal, msg).ok_or_else(|| "no reply".to_string())
    }
}

/// POSTs each request to a server's `/mcp` endpoint, naming the principal
/// in the [`PRINCIPAL_HEADER`] header.
pub struct Http {
    pub url: String,
    pub principal_id: String,
    pub timeout: Duration,
}

impl Http {
    pub fn new(url: &str, principal_id: &str) -> Http {
        Http {
            url: url.to_string(),
            principal_id: principal_id.to_string(),
            timeout: Duration::from_secs(10),
        }
    }
}

impl Transport for Http {
    fn request(&self, msg: &Value) -> Result<Value, String> {
        let reply = ureq::post(&self.url)
            .set("Content-Type", "application/json")
            .set(PRINCIPAL_HEADER, &self.principal_id)
            .timeout(self.timeout)
            .send_string(&msg.to_string())
            .map_err(|e| e.to_string())?;
        let text = reply.into_string().map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| format!("malformed reply: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScriptStep {
    List,
    Call { tool: String, arguments: Value },
}

/// A fixed sequence of requests, e.g. from a JSON file:
/// `{"steps": [{"op": "list"}, {"op": "call", "tool": "get_crash_rate", "arguments": {...}}]}`
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepOutcome {
    /// The tool list, or a successful tool result.
    Ok { result: Value },
    /// A tool-level failure with its machine-readable code.
    ToolError { code: String, message: String },
    /// A JSON-RPC error, e.g. an unknown tool.
    ProtocolError { code: i64, message: String, data: Value },
    TransportError { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub step: usize,
    pub request: Value,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    /// Successful call results, without cache metadata.
    pub fn payloads(&self) -> Vec<Value> {
        self.entries
            .iter()
            .filter_map(|e| match &e.outcome {
                StepOutcome::Ok { result } if e.request["method"] == "tools/call" => {
                    Some(result["structuredContent"].clone())
                }
                _ => None,
            })
            .collect()
    }
}

fn classify(reply: Value) -> StepOutcome {
    if let Some(err) = reply.get("error") {
        return StepOutcome::ProtocolError {
            code: err["code"].as_i64().unwrap_or_default(),
            message: err["message"].as_str().unwrap_or_default().to_string(),
            data: err.get("data").cloned().unwrap_or(Value::Null),
        };
    }
    let result = reply.get("result").cloned().unwrap_or(Value::Null);
    if result["isError"] == true {
        let s = &result["structuredContent"];
        return StepOutcome::ToolError {
            code: s["code"].as_str().unwrap_or_default().to_string(),
            message: s["message"].as_str().unwrap_or_default().to_string(),
        };
    }
    StepOutcome::Ok { result }
}

/// Runs `script` in order. Transport failures are recorded and the script
/// continues.
pub fn simulate(transport: &dyn Transport, script: &Script) -> Transcript {
    let entries = script
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let request = match step {
                ScriptStep::List => json!({"jsonrpc": "2.0", "id": i, "method": "tools/list"}),
                ScriptStep::Call { tool, arguments } => json!({
                    "jsonrpc": "2.0", "id": i, "method": "tools/call",
                    "params": {"name": tool, "arguments": arguments},
                }),
            };
            let outcome = match transport.request(&request) {
                Ok(reply) => classify(reply),
                Err(message) => StepOutcome::TransportError { message },
            };
            TranscriptEntry {
                step: i,
                request,
                outcome,
            }
        })
        .collect();
    Transcript { entries }
}

/// A seeded mix of listings, valid calls over `[start, end)`, calls with bad
/// arguments and calls to tools that do not exist.
pub fn random_script(seed: u64, steps: usize, tools: &[(String, Vec<String>)], start: Timestamp, end: Timestamp) -> Script {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span_hours = ((end.as_millis() - start.as_millis()) / 3_600_000).max(1);
    let hour = |h: i64| Timestamp::from_millis(start.as_millis() + h * 3_600_000).to_rfc3339();
    let steps = (0..steps)
        .map(|_| {
            let roll = rng.gen_range(0..10);
            if roll == 0 || tools.is_empty() {
                return ScriptStep::List;
            }
            if roll == 1 {
                return ScriptStep::Call {
                    tool: format!("get_unknown_{}", rng.gen_range(0..100)),
                    arguments: json!({}),
                };
            }
            let (tool, platforms) = &tools[rng.gen_range(0..tools.len())];
            let a = rng.gen_range(0..span_hours);
            let b = rng.gen_range(a + 1..=span_hours);
            let platform = if roll == 2 {
                "unknown_platform".to_string()
            } else {
                platforms[rng.gen_range(0..platforms.len())].clone()
            };
            ScriptStep::Call {
                tool: tool.clone(),
                arguments: json!({"platform": platform, "start_time": hour(a), "end_time": hour(b)}),
            }
        })
        .collect();
    Script { steps }
}
