//! JSON-RPC 2.0 framing for the tool server.
//!
//! `UnknownTool` is a protocol error (-32601). Denials, bad arguments and
//! store failures are tool-level results with `isError` and a machine-readable
//! `code`, so a client can tell "no such tool" apart from "tool said no".

use std::io::{BufRead, Write};

use serde_json::{json, Value};

use super::{CallError, Principal, Server};

pub const PROTOCOL_VERSION: &str = "2024-11-05";

/// HTTP header carrying the caller's principal id.
pub const PRINCIPAL_HEADER: &str = "X-Regal-Principal";

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;

fn error(id: Value, code: i64, message: &str, data: Option<Value>) -> Value {
    let mut err = json!({"code": code, "message": message});
    if let Some(d) = data {
        err["data"] = d;
    }
    json!({"jsonrpc": "2.0", "id": id, "error": err})
}

fn result(id: Value, result: Value) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "result": result})
}

/// Handles one request. Notifications (no `id`) produce no response.
pub fn handle_value(server: &Server, principal: &Principal, msg: &Value) -> Option<Value> {
    let Some(obj) = msg.as_object() else {
        return Some(error(Value::Null, INVALID_REQUEST, "request must be an object", None));
    };
    let id = obj.get("id").cloned();
    let Some(method) = obj.get("method").and_then(Value::as_str) else {
        return Some(error(id.unwrap_or(Value::Null), INVALID_REQUEST, "missing method", None));
    };
    let Some(id) = id else {
        // Notifications such as notifications/initialized need no reply.
        return None;
    };
    let params = obj.get("params").cloned().unwrap_or(Value::Null);
    Some(match method {
        "initialize" => result(
            id,
            json!({
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {"tools": {"listChanged": false}},
                "serverInfo": {"name": "regal", "version": env!("CARGO_PKG_VERSION")},
            }),
        ),
        "ping" => result(id, json!({})),
        "tools/list" => result(id, server.tools_list(principal)),
        "tools/call" => {
            let Some(name) = params.get("name").and_then(Value::as_str) else {
                return Some(error(id, INVALID_PARAMS, "tools/call needs a tool name", None));
            };
            let args = params.get("arguments").cloned().unwrap_or_else(|| json!({}));
            match server.tools_call(principal, name, &args) {
                Ok(r) => {
                    let structured: Value = serde_json::from_str(&r.payload).expect("payload is json");
                    result(
                        id,
                        json!({
                            "content": [{"type": "text", "text": &*r.payload}],
                            "structuredContent": structured,
                            "isError": false,
                            "_meta": {"cache_hit": r.cache_hit},
                        }),
                    )
                }
                Err(e @ CallError::UnknownTool(_)) => error(
                    id,
                    METHOD_NOT_FOUND,
                    &e.to_string(),
                    Some(json!({"code": e.code()})),
                ),
                Err(e) => result(
                    id,
                    json!({
                        "content": [{"type": "text", "text": e.to_string()}],
                        "structuredContent": {"code": e.code(), "message": e.to_string()},
                        "isError": true,
                    }),
                ),
            }
        }
        other => error(id, METHOD_NOT_FOUND, &format!("unknown method {other}"), None),
    })
}

/// Handles one serialized message; returns the serialized reply, if any.
pub fn handle_text(server: &Server, principal: &Principal, text: &str) -> Option<String> {
    let reply = match serde_json::from_str::<Value>(text) {
        Ok(Value::Array(batch)) => {
            let replies: Vec<Value> = batch
                .iter()
                .filter_map(|m| handle_value(server, principal, m))
                .collect();
            if replies.is_empty() {
                return None;
            }
            Value::Array(replies)
        }
        Ok(msg) => handle_value(server, principal, &msg)?,
        Err(e) => error(Value::Null, PARSE_ERROR, &format!("parse error: {e}"), None),
    };
    Some(reply.to_string())
}

/// Newline-delimited JSON-RPC over a reader/writer pair, until EOF.
pub fn serve_lines(
    server: &Server,
    principal: &Principal,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(reply) = handle_text(server, principal, &line) {
            output.write_all(reply.as_bytes())?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
    }
    Ok(())
}
