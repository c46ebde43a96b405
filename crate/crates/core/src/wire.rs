//! Newline-delimited JSON message framing.
//!
//! Every boundary in the system (gateway to orchestrator, orchestrator to the
//! tool server, tool server to tool subprocess) exchanges [`RpcMessage`]s, one
//! per line. A frame is a single line of strict UTF-8 JSON terminated by one
//! `0x0A` byte and at most [`MAX_FRAME_BYTES`] long.

use std::fmt;
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Upper bound on a single frame, newline included.
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const TOOL_FAILURE: i64 = -32000;
pub const TIMEOUT: i64 = -32001;

const KNOWN_CODES: [i64; 6] = [
    PARSE_ERROR,
    INVALID_REQUEST,
    METHOD_NOT_FOUND,
    INVALID_PARAMS,
    TOOL_FAILURE,
    TIMEOUT,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Request,
    Response,
    Notification,
}

impl MessageKind {
    fn as_str(self) -> &'static str {
        match self {
            MessageKind::Request => "request",
            MessageKind::Response => "response",
            MessageKind::Notification => "notification",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "initialize")]
    Initialize,
    #[serde(rename = "tools/list")]
    ToolsList,
    #[serde(rename = "tools/call")]
    ToolsCall,
    #[serde(rename = "trace/event")]
    TraceEvent,
    #[serde(rename = "shutdown")]
    Shutdown,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Initialize,
        Method::ToolsList,
        Method::ToolsCall,
        Method::TraceEvent,
        Method::Shutdown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Initialize => "initialize",
            Method::ToolsList => "tools/list",
            Method::ToolsCall => "tools/call",
            Method::TraceEvent => "trace/event",
            Method::Shutdown => "shutdown",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcError {
    pub code: i64,
    pub message: String,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

/// Keeps an explicit `null` distinct from an absent field.
fn present<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

impl RpcError {
    pub fn new(code: i64, message: impl Into<String>) -> Self {
        RpcError {
            code,
            message: message.into(),
            data: None,
        }
    }

    pub fn with_data(mut self, data: Value) -> Self {
        self.data = Some(data);
        self
    }
}

impl fmt::Display for RpcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.message, self.code)
    }
}

/// The protocol envelope. Fields mirror the wire object one-to-one; which of
/// them may be present depends on `kind` and is checked by [`RpcMessage::check`].
#[derive(Debug, Clone, PartialEq)]
pub struct RpcMessage {
    pub kind: MessageKind,
    pub id: Option<u64>,
    pub method: Option<Method>,
    pub params: Option<Map<String, Value>>,
    pub result: Option<Value>,
    pub error: Option<RpcError>,
}

impl RpcMessage {
    pub fn request(id: u64, method: Method, params: Option<Map<String, Value>>) -> Self {
        RpcMessage {
            kind: MessageKind::Request,
            id: Some(id),
            method: Some(method),
            params,
            result: None,
            error: None,
        }
    }

    pub fn notification(method: Method, params: Option<Map<String, Value>>) -> Self {
        RpcMessage {
            kind: MessageKind::Notification,
            id: None,
            method: Some(method),
            params,
            result: None,
            error: None,
        }
    }

    pub fn success(id: u64, result: Value) -> Self {
        RpcMessage {
            kind: MessageKind::Response,
            id: Some(id),
            method: None,
            params: None,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(id: u64, error: RpcError) -> Self {
        RpcMessage {
            kind: MessageKind::Response,
            id: Some(id),
            method: None,
            params: None,
            result: None,
            error: Some(error),
        }
    }

    /// Lists every envelope invariant the message breaks.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let has_id = self.id.is_some();
        match self.kind {
            MessageKind::Request | MessageKind::Response if !has_id => {
                problems.push(format!("{} requires an id", self.kind.as_str()))
            }
            MessageKind::Notification if has_id => problems.push("notification must not carry an id".into()),
            _ => {}
        }
        if self.id == Some(0) {
            problems.push("id must be >= 1".into());
        }
        match self.kind {
            MessageKind::Request | MessageKind::Notification => {
                if self.method.is_none() {
                    problems.push(format!("{} requires a method", self.kind.as_str()));
                }
                if self.result.is_some() || self.error.is_some() {
                    problems.push(format!("{} must not carry result or error", self.kind.as_str()));
                }
            }
            MessageKind::Response => {
                if self.method.is_some() {
                    problems.push("response must not carry a method".into());
                }
                if self.params.is_some() {
                    problems.push("response must not carry params".into());
                }
                match (&self.result, &self.error) {
                    (Some(_), Some(_)) => problems.push("response carries both result and error".into()),
                    (None, None) => problems.push("response carries neither result nor error".into()),
                    _ => {}
                }
            }
        }
        if let Some(err) = &self.error {
            if err.message.is_empty() {
                problems.push("error message must be nonempty".into());
            }
            if !KNOWN_CODES.contains(&err.code) {
                problems.push(format!("error code {} is not a protocol code", err.code));
            }
        }
        problems
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("message violates envelope invariants: {}", .0.join("; "))]
    InvariantViolation(Vec<String>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl WireError {
    /// Protocol error code a peer should answer with.
    pub fn code(&self) -> i64 {
        match self {
            WireError::Parse(_) => PARSE_ERROR,
            WireError::InvalidRequest(_) | WireError::InvariantViolation(_) => INVALID_REQUEST,
        }
    }

    pub fn to_rpc_error(&self) -> RpcError {
        RpcError::new(self.code(), self.to_string())
    }
}

pub fn encode_frame(msg: &RpcMessage) -> Result<Vec<u8>, WireError> {
    let problems = msg.check();
    if !problems.is_empty() {
        return Err(WireError::InvariantViolation(problems));
    }
    let mut obj = Map::new();
    obj.insert("kind".into(), Value::String(msg.kind.as_str().into()));
    if let Some(id) = msg.id {
        obj.insert("id".into(), Value::from(id));
    }
    if let Some(method) = msg.method {
        obj.insert("method".into(), Value::String(method.as_str().into()));
    }
    if let Some(params) = &msg.params {
        obj.insert("params".into(), Value::Object(params.clone()));
    }
    if let Some(result) = &msg.result {
        obj.insert("result".into(), result.clone());
    }
    if let Some(error) = &msg.error {
        // serialization of a plain struct of strings and numbers cannot fail
        obj.insert(
            "error".into(),
            serde_json::to_value(error).expect("RpcError serializes"),
        );
    }
    // serde_json escapes control characters inside strings, so the compact
    // form never contains a raw newline.
    let mut out = serde_json::to_vec(&Value::Object(obj)).expect("Value serializes");
    out.push(b'\n');
    if out.len() > MAX_FRAME_BYTES {
        return Err(WireError::InvariantViolation(vec![format!(
            "encoded frame is {} bytes, limit is {MAX_FRAME_BYTES}",
            out.len()
        )]));
    }
    Ok(out)
}

/// Decodes one frame. A single trailing newline is accepted but not required.
pub fn decode_frame(line: &[u8]) -> Result<RpcMessage, WireError> {
    if line.len() > MAX_FRAME_BYTES {
        return Err(WireError::Parse(format!(
            "frame of {} bytes exceeds limit of {MAX_FRAME_BYTES}",
            line.len()
        )));
    }
    let body = line.strip_suffix(b"\n").unwrap_or(line);
    if let Some(pos) = body.iter().position(|&b| b == b'\n') {
        return Err(WireError::Parse(format!("raw newline inside frame at byte {pos}")));
    }
    let text = std::str::from_utf8(body).map_err(|e| WireError::Parse(format!("invalid UTF-8: {e}")))?;
    let value: Value = serde_json::from_str(text).map_err(|e| WireError::Parse(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(WireError::InvalidRequest("frame is not a JSON object".into()));
    };

    // tolerated for peers that speak plain JSON-RPC 2.0
    if let Some(v) = obj.remove("jsonrpc") {
        if v != Value::String("2.0".into()) {
            return Err(WireError::InvalidRequest("unsupported jsonrpc version".into()));
        }
    }

    let kind = match obj.remove("kind") {
        Some(Value::String(s)) => match s.as_str() {
            "request" => MessageKind::Request,
            "response" => MessageKind::Response,
            "notification" => MessageKind::Notification,
            other => return Err(WireError::InvalidRequest(format!("unknown kind '{other}'"))),
        },
        Some(_) => return Err(WireError::InvalidRequest("kind must be a string".into())),
        None => return Err(WireError::InvalidRequest("missing kind".into())),
    };
    let id = match obj.remove("id") {
        None => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| WireError::InvalidRequest("id must be a positive integer".into()))?,
        ),
    };
    let method = match obj.remove("method") {
        None => None,
        Some(Value::String(s)) => {
            Some(Method::parse(&s).ok_or_else(|| WireError::InvalidRequest(format!("unknown method '{s}'")))?)
        }
        Some(_) => return Err(WireError::InvalidRequest("method must be a string".into())),
    };
    let params = match obj.remove("params") {
        None => None,
        Some(Value::Object(m)) => Some(m),
        Some(_) => return Err(WireError::InvalidRequest("params must be an object".into())),
    };
    let result = obj.remove("result");
    let error = match obj.remove("error") {
        None => None,
        Some(v) => Some(
            serde_json::from_value::<RpcError>(v)
                .map_err(|e| WireError::InvalidRequest(format!("malformed error object: {e}")))?,
        ),
    };
    if let Some((key, _)) = obj.iter().next() {
        return Err(WireError::InvalidRequest(format!("unexpected key '{key}'")));
    }

    let msg = RpcMessage {
        kind,
        id,
        method,
        params,
        result,
        error,
    };
    let problems = msg.check();
    if !problems.is_empty() {
        return Err(WireError::InvalidRequest(problems.join("; ")));
    }
    Ok(msg)
}

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Reads the next frame from a stream. Returns `Ok(None)` on clean EOF.
pub fn read_frame<R: BufRead>(reader: &mut R) -> Result<Option<RpcMessage>, FrameIoError> {
    let mut line = Vec::new();
    let limit = MAX_FRAME_BYTES as u64 + 1;
    let n = reader.by_ref().take(limit).read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        if line.len() > MAX_FRAME_BYTES {
            return Err(WireError::Parse("frame exceeds size limit".into()).into());
        }
        return Err(WireError::Parse("stream ended inside a frame".into()).into());
    }
    Ok(Some(decode_frame(&line)?))
}

pub fn write_frame<W: Write>(writer: &mut W, msg: &RpcMessage) -> Result<(), FrameIoError> {
    let bytes = encode_frame(msg)?;
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(())
}
