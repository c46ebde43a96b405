//! The tool server and its client side.
//!
//! [`ToolServer`] answers wire requests: `initialize`, `tools/list` (plain
//! enumeration, parameter lookup for one tool, or retrieval plus a budgeted
//! context for a query), `tools/call` and `shutdown`. Clients reach it
//! through a [`ServerConnection`]: in-process via [`Loopback`], which still
//! pushes every message through the frame codec, or over TCP.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{CallStatus, ExecError, Executor, ToolCall, ToolResult};
use crate::selection::{
    build_context, enumerate_instructions, match_with, query_parameters, Bm25Matcher, ContextDocument,
    InstructionListing, SelectionResult, ToolDetail, DEFAULT_K,
};
use crate::wire::{
    self, FrameIoError, MessageKind, Method, RpcError, RpcMessage, INVALID_PARAMS, METHOD_NOT_FOUND, TIMEOUT,
    TOOL_FAILURE,
};

pub const SERVER_NAME: &str = "audiofab";
const DEFAULT_BUDGET_TOKENS: usize = 4096;

/// Retrieval output for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selection: SelectionResult,
    pub context: ContextDocument,
}

pub struct ToolServer {
    executor: Arc<Executor>,
    matcher: Bm25Matcher,
}

fn invalid(msg: impl Into<String>) -> RpcError {
    RpcError::new(INVALID_PARAMS, msg)
}

fn field<T: DeserializeOwned>(params: &Map<String, Value>, key: &str) -> Result<Option<T>, RpcError> {
    params
        .get(key)
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| invalid(format!("{key}: {e}"))))
        .transpose()
}

impl ToolServer {
    pub fn new(executor: Arc<Executor>) -> Self {
        let matcher = Bm25Matcher::new(executor.registry());
        ToolServer { executor, matcher }
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    /// Answers one message. Notifications and stray responses get no reply.
    pub fn handle(&self, msg: &RpcMessage) -> Option<RpcMessage> {
        if msg.kind != MessageKind::Request {
            return None;
        }
        let id = msg.id?;
        let params = msg.params.clone().unwrap_or_default();
        let outcome = match msg.method? {
            Method::Initialize => Ok(json!({
                "server": SERVER_NAME,
                "version": env!("CARGO_PKG_VERSION"),
                "tools": self.executor.registry().len(),
            })),
            Method::ToolsList => self.list(&params),
            Method::ToolsCall => self.call(&params),
            Method::Shutdown => Ok(Value::Null),
            Method::TraceEvent => Err(RpcError::new(METHOD_NOT_FOUND, "trace/event is a notification")),
        };
        Some(match outcome {
            Ok(result) => RpcMessage::success(id, result),
            Err(err) => RpcMessage::failure(id, err),
        })
    }

    fn list(&self, params: &Map<String, Value>) -> Result<Value, RpcError> {
        let reg = self.executor.registry();
        if let Some(name) = field::<String>(params, "name")? {
            let detail = query_parameters(reg, &name).map_err(|e| invalid(e.to_string()))?;
            return Ok(serde_json::to_value(detail).expect("serializes"));
        }
        let Some(query) = field::<String>(params, "query")? else {
            return Ok(serde_json::to_value(enumerate_instructions(reg)).expect("serializes"));
        };
        let k = field::<usize>(params, "k")?.unwrap_or(DEFAULT_K);
        let budget = field::<usize>(params, "budget_tokens")?.unwrap_or(DEFAULT_BUDGET_TOKENS);
        let selection = match_with(&self.matcher, reg, &query, k).map_err(|e| invalid(e.to_string()))?;
        let context = build_context(&query, &selection, reg, budget).map_err(|e| invalid(e.to_string()))?;
        Ok(serde_json::to_value(Selection { selection, context }).expect("serializes"))
    }

    fn call(&self, params: &Map<String, Value>) -> Result<Value, RpcError> {
        let workspace: PathBuf = field(params, "workspace")?.ok_or_else(|| invalid("missing workspace"))?;
        let call = ToolCall {
            call_id: field(params, "call_id")?.ok_or_else(|| invalid("missing call_id"))?,
            tool: field(params, "tool")?.ok_or_else(|| invalid("missing tool"))?,
            arguments: field(params, "arguments")?.unwrap_or_default(),
        };
        let result = self.executor.call(&workspace, &call).map_err(|e| match e {
            ExecError::UnknownTool(_) | ExecError::InvalidArguments { .. } => invalid(e.to_string()),
            other => RpcError::new(TOOL_FAILURE, other.to_string()),
        })?;
        let value = serde_json::to_value(&result).expect("serializes");
        match result.status {
            CallStatus::Ok => Ok(value),
            CallStatus::Error => Err(RpcError::new(TOOL_FAILURE, message_of(&result)).with_data(value)),
            CallStatus::Timeout => Err(RpcError::new(TIMEOUT, message_of(&result)).with_data(value)),
        }
    }
}

fn message_of(r: &ToolResult) -> String {
    r.error.clone().unwrap_or_else(|| "tool failed".into())
}

/// Serves frames from `reader` until EOF or `shutdown`.
pub fn serve_stream<R: BufRead, W: Write>(server: &ToolServer, mut reader: R, mut writer: W) -> io::Result<()> {
    loop {
        let msg = match wire::read_frame(&mut reader) {
            Ok(Some(msg)) => msg,
            Ok(None) => return Ok(()),
            Err(FrameIoError::Io(e)) => return Err(e),
            Err(FrameIoError::Wire(e)) => {
                tracing::warn!(error = %e, "dropping undecodable frame");
                continue;
            }
        };
        let stop = msg.method == Some(Method::Shutdown);
        if let Some(reply) = server.handle(&msg) {
            wire::write_frame(&mut writer, &reply).map_err(|e| io::Error::other(e.to_string()))?;
            writer.flush()?;
        }
        if stop {
            return Ok(());
        }
    }
}

/// Accepts connections until the listener fails, one thread per client.
pub fn serve_tcp(server: Arc<ToolServer>, listener: TcpListener) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let server = Arc::clone(&server);
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => return tracing::warn!(error = %e, "cannot clone tcp stream"),
            };
            if let Err(e) = serve_stream(&server, reader, stream) {
                tracing::warn!(error = %e, "tool server connection ended");
            }
        });
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("server error {}: {}", .0.code, .0.message)]
    Rpc(RpcError),
    #[error("transport: {0}")]
    Transport(String),
    #[error("unexpected reply: {0}")]
    Unexpected(String),
}

/// A client-side channel to a tool server.
pub trait ServerConnection: Send {
    fn request(&mut self, method: Method, params: Option<Map<String, Value>>) -> Result<Value, ClientError>;
}

impl ServerConnection for Box<dyn ServerConnection> {
    fn request(&mut self, method: Method, params: Option<Map<String, Value>>) -> Result<Value, ClientError> {
        (**self).request(method, params)
    }
}

fn unwrap_reply(reply: RpcMessage) -> Result<Value, ClientError> {
    match (reply.result, reply.error) {
        (_, Some(err)) => Err(ClientError::Rpc(err)),
        (Some(v), None) => Ok(v),
        (None, None) => Err(ClientError::Unexpected("response without result".into())),
    }
}

/// In-process connection that still round-trips every frame through the codec.
pub struct Loopback {
    server: Arc<ToolServer>,
    next_id: u64,
}

impl Loopback {
    pub fn new(server: Arc<ToolServer>) -> Self {
        Loopback { server, next_id: 1 }
    }
}

impl ServerConnection for Loopback {
    fn request(&mut self, method: Method, params: Option<Map<String, Value>>) -> Result<Value, ClientError> {
        let id = self.next_id;
        self.next_id += 1;
        let transport = |e: wire::WireError| ClientError::Transport(e.to_string());
        let bytes = wire::encode_frame(&RpcMessage::request(id, method, params)).map_err(transport)?;
        let received = wire::decode_frame(&bytes).map_err(transport)?;
        let reply = self
            .server
            .handle(&received)
            .ok_or_else(|| ClientError::Unexpected("no reply".into()))?;
        let bytes = wire::encode_frame(&reply).map_err(transport)?;
        unwrap_reply(wire::decode_frame(&bytes).map_err(transport)?)
    }
}

pub struct TcpConnection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
}

impl TcpConnection {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let writer = TcpStream::connect(addr)?;
        let reader = BufReader::new(writer.try_clone()?);
        Ok(TcpConnection {
            reader,
            writer,
            next_id: 1,
        })
    }
}

impl ServerConnection for TcpConnection {
    fn request(&mut self, method: Method, params: Option<Map<String, Value>>) -> Result<Value, ClientError> {
        let id = self.next_id;
        self.next_id += 1;
        wire::write_frame(&mut self.writer, &RpcMessage::request(id, method, params))
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        loop {
            match wire::read_frame(&mut self.reader) {
                Ok(Some(msg)) if msg.kind == MessageKind::Response && msg.id == Some(id) => return unwrap_reply(msg),
                Ok(Some(_)) => continue,
                Ok(None) => return Err(ClientError::Transport("connection closed".into())),
                Err(e) => return Err(ClientError::Transport(e.to_string())),
            }
        }
    }
}

fn decode<T: DeserializeOwned>(v: Value) -> Result<T, ClientError> {
    serde_json::from_value(v).map_err(|e| ClientError::Unexpected(e.to_string()))
}

/// Typed helpers over any connection.
pub struct ToolClient<C: ServerConnection> {
    conn: C,
}

impl<C: ServerConnection> ToolClient<C> {
    pub fn new(conn: C) -> Self {
        ToolClient { conn }
    }

    pub fn initialize(&mut self) -> Result<Value, ClientError> {
        self.conn.request(Method::Initialize, None)
    }

    pub fn list_tools(&mut self) -> Result<InstructionListing, ClientError> {
        decode(self.conn.request(Method::ToolsList, None)?)
    }

    pub fn tool_detail(&mut self, name: &str) -> Result<ToolDetail, ClientError> {
        let mut p = Map::new();
        p.insert("name".into(), json!(name));
        decode(self.conn.request(Method::ToolsList, Some(p))?)
    }

    pub fn select(&mut self, query: &str, k: usize, budget_tokens: usize) -> Result<Selection, ClientError> {
        let mut p = Map::new();
        p.insert("query".into(), json!(query));
        p.insert("k".into(), json!(k));
        p.insert("budget_tokens".into(), json!(budget_tokens));
        decode(self.conn.request(Method::ToolsList, Some(p))?)
    }

    /// Runs a call. Tool-level failures come back as a non-ok result; the
    /// error side is reserved for calls the server refused outright.
    pub fn call_tool(&mut self, workspace: &std::path::Path, call: &ToolCall) -> Result<ToolResult, ClientError> {
        let mut p = Map::new();
        p.insert("call_id".into(), json!(call.call_id));
        p.insert("tool".into(), json!(call.tool));
        p.insert("arguments".into(), Value::Object(call.arguments.clone()));
        p.insert("workspace".into(), json!(workspace));
        match self.conn.request(Method::ToolsCall, Some(p)) {
            Ok(v) => decode(v),
            Err(ClientError::Rpc(RpcError {
                code, data: Some(data), ..
            })) if code == TOOL_FAILURE || code == TIMEOUT => decode(data),
            Err(e) => Err(e),
        }
    }

    pub fn shutdown(&mut self) -> Result<(), ClientError> {
        self.conn.request(Method::Shutdown, None).map(|_| ())
    }
}
