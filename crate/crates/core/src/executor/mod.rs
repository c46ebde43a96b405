//! Isolated tool execution.
//!
//! Every tool call runs as a fresh child process in its own process group,
//! with a scrubbed environment (the manifest's `env_vars`, `PATH` and
//! `AUDIOFAB_WORKDIR`, nothing else), a working directory inside the session
//! workspace, a wall-clock timeout and a cap on stdout. The call travels as
//! one request frame on stdin, duplicated into a request file for tools that
//! prefer reading from disk; the child answers with one response frame.

pub mod server;

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Component, Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::registry::{check_arguments, EnvSpec, ParamType, Registry, ToolManifest};
use crate::wire::{self, MessageKind, Method, RpcMessage, TIMEOUT};

pub const WORKDIR_VAR: &str = "AUDIOFAB_WORKDIR";
pub const REQUEST_FILE_PLACEHOLDER: &str = "{request_file}";
pub const STDERR_EXCERPT_BYTES: usize = 4096;
pub const DEFAULT_MAX_CONCURRENT: usize = 4;
const FALLBACK_PATH: &str = "/usr/local/bin:/usr/bin:/bin";
const POLL_INTERVAL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: String,
    pub tool: String,
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub call_id: String,
    pub status: CallStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    /// Workspace-relative paths of the files the tool produced.
    #[serde(default)]
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub stderr_excerpt: String,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ToolResult {
    pub fn is_ok(&self) -> bool {
        self.status == CallStatus::Ok
    }

    pub fn failed(call_id: &str, status: CallStatus, message: impl Into<String>) -> Self {
        ToolResult {
            call_id: call_id.to_string(),
            status,
            payload: None,
            artifacts: Vec::new(),
            stderr_excerpt: String::new(),
            duration_ms: 0,
            error: Some(message.into()),
        }
    }
}

/// Everything needed to launch one call, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct LaunchPlan {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub cwd: PathBuf,
    pub workspace: PathBuf,
    pub request_file: PathBuf,
    pub timeout: Duration,
    pub max_output_bytes: u64,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("workspace unavailable: {0}")]
    WorkspaceUnavailable(String),
    #[error("invalid environment spec: {0}")]
    SpecInvalid(String),
    #[error("cannot spawn '{}': {source}", .program.display())]
    SpawnFailure {
        program: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("unknown tool '{0}'")]
    UnknownTool(String),
    #[error("invalid arguments for '{tool}': {}", .problems.join("; "))]
    InvalidArguments { tool: String, problems: Vec<String> },
}

fn is_within(path: &Path, root: &Path) -> bool {
    path.starts_with(root)
}

fn lexically_contained(rel: &Path) -> bool {
    rel.components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn file_name_safe(call_id: &str) -> String {
    call_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Builds the launch plan for one call. `tool_dir` is where bare command
/// names are looked up first (the directory holding `audiofab-tool`); it is
/// also prepended to the child's `PATH`.
pub fn resolve_environment(
    spec: &EnvSpec,
    workspace: &Path,
    tool_dir: &Path,
    call_id: &str,
) -> Result<LaunchPlan, ExecError> {
    if spec.command.trim().is_empty() {
        return Err(ExecError::SpecInvalid("empty command".into()));
    }
    if !(spec.timeout_s > 0.0 && spec.timeout_s.is_finite()) {
        return Err(ExecError::SpecInvalid(format!(
            "timeout_s must be positive, got {}",
            spec.timeout_s
        )));
    }
    if spec.max_output_bytes == 0 {
        return Err(ExecError::SpecInvalid("max_output_bytes must be positive".into()));
    }
    let workspace = workspace
        .canonicalize()
        .map_err(|e| ExecError::WorkspaceUnavailable(format!("{}: {e}", workspace.display())))?;
    if !workspace.is_dir() {
        return Err(ExecError::WorkspaceUnavailable(format!(
            "{} is not a directory",
            workspace.display()
        )));
    }

    let cwd = if spec.working_dir.is_absolute() {
        spec.working_dir.clone()
    } else if lexically_contained(&spec.working_dir) {
        let dir = workspace.join(&spec.working_dir);
        fs::create_dir_all(&dir).map_err(|e| ExecError::WorkspaceUnavailable(format!("{}: {e}", dir.display())))?;
        dir
    } else {
        return Err(ExecError::SpecInvalid(format!(
            "working_dir {} leaves the workspace",
            spec.working_dir.display()
        )));
    };
    if !cwd.is_dir() {
        return Err(ExecError::SpecInvalid(format!(
            "working_dir {} does not exist",
            cwd.display()
        )));
    }

    let calls_dir = workspace.join(".calls");
    fs::create_dir_all(&calls_dir)
        .map_err(|e| ExecError::WorkspaceUnavailable(format!("{}: {e}", calls_dir.display())))?;
    let request_file = calls_dir.join(format!("{}.json", file_name_safe(call_id)));
    let request_str = request_file.to_string_lossy();

    let command = Path::new(&spec.command);
    let program = if command.components().count() == 1 && tool_dir.join(command).is_file() {
        tool_dir.join(command)
    } else {
        command.to_path_buf()
    };

    let inherited = std::env::var("PATH").unwrap_or_else(|_| FALLBACK_PATH.to_string());
    let path = if tool_dir.as_os_str().is_empty() {
        inherited
    } else {
        format!("{}:{inherited}", tool_dir.display())
    };
    let mut env = spec.env_vars.clone();
    env.insert("PATH".into(), path);
    env.insert(WORKDIR_VAR.into(), workspace.to_string_lossy().into_owned());

    Ok(LaunchPlan {
        program,
        args: spec
            .args
            .iter()
            .map(|a| a.replace(REQUEST_FILE_PLACEHOLDER, &request_str))
            .collect(),
        env,
        cwd,
        workspace,
        request_file,
        timeout: Duration::from_secs_f64(spec.timeout_s),
        max_output_bytes: spec.max_output_bytes,
    })
}

/// The exact request frame a tool process receives.
pub fn request_frame(call: &ToolCall) -> Vec<u8> {
    let mut params = Map::new();
    params.insert("call_id".into(), json!(call.call_id));
    params.insert("tool".into(), json!(call.tool));
    params.insert("arguments".into(), Value::Object(call.arguments.clone()));
    wire::encode_frame(&RpcMessage::request(1, Method::ToolsCall, Some(params)))
        .expect("a request with id and method is always valid")
}

fn kill_group(child: &Child) {
    // SAFETY: kill(2) with a negative pid signals the process group the child
    // leads; the child was started with process_group(0).
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
}

fn read_capped<R: Read>(mut r: R, cap: usize, overflow: Option<&AtomicBool>) -> Vec<u8> {
    let mut kept = Vec::new();
    let mut chunk = [0u8; 8192];
    loop {
        match r.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                kept.extend_from_slice(&chunk[..n.min(room)]);
                if n > room {
                    if let Some(flag) = overflow {
                        flag.store(true, Ordering::SeqCst);
                        break;
                    }
                }
            }
        }
    }
    kept
}

fn excerpt(bytes: &[u8]) -> String {
    let mut end = bytes.len().min(STDERR_EXCERPT_BYTES);
    while end > 0 && std::str::from_utf8(&bytes[..end]).is_err() {
        end -= 1;
    }
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

fn describe_exit(status: Option<ExitStatus>) -> String {
    match status {
        Some(s) => match (s.code(), s.signal()) {
            (Some(code), _) => format!("exit code {code}"),
            (None, Some(sig)) => format!("signal {sig}"),
            _ => "unknown exit".into(),
        },
        None => "killed".into(),
    }
}

enum Ending {
    Exited(ExitStatus),
    TimedOut,
    Overflowed,
}

/// Runs one call. Transport-level problems that the tool itself caused
/// (timeout, crash, oversized output, escaping artifact paths) come back as
/// a non-ok `ToolResult`; only failures to launch or a well-behaved exit with
/// garbage on stdout are errors.
pub fn invoke_tool(lp: &LaunchPlan, call: &ToolCall) -> Result<ToolResult, ExecError> {
    let frame = request_frame(call);
    fs::write(&lp.request_file, &frame)
        .map_err(|e| ExecError::WorkspaceUnavailable(format!("{}: {e}", lp.request_file.display())))?;

    let started = Instant::now();
    let mut child = Command::new(&lp.program)
        .args(&lp.args)
        .env_clear()
        .envs(&lp.env)
        .current_dir(&lp.cwd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|source| ExecError::SpawnFailure {
            program: lp.program.clone(),
            source,
        })?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = thread::spawn(move || {
        let _ = stdin.write_all(&frame);
    });
    let overflow = Arc::new(AtomicBool::new(false));
    let stdout = child.stdout.take().expect("piped stdout");
    let cap = usize::try_from(lp.max_output_bytes).unwrap_or(usize::MAX);
    let flag = Arc::clone(&overflow);
    let out_reader = thread::spawn(move || read_capped(stdout, cap, Some(&flag)));
    let stderr = child.stderr.take().expect("piped stderr");
    let err_reader = thread::spawn(move || read_capped(stderr, STDERR_EXCERPT_BYTES, None));

    let deadline = started + lp.timeout;
    let ending = loop {
        if overflow.load(Ordering::SeqCst) {
            break Ending::Overflowed;
        }
        match child.try_wait() {
            Ok(Some(status)) => break Ending::Exited(status),
            Ok(None) => {}
            Err(_) => break Ending::Exited(ExitStatus::from_raw(-1)),
        }
        if Instant::now() >= deadline {
            break Ending::TimedOut;
        }
        thread::sleep(POLL_INTERVAL);
    };
    // Reap anything the tool left behind in its group so the pipes close.
    kill_group(&child);
    let exit = match ending {
        Ending::Exited(s) => Some(s),
        _ => {
            let _ = child.wait();
            None
        }
    };
    let _ = writer.join();
    let stdout_bytes = out_reader.join().unwrap_or_default();
    let stderr_bytes = err_reader.join().unwrap_or_default();
    let duration_ms = started.elapsed().as_millis() as u64;

    let base = ToolResult {
        call_id: call.call_id.clone(),
        status: CallStatus::Error,
        payload: None,
        artifacts: Vec::new(),
        stderr_excerpt: excerpt(&stderr_bytes),
        duration_ms,
        error: None,
    };
    match ending {
        Ending::TimedOut => {
            return Ok(ToolResult {
                status: CallStatus::Timeout,
                error: Some(format!("timed out after {:.3} s", lp.timeout.as_secs_f64())),
                ..base
            })
        }
        Ending::Overflowed => {
            return Ok(ToolResult {
                error: Some(format!(
                    "output overflow: stdout exceeded {} bytes",
                    lp.max_output_bytes
                )),
                ..base
            })
        }
        Ending::Exited(_) => {}
    }

    let line_end = stdout_bytes.iter().position(|&b| b == b'\n');
    let decoded = match line_end {
        Some(end) => wire::decode_frame(&stdout_bytes[..=end]).map_err(|e| e.to_string()),
        None if stdout_bytes.is_empty() => Err("no output".to_string()),
        None => Err("unterminated frame".to_string()),
    };
    let clean_exit = exit.is_some_and(|s| s.success());
    let response = match decoded {
        Ok(msg) if msg.kind == MessageKind::Response && msg.id == Some(1) => msg,
        Ok(_) if clean_exit => {
            return Err(ExecError::ProtocolViolation(
                "tool answered with something other than a response to id 1".into(),
            ))
        }
        Err(diag) if clean_exit => return Err(ExecError::ProtocolViolation(diag)),
        Ok(_) | Err(_) => {
            return Ok(ToolResult {
                error: Some(format!(
                    "tool terminated ({}) without a valid response",
                    describe_exit(exit)
                )),
                ..base
            })
        }
    };

    if let Some(err) = response.error {
        let status = if err.code == TIMEOUT {
            CallStatus::Timeout
        } else {
            CallStatus::Error
        };
        return Ok(ToolResult {
            status,
            error: Some(err.message),
            ..base
        });
    }
    let result = response.result.unwrap_or(Value::Null);
    let (payload, reported) = match result {
        Value::Object(mut m) if m.contains_key("payload") || m.contains_key("artifacts") => {
            let payload = m.remove("payload").unwrap_or(Value::Null);
            (payload, m.remove("artifacts").unwrap_or(Value::Array(vec![])))
        }
        other => (other, Value::Array(vec![])),
    };
    let Value::Array(reported) = reported else {
        return Err(ExecError::ProtocolViolation("artifacts must be an array".into()));
    };
    let mut artifacts = Vec::with_capacity(reported.len());
    for item in reported {
        let Some(raw) = item.as_str() else {
            return Err(ExecError::ProtocolViolation("artifact entries must be strings".into()));
        };
        match contain_artifact(lp, raw) {
            Ok(rel) => artifacts.push(rel),
            Err(message) => {
                return Ok(ToolResult {
                    error: Some(message),
                    ..base
                })
            }
        }
    }
    Ok(ToolResult {
        status: CallStatus::Ok,
        payload: Some(payload),
        artifacts,
        ..base
    })
}

/// Maps a tool-reported artifact path to a workspace-relative one, refusing
/// anything that resolves outside the workspace.
fn contain_artifact(lp: &LaunchPlan, raw: &str) -> Result<String, String> {
    let joined = lp.cwd.join(raw);
    let resolved = joined
        .canonicalize()
        .map_err(|_| format!("artifact '{raw}' does not exist"))?;
    if !is_within(&resolved, &lp.workspace) {
        return Err(format!("path escape: artifact '{raw}' is outside the workspace"));
    }
    let rel = resolved.strip_prefix(&lp.workspace).expect("checked prefix");
    Ok(rel.to_string_lossy().into_owned())
}

/// Checks path arguments: absolute, or relative without climbing out.
fn check_paths(manifest: &ToolManifest, args: &Map<String, Value>) -> Vec<String> {
    manifest
        .parameters
        .iter()
        .filter(|p| p.ty == ParamType::Path)
        .filter_map(|p| {
            let s = args.get(&p.name)?.as_str()?;
            let path = Path::new(s);
            (!path.is_absolute() && !lexically_contained(path))
                .then(|| format!("param '{}': path '{s}' leaves the workspace", p.name))
        })
        .collect()
}

/// Validates a call against its manifest.
pub fn validate_call(manifest: &ToolManifest, call: &ToolCall) -> Result<(), ExecError> {
    let mut problems = check_arguments(&manifest.parameters, &call.arguments);
    problems.extend(check_paths(manifest, &call.arguments));
    if problems.is_empty() {
        Ok(())
    } else {
        Err(ExecError::InvalidArguments {
            tool: call.tool.clone(),
            problems,
        })
    }
}

struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter lock") += 1;
        self.0.freed.notify_one();
    }
}

/// Registry-aware front end to [`invoke_tool`] with a bound on concurrently
/// running tool processes.
pub struct Executor {
    registry: Arc<Registry>,
    tool_dir: PathBuf,
    limiter: Limiter,
}

impl Executor {
    pub fn new(registry: Arc<Registry>, tool_dir: PathBuf, max_concurrent: usize) -> Self {
        Executor {
            registry,
            tool_dir,
            limiter: Limiter {
                available: Mutex::new(max_concurrent.max(1)),
                freed: Condvar::new(),
            },
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn tool_dir(&self) -> &Path {
        &self.tool_dir
    }

    pub fn call(&self, workspace: &Path, call: &ToolCall) -> Result<ToolResult, ExecError> {
        let manifest = self
            .registry
            .get(&call.tool)
            .ok_or_else(|| ExecError::UnknownTool(call.tool.clone()))?;
        validate_call(manifest, call)?;
        let lp = resolve_environment(&manifest.env, workspace, &self.tool_dir, &call.call_id)?;
        let _permit = self.limiter.acquire();
        tracing::debug!(tool = %call.tool, call_id = %call.call_id, "invoking tool");
        invoke_tool(&lp, call)
    }
}
