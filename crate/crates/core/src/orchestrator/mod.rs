//! Drives one conversational turn through the thirteen pipeline steps.
//!
//! A turn: receive the request (1), hand it with the tool listing and a
//! budgeted context to the planner (2) and get a plan back (3). Each tool
//! subtask then goes to the tool server (4), through its selection module
//! (5), is matched and has its tool's parameters looked up (6, 7), gets its
//! arguments from the planner (8) and runs through the server (9) in an
//! isolated process (10), its result coming back (11). Finally the results go
//! to the planner (12), which writes the response (13). Every executed step
//! is recorded as a [`TraceEvent`].

mod trace;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::server::{ClientError, Loopback, ServerConnection, ToolClient, ToolServer};
use crate::executor::{CallStatus, ToolCall, ToolResult};
use crate::planner::{
    evaluate_and_revise, resolve_references, template_response, ArgumentRequest, Outcome, Plan, Planner, PlannerError,
    PlanningContext, PriorTurn, RevisionAction, Subtask, SubtaskStatus,
};
use crate::registry::Registry;
use crate::selection::ContextSection;

pub use trace::{validate_trace, Stage, TraceEvent, FIRST_STEP, LAST_STEP};

/// Receives trace events as they happen.
pub trait TraceSink: Send + Sync {
    fn event(&self, event: &TraceEvent);
}

impl<F: Fn(&TraceEvent) + Send + Sync> TraceSink for F {
    fn event(&self, event: &TraceEvent) {
        self(event)
    }
}

pub struct NoSink;

impl TraceSink for NoSink {
    fn event(&self, _: &TraceEvent) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call: ToolCall,
    pub result: ToolResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_id: usize,
    pub user: String,
    pub response: String,
    pub plan: Plan,
    pub calls: Vec<CallRecord>,
    pub trace: Vec<TraceEvent>,
    pub aborted: bool,
}

impl Turn {
    pub fn tool_sequence(&self) -> Vec<&str> {
        self.calls.iter().map(|c| c.call.tool.as_str()).collect()
    }
}

#[derive(Debug)]
pub struct SessionState {
    pub session_id: String,
    pub workspace: PathBuf,
    pub turns: Vec<Turn>,
}

impl SessionState {
    pub fn last_turn(&self) -> Option<&Turn> {
        self.turns.last()
    }
}

#[derive(Debug, Error)]
pub enum TurnError {
    #[error("empty input")]
    EmptyInput,
    #[error("planner unavailable: {message}")]
    PlannerUnavailable { message: String, trace: Vec<TraceEvent> },
    #[error("planning failed: {error}")]
    PlanningFailed {
        error: PlannerError,
        trace: Vec<TraceEvent>,
    },
    #[error("tool server: {message}")]
    Server { message: String, trace: Vec<TraceEvent> },
    /// A subtask failed for good. The turn still completed with a response
    /// over the partial results and was recorded in the session.
    #[error("execution aborted: {reason}")]
    ExecutionAborted { reason: String, turn: Box<Turn> },
    #[error("workspace: {0}")]
    Workspace(String),
}

impl TurnError {
    pub fn trace(&self) -> &[TraceEvent] {
        match self {
            TurnError::PlannerUnavailable { trace, .. }
            | TurnError::PlanningFailed { trace, .. }
            | TurnError::Server { trace, .. } => trace,
            TurnError::ExecutionAborted { turn, .. } => &turn.trace,
            TurnError::EmptyInput | TurnError::Workspace(_) => &[],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub k: usize,
    pub budget_tokens: usize,
    pub workspace_root: PathBuf,
}

type Connector = Box<dyn Fn() -> Box<dyn ServerConnection> + Send + Sync>;

pub struct Orchestrator {
    registry: Arc<Registry>,
    planner: Arc<dyn Planner>,
    connect: Connector,
    settings: Settings,
    epoch: Instant,
}

struct Recorder<'a> {
    events: Vec<TraceEvent>,
    sink: &'a dyn TraceSink,
    epoch: Instant,
}

impl Recorder<'_> {
    fn emit(&mut self, step: u8, subtask: Option<&str>, summary: impl Into<String>) {
        let event = TraceEvent {
            step,
            stage: Stage::for_step(step).expect("pipeline steps are 1..=13"),
            summary: summary.into(),
            at_us: self.epoch.elapsed().as_micros() as u64,
            subtask: subtask.map(str::to_string),
        };
        tracing::debug!(step, summary = %event.summary, "trace");
        self.sink.event(&event);
        self.events.push(event);
    }
}

impl Orchestrator {
    /// Orchestrator talking to `server` in process.
    pub fn new(
        registry: Arc<Registry>,
        planner: Arc<dyn Planner>,
        server: Arc<ToolServer>,
        settings: Settings,
    ) -> Self {
        let connect: Connector = Box::new(move || Box::new(Loopback::new(Arc::clone(&server))));
        Self::with_connector(registry, planner, connect, settings)
    }

    /// Orchestrator using connections made by `connect`, e.g. over TCP.
    pub fn with_connector(
        registry: Arc<Registry>,
        planner: Arc<dyn Planner>,
        connect: Connector,
        settings: Settings,
    ) -> Self {
        Orchestrator {
            registry,
            planner,
            connect,
            settings,
            epoch: Instant::now(),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn new_session(&self) -> Result<SessionState, TurnError> {
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        let workspace = self.settings.workspace_root.join(&session_id);
        fs::create_dir_all(&workspace).map_err(|e| TurnError::Workspace(format!("{}: {e}", workspace.display())))?;
        let workspace = workspace
            .canonicalize()
            .map_err(|e| TurnError::Workspace(format!("{}: {e}", workspace.display())))?;
        Ok(SessionState {
            session_id,
            workspace,
            turns: Vec::new(),
        })
    }

    pub fn handle_turn(
        &self,
        session: &mut SessionState,
        input: &str,
        sink: &dyn TraceSink,
    ) -> Result<Turn, TurnError> {
        let query = input.trim();
        if query.is_empty() {
            return Err(TurnError::EmptyInput);
        }
        let turn_id = session.turns.len() + 1;
        let mut rec = Recorder {
            events: Vec::new(),
            sink,
            epoch: self.epoch,
        };
        let attachments = collect_attachments(query, &session.workspace)?;
        rec.emit(
            1,
            None,
            format!(
                "received request ({} chars, {} attachment(s))",
                query.chars().count(),
                attachments.len()
            ),
        );

        let mut client = ToolClient::new((self.connect)());
        let server_err = |e: ClientError, rec: &mut Recorder<'_>| TurnError::Server {
            message: e.to_string(),
            trace: std::mem::take(&mut rec.events),
        };
        let listing = match client.list_tools() {
            Ok(l) => l,
            Err(e) => return Err(server_err(e, &mut rec)),
        };
        let overview = match client.select(query, self.settings.k, self.settings.budget_tokens) {
            Ok(s) => s,
            Err(e) => return Err(server_err(e, &mut rec)),
        };
        let context = PlanningContext {
            listing,
            document: overview.context,
            attachments: attachments.clone(),
        };
        rec.emit(
            2,
            None,
            format!(
                "forwarded request to {} planner with {} tool instructions and {} detailed tool(s) ({} tokens)",
                self.planner.backend(),
                context.listing.entries.len(),
                context.document.sections.len(),
                context.listing.token_estimate + context.document.token_estimate
            ),
        );

        let history: Vec<PriorTurn> = session
            .turns
            .iter()
            .map(|t| PriorTurn {
                user: t.user.clone(),
                response: t.response.clone(),
            })
            .collect();
        let mut plan = match self.planner.plan_task(query, &context, &history) {
            Ok(p) => p,
            Err(PlannerError::Unavailable(message)) => {
                return Err(TurnError::PlannerUnavailable {
                    message,
                    trace: rec.events,
                })
            }
            Err(error) => {
                return Err(TurnError::PlanningFailed {
                    error,
                    trace: rec.events,
                })
            }
        };
        if let Some(bad) = plan
            .subtasks
            .iter()
            .find_map(|s| s.tool_hint.as_ref().filter(|h| !self.registry.contains(h)))
        {
            return Err(TurnError::PlanningFailed {
                error: PlannerError::UnparseablePlan(format!("plan names unknown tool '{bad}'")),
                trace: rec.events,
            });
        }
        rec.emit(
            3,
            None,
            format!(
                "plan {} with {} subtask(s): {}",
                plan.plan_id,
                plan.subtasks.len(),
                describe_plan(&plan)
            ),
        );

        let mut run = Run {
            orch: self,
            query,
            workspace: &session.workspace,
            attachments: &attachments,
            turn_id,
            results: HashMap::new(),
            finished: Vec::new(),
            calls: Vec::new(),
            abort_reason: None,
            replanned: false,
        };
        let mut i = 0;
        while i < plan.subtasks.len() {
            run.subtask(&mut plan, i, &mut client, &mut rec);
            i += 1;
        }

        let outcomes: Vec<Outcome> = plan
            .subtasks
            .iter()
            .map(|s| Outcome {
                subtask: s.clone(),
                result: run.results.get(&s.id).cloned(),
            })
            .collect();
        let done = outcomes
            .iter()
            .filter(|o| o.subtask.status == SubtaskStatus::Done)
            .count();
        rec.emit(
            12,
            None,
            format!("sent {} subtask outcome(s) to the planner, {done} done", outcomes.len()),
        );
        let response = self.planner.synthesize(query, &outcomes).unwrap_or_else(|e| {
            tracing::warn!(error = %e, "synthesis failed, using the template");
            template_response(query, &outcomes, None)
        });
        rec.emit(13, None, format!("response ready ({} chars)", response.chars().count()));

        let turn = Turn {
            turn_id,
            user: query.to_string(),
            response,
            plan,
            calls: run.calls,
            trace: rec.events,
            aborted: run.abort_reason.is_some(),
        };
        session.turns.push(turn.clone());
        match run.abort_reason {
            Some(reason) => Err(TurnError::ExecutionAborted {
                reason,
                turn: Box::new(turn),
            }),
            None => Ok(turn),
        }
    }
}

fn describe_plan(plan: &Plan) -> String {
    plan.subtasks
        .iter()
        .map(|s| match &s.tool_hint {
            Some(t) => format!("{}->{t}", s.id),
            None => s.id.clone(),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Per-turn execution state.
struct Run<'a> {
    orch: &'a Orchestrator,
    query: &'a str,
    workspace: &'a Path,
    attachments: &'a [String],
    turn_id: usize,
    /// Latest result per subtask id.
    results: HashMap<String, ToolResult>,
    finished: Vec<(Subtask, ToolResult)>,
    calls: Vec<CallRecord>,
    abort_reason: Option<String>,
    replanned: bool,
}

fn set_status(plan: &mut Plan, id: &str, next: SubtaskStatus) {
    let s = plan.get_mut(id).expect("subtask exists");
    debug_assert!(s.status.can_become(next), "{:?} -> {next:?}", s.status);
    s.status = next;
}

impl Run<'_> {
    fn subtask(
        &mut self,
        plan: &mut Plan,
        index: usize,
        client: &mut ToolClient<Box<dyn ServerConnection>>,
        rec: &mut Recorder<'_>,
    ) {
        let subtask = plan.subtasks[index].clone();
        if subtask.status != SubtaskStatus::Pending {
            return;
        }
        let blocked = subtask.depends_on.iter().any(|d| {
            plan.get(d)
                .is_some_and(|s| matches!(s.status, SubtaskStatus::Failed | SubtaskStatus::Skipped))
        });
        if blocked {
            set_status(plan, &subtask.id, SubtaskStatus::Skipped);
            return;
        }
        set_status(plan, &subtask.id, SubtaskStatus::Running);
        let Some(tool) = subtask.tool_hint.clone() else {
            set_status(plan, &subtask.id, SubtaskStatus::Done);
            return;
        };
        let sid = Some(subtask.id.as_str());
        let k = self.orch.settings.k;
        let budget = self.orch.settings.budget_tokens;

        rec.emit(4, sid, format!("forwarded subtask {} to the tool server", subtask.id));
        rec.emit(5, sid, "server passed the request to the tool selection module");
        let selection_query = format!("{} {tool}", subtask.description);
        let section = match (client.select(&selection_query, k, budget), client.tool_detail(&tool)) {
            (Ok(sel), Ok(detail)) => {
                let ranked: Vec<String> = sel
                    .selection
                    .candidates
                    .iter()
                    .map(|c| format!("{} ({:.3})", c.name, c.score))
                    .collect();
                rec.emit(
                    6,
                    sid,
                    format!("matched [{}]; queried parameters of {tool}", ranked.join(", ")),
                );
                let section = sel
                    .context
                    .sections
                    .iter()
                    .find(|s| s.tool == tool && s.examples.len() >= detail.examples.len())
                    .cloned()
                    .unwrap_or_else(|| ContextSection::from_detail(&detail));
                rec.emit(
                    7,
                    sid,
                    format!(
                        "returned instructions and {} example(s) for {tool} ({} tokens)",
                        section.examples.len(),
                        section.token_estimate
                    ),
                );
                section
            }
            (Err(e), _) | (_, Err(e)) => {
                rec.emit(6, sid, format!("selection failed: {e}"));
                rec.emit(7, sid, "no tool details returned");
                ContextSection {
                    tool: tool.clone(),
                    instruction: String::new(),
                    schema: String::new(),
                    examples: Vec::new(),
                    token_estimate: 0,
                }
            }
        };

        let mut retries = 0;
        loop {
            let attempt = retries + 1;
            let call_id = format!("t{}-{}-a{attempt}", self.turn_id, subtask.id);
            let result = self.attempt(&subtask, &tool, &section, &call_id, client, rec);
            self.results.insert(subtask.id.clone(), result.clone());
            let revision = evaluate_and_revise(
                self.orch.planner.as_ref(),
                self.query,
                plan,
                &subtask.id,
                &result,
                retries,
                !self.replanned,
            );
            match revision.action {
                RevisionAction::Continue => {
                    set_status(plan, &subtask.id, SubtaskStatus::Done);
                    let mut done = subtask.clone();
                    done.status = SubtaskStatus::Done;
                    self.finished.push((done, result));
                    return;
                }
                RevisionAction::RetrySubtask => {
                    set_status(plan, &subtask.id, SubtaskStatus::Running);
                    retries += 1;
                }
                RevisionAction::Replan => {
                    set_status(plan, &subtask.id, SubtaskStatus::Failed);
                    self.replanned = true;
                    let suffix = revision.replacement.expect("replan carries a replacement");
                    let clash = suffix
                        .subtasks
                        .iter()
                        .any(|s| plan.get(&s.id).is_some_and(|old| old.status != SubtaskStatus::Pending));
                    if clash {
                        self.abandon(
                            plan,
                            &subtask.id,
                            format!("{}; replacement reuses finished ids", revision.reason),
                        );
                        return;
                    }
                    plan.subtasks.truncate(index + 1);
                    plan.subtasks.extend(suffix.subtasks);
                    tracing::info!(reason = %revision.reason, "replanned");
                    return;
                }
                RevisionAction::Abort => {
                    set_status(plan, &subtask.id, SubtaskStatus::Failed);
                    self.abandon(plan, &subtask.id, revision.reason);
                    return;
                }
            }
        }
    }

    fn abandon(&mut self, plan: &mut Plan, failed: &str, reason: String) {
        for id in plan.dependents_of(failed) {
            if plan.get(&id).is_some_and(|s| s.status == SubtaskStatus::Pending) {
                set_status(plan, &id, SubtaskStatus::Skipped);
            }
        }
        self.abort_reason.get_or_insert(reason);
    }

    /// Steps 8 to 11 for one attempt.
    fn attempt(
        &mut self,
        subtask: &Subtask,
        tool: &str,
        section: &ContextSection,
        call_id: &str,
        client: &mut ToolClient<Box<dyn ServerConnection>>,
        rec: &mut Recorder<'_>,
    ) -> ToolResult {
        let sid = Some(subtask.id.as_str());
        let req = ArgumentRequest {
            query: self.query,
            subtask,
            tool: section,
            attachments: self.attachments,
            finished: &self.finished,
        };
        let arguments = self
            .orch
            .planner
            .tool_arguments(&req)
            .map_err(|e| e.to_string())
            .and_then(|raw| resolve_references(&raw, self.attachments, &self.results).map_err(|e| e.to_string()));
        let arguments = match arguments {
            Ok(a) => a,
            Err(message) => {
                rec.emit(8, sid, format!("could not form a request for {tool}: {message}"));
                rec.emit(9, sid, "server received no valid request");
                let result = ToolResult::failed(call_id, CallStatus::Error, message);
                rec.emit(11, sid, format!("{call_id}: error"));
                return result;
            }
        };
        let call = ToolCall {
            call_id: call_id.to_string(),
            tool: tool.to_string(),
            arguments,
        };
        rec.emit(
            8,
            sid,
            format!(
                "{call_id}: request {tool} {}",
                serde_json::Value::Object(call.arguments.clone())
            ),
        );
        rec.emit(9, sid, format!("server handling {call_id}"));
        let (result, invoked) = match client.call_tool(self.workspace, &call) {
            Ok(r) => (r, true),
            Err(e) => (ToolResult::failed(call_id, CallStatus::Error, e.to_string()), false),
        };
        if invoked {
            rec.emit(
                10,
                sid,
                format!(
                    "ran {tool} in an isolated process: {:?} in {} ms",
                    result.status, result.duration_ms
                ),
            );
        }
        let detail = match (&result.status, &result.error) {
            (CallStatus::Ok, _) => format!("{} artifact(s)", result.artifacts.len()),
            (_, Some(e)) => e.clone(),
            (_, None) => String::new(),
        };
        rec.emit(11, sid, format!("{call_id}: {} {detail}", status_word(result.status)));
        self.calls.push(CallRecord {
            call,
            result: result.clone(),
        });
        result
    }
}

fn status_word(s: CallStatus) -> &'static str {
    match s {
        CallStatus::Ok => "ok,",
        CallStatus::Error => "error:",
        CallStatus::Timeout => "timeout:",
    }
}

const TRIM_CHARS: &[char] = &['"', '\'', '`', ',', ';', ':', '(', ')', '[', ']', '<', '>', '!', '?'];

/// Finds file paths mentioned in the request. A path inside the workspace
/// is used as is; any other existing file is copied into `inputs/`.
/// Returns workspace-relative paths in order of first mention.
fn collect_attachments(text: &str, workspace: &Path) -> Result<Vec<String>, TurnError> {
    let mut found: Vec<String> = Vec::new();
    for raw in text.split_whitespace() {
        let mut token = raw.trim_matches(TRIM_CHARS);
        while token.ends_with('.') && !Path::new(token).is_file() && !workspace.join(token).is_file() {
            token = &token[..token.len() - 1];
        }
        if token.is_empty() || !token.contains(['/', '.']) {
            continue;
        }
        let rel = if !Path::new(token).is_absolute() && workspace.join(token).is_file() {
            match workspace.join(token).canonicalize() {
                Ok(p) if p.starts_with(workspace) => p
                    .strip_prefix(workspace)
                    .expect("checked")
                    .to_string_lossy()
                    .into_owned(),
                _ => continue,
            }
        } else if Path::new(token).is_file() {
            import_file(Path::new(token), workspace)?
        } else {
            continue;
        };
        if !found.contains(&rel) {
            found.push(rel);
        }
    }
    Ok(found)
}

fn import_file(src: &Path, workspace: &Path) -> Result<String, TurnError> {
    let io = |e: std::io::Error| TurnError::Workspace(format!("{}: {e}", src.display()));
    let inputs = workspace.join("inputs");
    fs::create_dir_all(&inputs).map_err(io)?;
    let bytes = fs::read(src).map_err(io)?;
    let name = src
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    let (stem, ext) = match name.rsplit_once('.') {
        Some((s, e)) if !s.is_empty() => (s.to_string(), format!(".{e}")),
        _ => (name.clone(), String::new()),
    };
    for n in 1.. {
        let candidate = if n == 1 {
            name.clone()
        } else {
            format!("{stem}-{n}{ext}")
        };
        let dest = inputs.join(&candidate);
        match fs::read(&dest) {
            Ok(existing) if existing == bytes => return Ok(format!("inputs/{candidate}")),
            Ok(_) => continue,
            Err(_) => {
                fs::write(&dest, &bytes).map_err(io)?;
                return Ok(format!("inputs/{candidate}"));
            }
        }
    }
    unreachable!("the candidate loop only ends by returning")
}
