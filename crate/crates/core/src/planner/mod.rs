//! Task planning, the feedback policy and response synthesis.
//!
//! A [`Planner`] turns a request into a [`Plan`], a small dependency DAG of
//! subtasks that may each hint a tool. It also fills in tool arguments, may
//! propose a replacement plan suffix when a subtask keeps failing, and writes
//! the final answer. Two backends exist: [`ScriptedPlanner`] reads a rules
//! file and is fully deterministic, [`LlmPlanner`] talks to a
//! chat-completions endpoint.

mod llm;
mod scripted;

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::executor::ToolResult;
use crate::selection::{ContextDocument, ContextSection, InstructionListing};

pub use llm::{LlmConfig, LlmPlanner, DEFAULT_MODEL, DEFAULT_TIMEOUT};
pub use scripted::{Fallback, MatchRule, Rule, RuleSet, RulesError, ScriptedPlanner};

pub const MAX_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskStatus {
    #[default]
    Pending,
    Running,
    Done,
    Failed,
    Skipped,
}

impl SubtaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Skipped)
    }

    /// Legal moves: pending to running or skipped, running to done or failed,
    /// and running back to running for a retry.
    pub fn can_become(self, next: SubtaskStatus) -> bool {
        use SubtaskStatus::*;
        matches!(
            (self, next),
            (Pending, Running) | (Pending, Skipped) | (Running, Running) | (Running, Done) | (Running, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_hint: Option<String>,
    #[serde(default)]
    pub depends_on: Vec<String>,
    #[serde(default)]
    pub status: SubtaskStatus,
    /// Arguments chosen up front. May hold `${...}` references, see
    /// [`resolve_references`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Map<String, Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_id: String,
    pub subtasks: Vec<Subtask>,
}

impl Plan {
    pub fn get(&self, id: &str) -> Option<&Subtask> {
        self.subtasks.iter().find(|s| s.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Subtask> {
        self.subtasks.iter_mut().find(|s| s.id == id)
    }

    /// Ids of every subtask that depends, directly or not, on `id`.
    pub fn dependents_of(&self, id: &str) -> Vec<String> {
        let mut hit: HashSet<&str> = HashSet::from([id]);
        let mut out = Vec::new();
        for s in &self.subtasks {
            if s.depends_on.iter().any(|d| hit.contains(d.as_str())) {
                hit.insert(&s.id);
                out.push(s.id.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevisionAction {
    Continue,
    RetrySubtask,
    Replan,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub action: RevisionAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<Plan>,
    pub reason: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("planner unavailable: {0}")]
    Unavailable(String),
    #[error("unparseable plan: {0}")]
    UnparseablePlan(String),
    #[error("no planning rule matches the request")]
    NoRule,
    #[error("cannot produce arguments for subtask {subtask}: {reason}")]
    Arguments { subtask: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTurn {
    pub user: String,
    pub response: String,
}

/// What the planner sees when decomposing a request: the cheap listing of
/// every tool plus the detailed, budgeted context for the best matches.
#[derive(Debug, Clone)]
pub struct PlanningContext {
    pub listing: InstructionListing,
    pub document: ContextDocument,
    /// Workspace-relative paths of files attached to the request.
    pub attachments: Vec<String>,
}

impl PlanningContext {
    pub fn names_tool(&self, name: &str) -> bool {
        self.document.contains(name) || self.listing.entries.iter().any(|e| e.name == name)
    }
}

/// Inputs for choosing one subtask's tool arguments.
#[derive(Debug, Clone)]
pub struct ArgumentRequest<'a> {
    pub query: &'a str,
    pub subtask: &'a Subtask,
    pub tool: &'a ContextSection,
    pub attachments: &'a [String],
    pub finished: &'a [(Subtask, ToolResult)],
}

/// One entry of the material handed to synthesis.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub subtask: Subtask,
    pub result: Option<ToolResult>,
}

pub trait Planner: Send + Sync {
    fn backend(&self) -> &'static str;

    fn plan_task(&self, query: &str, context: &PlanningContext, history: &[PriorTurn]) -> Result<Plan, PlannerError>;

    fn tool_arguments(&self, req: &ArgumentRequest<'_>) -> Result<Map<String, Value>, PlannerError>;

    /// A replacement for the not-yet-finished part of `plan`, or `None` if
    /// this planner has nothing better to offer.
    fn replan(&self, query: &str, plan: &Plan, failed: &Subtask, result: &ToolResult) -> Option<Plan>;

    fn synthesize(&self, query: &str, outcomes: &[Outcome]) -> Result<String, PlannerError>;
}

/// Extracts the first JSON object from free text (markdown fences and chatter
/// around it are ignored) and validates it as a plan.
pub fn parse_plan(text: &str) -> Result<Plan, PlannerError> {
    let value = first_json_object(text)
        .ok_or_else(|| PlannerError::UnparseablePlan("no JSON object found in planner output".into()))?;
    let plan: Plan =
        serde_json::from_value(value).map_err(|e| PlannerError::UnparseablePlan(format!("plan schema: {e}")))?;
    validate_plan(&plan, &[])?;
    Ok(plan)
}

pub(crate) fn first_json_object(text: &str) -> Option<Value> {
    text.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v @ Value::Object(_))) => Some(v),
            _ => None,
        }
    })
}

/// Checks plan invariants. `known` lists ids outside the plan that
/// dependencies may also point at (finished subtasks, for a replan suffix).
pub fn validate_plan(plan: &Plan, known: &[&str]) -> Result<(), PlannerError> {
    let fail = |msg: String| Err(PlannerError::UnparseablePlan(msg));
    if plan.plan_id.trim().is_empty() {
        return fail("plan_id is empty".into());
    }
    if plan.subtasks.is_empty() {
        return fail("plan has no subtasks".into());
    }
    let mut seen: HashSet<&str> = known.iter().copied().collect();
    for (i, s) in plan.subtasks.iter().enumerate() {
        if s.id.trim().is_empty() {
            return fail(format!("subtask[{i}]: empty id"));
        }
        if s.status != SubtaskStatus::Pending {
            return fail(format!("subtask {}: new subtasks must be pending", s.id));
        }
        for d in &s.depends_on {
            if d == &s.id {
                return fail(format!("subtask {}: depends on itself", s.id));
            }
            if !seen.contains(d.as_str()) {
                return fail(format!("subtask {}: dangling dependency '{d}'", s.id));
            }
        }
        if !seen.insert(&s.id) {
            return fail(format!("subtask {}: duplicate id", s.id));
        }
    }
    Ok(())
}

/// The feedback policy applied after each subtask finishes.
///
/// Success continues. A failure is retried until `retries_so_far` reaches
/// [`MAX_RETRIES`]; after that the planner may offer a replacement suffix
/// (only when `may_replan`), and otherwise the subtask is abandoned.
pub fn evaluate_and_revise(
    planner: &dyn Planner,
    query: &str,
    plan: &Plan,
    finished: &str,
    result: &ToolResult,
    retries_so_far: u32,
    may_replan: bool,
) -> Revision {
    let Some(subtask) = plan.get(finished) else {
        return Revision {
            action: RevisionAction::Abort,
            replacement: None,
            reason: format!("unknown subtask '{finished}'"),
        };
    };
    if result.is_ok() {
        return Revision {
            action: RevisionAction::Continue,
            replacement: None,
            reason: format!("{finished} succeeded"),
        };
    }
    let why = result.error.clone().unwrap_or_else(|| format!("{:?}", result.status));
    if retries_so_far < MAX_RETRIES {
        return Revision {
            action: RevisionAction::RetrySubtask,
            replacement: None,
            reason: format!(
                "{finished} failed ({why}); retry {} of {MAX_RETRIES}",
                retries_so_far + 1
            ),
        };
    }
    if may_replan {
        if let Some(suffix) = planner.replan(query, plan, subtask, result) {
            let finished_ids: Vec<&str> = plan
                .subtasks
                .iter()
                .filter(|s| s.status == SubtaskStatus::Done)
                .map(|s| s.id.as_str())
                .collect();
            match validate_plan(&suffix, &finished_ids) {
                Ok(()) => {
                    return Revision {
                        action: RevisionAction::Replan,
                        replacement: Some(suffix),
                        reason: format!("{finished} failed after retries ({why}); replanning"),
                    }
                }
                Err(e) => tracing::warn!(error = %e, "discarding invalid replan"),
            }
        }
    }
    Revision {
        action: RevisionAction::Abort,
        replacement: None,
        reason: format!("{finished} failed after {MAX_RETRIES} retries: {why}"),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("bad reference '{reference}': {reason}")]
pub struct ReferenceError {
    pub reference: String,
    pub reason: String,
}

fn lookup(reference: &str, inputs: &[String], results: &HashMap<String, ToolResult>) -> Result<Value, ReferenceError> {
    let err = |reason: &str| ReferenceError {
        reference: reference.to_string(),
        reason: reason.to_string(),
    };
    let mut parts = reference.split('.');
    let head = parts.next().unwrap_or_default();
    if head == "inputs" {
        let idx: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| err("expected inputs.<n>"))?;
        return inputs
            .get(idx)
            .map(|s| Value::String(s.clone()))
            .ok_or_else(|| err("no such input"));
    }
    let result = results
        .get(head)
        .ok_or_else(|| err("no finished subtask with that id"))?;
    match parts.next() {
        Some("artifacts") => {
            let idx: usize = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| err("expected artifacts.<n>"))?;
            result
                .artifacts
                .get(idx)
                .map(|s| Value::String(s.clone()))
                .ok_or_else(|| err("no such artifact"))
        }
        Some("payload") => {
            let mut cur = result.payload.as_ref().ok_or_else(|| err("subtask has no payload"))?;
            for key in parts {
                cur = match cur {
                    Value::Object(m) => m.get(key),
                    Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get(i)),
                    _ => None,
                }
                .ok_or_else(|| err("payload has no such field"))?;
            }
            Ok(cur.clone())
        }
        _ => Err(err("expected <id>.artifacts.<n> or <id>.payload.<field>")),
    }
}

fn resolve_string(s: &str, inputs: &[String], results: &HashMap<String, ToolResult>) -> Result<Value, ReferenceError> {
    if let Some(inner) = s.strip_prefix("${").and_then(|r| r.strip_suffix('}')) {
        if !inner.contains('}') {
            return lookup(inner, inputs, results);
        }
    }
    let mut out = String::new();
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let Some(len) = rest[start..].find('}') else {
            out.push_str(&rest[start..]);
            return Ok(Value::String(out));
        };
        let value = lookup(&rest[start + 2..start + len], inputs, results)?;
        match value {
            Value::String(v) => out.push_str(&v),
            other => {
                let _ = write!(out, "{other}");
            }
        }
        rest = &rest[start + len + 1..];
    }
    out.push_str(rest);
    Ok(Value::String(out))
}

/// Substitutes `${inputs.N}`, `${<id>.artifacts.N}` and
/// `${<id>.payload.<field>...}` in argument values. A value that is exactly
/// one reference takes the referenced JSON value; references embedded in
/// longer strings are spliced in as text.
pub fn resolve_references(
    args: &Map<String, Value>,
    inputs: &[String],
    results: &HashMap<String, ToolResult>,
) -> Result<Map<String, Value>, ReferenceError> {
    fn walk(v: &Value, inputs: &[String], results: &HashMap<String, ToolResult>) -> Result<Value, ReferenceError> {
        Ok(match v {
            Value::String(s) => resolve_string(s, inputs, results)?,
            Value::Array(items) => Value::Array(
                items
                    .iter()
                    .map(|i| walk(i, inputs, results))
                    .collect::<Result<_, _>>()?,
            ),
            Value::Object(m) => Value::Object(
                m.iter()
                    .map(|(k, v)| Ok((k.clone(), walk(v, inputs, results)?)))
                    .collect::<Result<_, ReferenceError>>()?,
            ),
            other => other.clone(),
        })
    }
    args.iter()
        .map(|(k, v)| Ok((k.clone(), walk(v, inputs, results)?)))
        .collect()
}

/// Deterministic response: what was asked, what each subtask produced or why
/// it did not.
pub fn template_response(query: &str, outcomes: &[Outcome], preface: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(p) = preface {
        out.push_str(p.trim_end());
        out.push('\n');
    }
    let done = outcomes
        .iter()
        .filter(|o| o.subtask.status == SubtaskStatus::Done)
        .count();
    let first_error = outcomes.iter().find_map(|o| {
        (o.subtask.status == SubtaskStatus::Failed).then(|| {
            o.result
                .as_ref()
                .and_then(|r| r.error.clone())
                .unwrap_or_else(|| "unknown error".into())
        })
    });
    match (&first_error, done) {
        (Some(e), 0) => {
            let _ = writeln!(out, "The request could not be completed: {e}");
        }
        (Some(_), _) => {
            let _ = writeln!(
                out,
                "Partially completed: {done} of {} subtasks succeeded.",
                outcomes.len()
            );
        }
        (None, _) => {
            let _ = writeln!(
                out,
                "Completed {done} of {} subtasks for: {}",
                outcomes.len(),
                query.trim()
            );
        }
    }
    for o in outcomes {
        let s = &o.subtask;
        let tool = s.tool_hint.as_deref().map(|t| format!(" [{t}]")).unwrap_or_default();
        let _ = write!(out, "- {}{tool} {}: ", s.id, s.description);
        match s.status {
            SubtaskStatus::Done => match &o.result {
                Some(r) if !r.artifacts.is_empty() => {
                    let _ = write!(out, "done, produced {}", r.artifacts.join(", "));
                    if let Some(text) = r.payload.as_ref().and_then(|p| p.get("text")).and_then(Value::as_str) {
                        let _ = write!(out, "; text: {text}");
                    }
                }
                Some(_) => out.push_str("done"),
                None => out.push_str("answered without tools"),
            },
            SubtaskStatus::Failed => {
                let e = o
                    .result
                    .as_ref()
                    .and_then(|r| r.error.as_deref())
                    .unwrap_or("unknown error");
                let _ = write!(out, "failed: {e}");
            }
            SubtaskStatus::Skipped => out.push_str("skipped because a dependency failed"),
            SubtaskStatus::Pending | SubtaskStatus::Running => out.push_str("not run"),
        }
        out.push('\n');
    }
    out
}

/// Adds a closing line naming any artifact `text` forgot to mention.
pub fn ensure_artifacts_mentioned(text: &str, outcomes: &[Outcome]) -> String {
    let missing: Vec<&str> = outcomes
        .iter()
        .filter(|o| o.subtask.status == SubtaskStatus::Done)
        .filter_map(|o| o.result.as_ref())
        .flat_map(|r| r.artifacts.iter().map(String::as_str))
        .filter(|a| !text.contains(a))
        .collect();
    let failures: Vec<String> = outcomes
        .iter()
        .filter(|o| o.subtask.status == SubtaskStatus::Failed && !text.contains(&o.subtask.id))
        .map(|o| o.subtask.id.clone())
        .collect();
    let mut out = text.trim_end().to_string();
    if !missing.is_empty() {
        let _ = write!(out, "\nArtifacts: {}", missing.join(", "));
    }
    if !failures.is_empty() {
        let _ = write!(out, "\nFailed subtasks: {}", failures.join(", "));
    }
    out.push('\n');
    out
}

/// Fills `{{name}}` slots in a prompt template.
pub fn fill_template(template: &str, slots: &[(&str, &str)]) -> String {
    slots.iter().fold(template.to_string(), |acc, (k, v)| {
        acc.replace(&format!("{{{{{k}}}}}"), v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::CallStatus;
    use serde_json::json;

    fn result(status: CallStatus, artifacts: &[&str], payload: Option<Value>) -> ToolResult {
        ToolResult {
            call_id: "c".into(),
            status,
            payload,
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            stderr_excerpt: String::new(),
            duration_ms: 1,
            error: (status != CallStatus::Ok).then(|| "boom".to_string()),
        }
    }

    #[test]
    fn parses_fenced_plans() {
        let text = "Here you go:\n```json\n{\"plan_id\":\"p1\",\"subtasks\":[{\"id\":\"s1\",\"description\":\"x\",\"depends_on\":[]}]}\n```";
        let plan = parse_plan(text).unwrap();
        assert_eq!(plan.plan_id, "p1");
        assert_eq!(plan.subtasks[0].status, SubtaskStatus::Pending);
    }

    #[test]
    fn rejects_chatter_and_dangling_deps() {
        assert!(matches!(
            parse_plan("sure! here is the plan:"),
            Err(PlannerError::UnparseablePlan(_))
        ));
        let bad = r#"{"plan_id":"p","subtasks":[{"id":"s1","description":"a"},{"id":"s2","description":"b","depends_on":["s9"]}]}"#;
        match parse_plan(bad) {
            Err(PlannerError::UnparseablePlan(msg)) => assert!(msg.contains("dangling dependency 's9'"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let dup = r#"{"plan_id":"p","subtasks":[{"id":"s1","description":"a"},{"id":"s1","description":"b"}]}"#;
        assert!(parse_plan(dup).is_err());
        assert!(parse_plan(r#"{"plan_id":"p","subtasks":[]}"#).is_err());
    }

    #[test]
    fn skips_non_plan_braces() {
        let text = "use {braces} wisely {\"plan_id\":\"p\",\"subtasks\":[{\"id\":\"a\",\"description\":\"d\"}]}";
        assert_eq!(parse_plan(text).unwrap().subtasks.len(), 1);
    }

    #[test]
    fn dependents_are_transitive() {
        let plan = parse_plan(
            r#"{"plan_id":"p","subtasks":[
                {"id":"a","description":""},
                {"id":"b","description":"","depends_on":["a"]},
                {"id":"c","description":""},
                {"id":"d","description":"","depends_on":["b","c"]}]}"#,
        )
        .unwrap();
        assert_eq!(plan.dependents_of("a"), ["b", "d"]);
        assert_eq!(plan.dependents_of("c"), ["d"]);
        assert!(plan.dependents_of("d").is_empty());
    }

    #[test]
    fn references_resolve() {
        let results = HashMap::from([(
            "s1".to_string(),
            result(CallStatus::Ok, &["out/a.wav"], Some(json!({"text": "hi", "n": 3}))),
        )]);
        let inputs = vec!["inputs/song.wav".to_string()];
        let args = json!({
            "a": "${inputs.0}",
            "b": "${s1.artifacts.0}",
            "c": "${s1.payload.n}",
            "d": "say ${s1.payload.text} to ${inputs.0}",
            "e": 5
        });
        let out = resolve_references(args.as_object().unwrap(), &inputs, &results).unwrap();
        assert_eq!(
            Value::Object(out),
            json!({"a": "inputs/song.wav", "b": "out/a.wav", "c": 3, "d": "say hi to inputs/song.wav", "e": 5})
        );
        let bad = json!({"a": "${s2.artifacts.0}"});
        assert!(resolve_references(bad.as_object().unwrap(), &inputs, &results).is_err());
    }

    #[test]
    fn status_automaton() {
        use SubtaskStatus::*;
        assert!(Pending.can_become(Running));
        assert!(Running.can_become(Done));
        assert!(!Done.can_become(Running));
        assert!(!Failed.can_become(Done));
        assert!(!Running.can_become(Skipped));
    }

    #[test]
    fn template_reports_failures() {
        let mut s = Subtask {
            id: "s1".into(),
            description: "separate".into(),
            tool_hint: Some("music_separation".into()),
            depends_on: vec![],
            status: SubtaskStatus::Failed,
            arguments: None,
        };
        let failed = Outcome {
            subtask: s.clone(),
            result: Some(result(CallStatus::Error, &[], None)),
        };
        let text = template_response("q", std::slice::from_ref(&failed), None);
        assert!(text.starts_with("The request could not be completed: boom"), "{text}");
        s.status = SubtaskStatus::Done;
        s.id = "s2".into();
        let done = Outcome {
            subtask: s,
            result: Some(result(CallStatus::Ok, &["out/x.wav"], Some(json!({})))),
        };
        let text = template_response("q", &[done, failed], None);
        assert!(text.contains("out/x.wav") && text.contains("failed: boom"), "{text}");
    }

    #[test]
    fn missing_mentions_are_appended() {
        let done = Outcome {
            subtask: Subtask {
                id: "s1".into(),
                description: "d".into(),
                tool_hint: None,
                depends_on: vec![],
                status: SubtaskStatus::Done,
                arguments: None,
            },
            result: Some(result(CallStatus::Ok, &["out/a.wav", "out/b.wav"], Some(json!({})))),
        };
        let text = ensure_artifacts_mentioned("Here is out/a.wav", &[done]);
        assert_eq!(text, "Here is out/a.wav\nArtifacts: out/b.wav\n");
    }

    #[test]
    fn templates_fill() {
        assert_eq!(
            fill_template("a {{x}} b {{y}} {{x}}", &[("x", "1"), ("y", "{}")]),
            "a 1 b {} 1"
        );
    }
}
