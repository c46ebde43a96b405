//! Planner backed by a chat-completions endpoint.

use std::time::Duration;

use serde_json::{json, Map, Value};

use super::{
    ensure_artifacts_mentioned, fill_template, first_json_object, parse_plan, ArgumentRequest, Outcome, Plan, Planner,
    PlannerError, PlanningContext, PriorTurn, Subtask, MAX_RETRIES,
};
use crate::executor::ToolResult;
use crate::selection::InstructionListing;

const PLANNING_PROMPT: &str = include_str!("../../prompts/planning.txt");
const TOOL_CALL_PROMPT: &str = include_str!("../../prompts/tool_call.txt");
const REPLAN_PROMPT: &str = include_str!("../../prompts/replan.txt");
const SYNTHESIS_PROMPT: &str = include_str!("../../prompts/synthesis.txt");

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";
const PAYLOAD_PREVIEW_CHARS: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct LlmConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

pub struct LlmPlanner {
    config: LlmConfig,
    agent: ureq::Agent,
    tools: String,
}

type Messages = Vec<Value>;

fn user(content: &str) -> Value {
    json!({"role": "user", "content": content})
}

fn preview(v: &Value) -> String {
    let s = v.to_string();
    match s.char_indices().nth(PAYLOAD_PREVIEW_CHARS) {
        Some((cut, _)) => format!("{}...", &s[..cut]),
        None => s,
    }
}

fn describe_outcomes(outcomes: &[Outcome]) -> String {
    let mut lines = Vec::new();
    for o in outcomes {
        let s = &o.subtask;
        let mut line = format!(
            "- {} ({}) status={:?}",
            s.id,
            s.tool_hint.as_deref().unwrap_or("no tool"),
            s.status
        );
        if let Some(r) = &o.result {
            if !r.artifacts.is_empty() {
                line.push_str(&format!(" artifacts=[{}]", r.artifacts.join(", ")));
            }
            if let Some(p) = &r.payload {
                line.push_str(&format!(" payload={}", preview(p)));
            }
            if let Some(e) = &r.error {
                line.push_str(&format!(" error={e}"));
            }
        }
        line.push_str(&format!(": {}", s.description));
        lines.push(line);
    }
    lines.join("\n")
}

impl LlmPlanner {
    /// `tools` is the registry listing offered to the model when replanning.
    pub fn new(config: LlmConfig, tools: &InstructionListing) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        LlmPlanner {
            config,
            agent,
            tools: tools.render(),
        }
    }

    fn complete(&self, messages: &Messages) -> Result<String, PlannerError> {
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": 0,
        });
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| PlannerError::Unavailable(e.to_string()))?;
        let reply: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| PlannerError::Unavailable(format!("bad completion body: {e}")))?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| PlannerError::Unavailable("completion has no choices[0].message.content".into()))
    }

    /// Asks until `accept` takes the reply, feeding each rejection back to
    /// the model, at most `1 + MAX_RETRIES` times.
    fn ask<T>(
        &self,
        prompt: String,
        accept: impl Fn(&str) -> Result<T, String>,
        exhausted: impl Fn(String) -> PlannerError,
    ) -> Result<T, PlannerError> {
        let mut messages = vec![user(&prompt)];
        let mut last = String::new();
        for _ in 0..=MAX_RETRIES {
            let text = self.complete(&messages)?;
            match accept(&text) {
                Ok(v) => return Ok(v),
                Err(diag) => {
                    messages.push(json!({"role": "assistant", "content": text}));
                    messages.push(user(&format!(
                        "That reply was rejected: {diag}. Answer again with only the JSON object."
                    )));
                    last = diag;
                }
            }
        }
        Err(exhausted(last))
    }
}

impl Planner for LlmPlanner {
    fn backend(&self) -> &'static str {
        "llm"
    }

    fn plan_task(&self, query: &str, context: &PlanningContext, history: &[PriorTurn]) -> Result<Plan, PlannerError> {
        let history = if history.is_empty() {
            "(none)".to_string()
        } else {
            history
                .iter()
                .map(|t| format!("user: {}\nassistant: {}", t.user, t.response.trim_end()))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let attachments = if context.attachments.is_empty() {
            "(none)".to_string()
        } else {
            context
                .attachments
                .iter()
                .enumerate()
                .map(|(i, a)| format!("${{inputs.{i}}} = {a}"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let prompt = fill_template(
            PLANNING_PROMPT,
            &[
                ("tools", &context.listing.render()),
                ("context", &context.document.render()),
                ("attachments", &attachments),
                ("history", &history),
                ("query", query),
            ],
        );
        self.ask(
            prompt,
            |text| {
                let plan = parse_plan(text).map_err(|e| e.to_string())?;
                for s in &plan.subtasks {
                    if let Some(hint) = &s.tool_hint {
                        if !context.names_tool(hint) {
                            return Err(format!("subtask {} hints unknown tool '{hint}'", s.id));
                        }
                    }
                }
                Ok(plan)
            },
            PlannerError::UnparseablePlan,
        )
    }

    fn tool_arguments(&self, req: &ArgumentRequest<'_>) -> Result<Map<String, Value>, PlannerError> {
        let finished: Vec<Outcome> = req
            .finished
            .iter()
            .map(|(s, r)| Outcome {
                subtask: s.clone(),
                result: Some(r.clone()),
            })
            .collect();
        let prompt = fill_template(
            TOOL_CALL_PROMPT,
            &[
                ("query", req.query),
                ("subtask_id", &req.subtask.id),
                ("description", &req.subtask.description),
                ("tool", &req.tool.render()),
                ("attachments", &req.attachments.join(", ")),
                ("finished", &describe_outcomes(&finished)),
            ],
        );
        self.ask(
            prompt,
            |text| match first_json_object(text) {
                Some(Value::Object(m)) => Ok(m),
                _ => Err("no JSON object in reply".into()),
            },
            |reason| PlannerError::Arguments {
                subtask: req.subtask.id.clone(),
                reason,
            },
        )
    }

    fn replan(&self, query: &str, plan: &Plan, failed: &Subtask, result: &ToolResult) -> Option<Plan> {
        let prompt = fill_template(
            REPLAN_PROMPT,
            &[
                ("query", query),
                ("plan", &serde_json::to_string_pretty(plan).ok()?),
                ("failed", &failed.id),
                ("error", result.error.as_deref().unwrap_or("unknown")),
                ("tools", &self.tools),
            ],
        );
        let text = self.complete(&vec![user(&prompt)]).ok()?;
        parse_plan(&text).ok()
    }

    fn synthesize(&self, query: &str, outcomes: &[Outcome]) -> Result<String, PlannerError> {
        let prompt = fill_template(
            SYNTHESIS_PROMPT,
            &[("query", query), ("outcomes", &describe_outcomes(outcomes))],
        );
        let text = self.complete(&vec![user(&prompt)])?;
        Ok(ensure_artifacts_mentioned(&text, outcomes))
    }
}
