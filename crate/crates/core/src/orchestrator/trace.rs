//! Pipeline trace events and the checker for their ordering.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const FIRST_STEP: u8 = 1;
pub const LAST_STEP: u8 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TaskPlanning,
    ToolSelection,
    ToolInvocation,
    ResponseGeneration,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::TaskPlanning,
        Stage::ToolSelection,
        Stage::ToolInvocation,
        Stage::ResponseGeneration,
    ];

    pub fn for_step(step: u8) -> Option<Stage> {
        match step {
            1..=3 => Some(Stage::TaskPlanning),
            4..=7 => Some(Stage::ToolSelection),
            8..=11 => Some(Stage::ToolInvocation),
            12..=13 => Some(Stage::ResponseGeneration),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::TaskPlanning => "task_planning",
            Stage::ToolSelection => "tool_selection",
            Stage::ToolInvocation => "tool_invocation",
            Stage::ResponseGeneration => "response_generation",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: u8,
    pub stage: Stage,
    pub summary: String,
    /// Microseconds on a monotonic clock shared by every turn of a process.
    pub at_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtask: Option<String>,
}

/// Steps that may follow `prev` (0 stands for the start of the turn).
///
/// Steps 4 to 11 repeat per tool subtask; 8 to 11 repeat per retry. After
/// step 3 or step 11 the turn may go on to the next subtask or to the answer.
fn successors(prev: u8) -> &'static [u8] {
    match prev {
        0 => &[1],
        1 => &[2],
        2 => &[3],
        3 => &[4, 12],
        4 => &[5],
        5 => &[6],
        6 => &[7],
        7 => &[8],
        8 => &[9],
        9 => &[10, 11],
        10 => &[11],
        11 => &[8, 4, 12],
        12 => &[13],
        _ => &[],
    }
}

/// Checks a completed turn's trace. Returns one message per problem; an
/// empty list means the trace is well formed.
pub fn validate_trace(trace: &[TraceEvent]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut prev = 0u8;
    for (i, ev) in trace.iter().enumerate() {
        match Stage::for_step(ev.step) {
            None => {
                problems.push(format!("event {i}: step {} out of range", ev.step));
                continue;
            }
            Some(stage) if stage != ev.stage => problems.push(format!(
                "event {i}: step {} belongs to {stage}, not {}",
                ev.step, ev.stage
            )),
            Some(_) => {}
        }
        if !successors(prev).contains(&ev.step) {
            problems.push(format!(
                "ordering violation at index {i}: step {} after step {prev}",
                ev.step
            ));
        }
        if i > 0 && ev.at_us < trace[i - 1].at_us {
            problems.push(format!("event {i}: timestamp goes backwards"));
        }
        prev = ev.step;
    }
    for step in [1, 2, 3] {
        if !trace.iter().any(|e| e.step == step) {
            problems.push(format!("missing step {step}"));
        }
    }
    for (i, ev) in trace.iter().enumerate() {
        if ev.step == 8 && !trace[i + 1..].iter().any(|e| e.step == 11) {
            problems.push(format!("step 8 at index {i} is never followed by step 11"));
        }
    }
    if trace.last().map(|e| e.step) != Some(LAST_STEP) {
        problems.push("missing terminal step".to_string());
    }
    problems
}
