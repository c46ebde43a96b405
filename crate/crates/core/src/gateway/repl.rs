//! Line-oriented chat loop.
//!
//! Anything that is not a meta command is one conversational turn.
//! `:tools` lists every tool, `:trace` prints the last turn's pipeline
//! steps, `:quit` leaves.

use std::io::{self, BufRead, Write};

use crate::orchestrator::{NoSink, Orchestrator, SessionState, TraceEvent, TurnError};
use crate::selection::enumerate_instructions;

const PROMPT: &str = "audiofab> ";

pub fn format_event(e: &TraceEvent) -> String {
    let who = e.subtask.as_deref().map(|s| format!(" {s}")).unwrap_or_default();
    format!("step {:>2} [{}]{who} {}", e.step, e.stage, e.summary)
}

/// Runs until `:quit` or end of input.
pub fn run_repl<R: BufRead, W: Write>(orch: &Orchestrator, input: R, mut out: W) -> io::Result<()> {
    let mut session: SessionState = orch.new_session().map_err(|e| io::Error::other(e.to_string()))?;
    write!(out, "{PROMPT}")?;
    out.flush()?;
    for line in input.lines() {
        let line = line?;
        match line.trim() {
            "" => {}
            ":quit" | ":q" => return Ok(()),
            ":tools" => {
                for entry in enumerate_instructions(orch.registry()).entries {
                    writeln!(out, "{}: {}", entry.name, entry.instruction)?;
                }
            }
            ":trace" => match session.last_turn() {
                Some(turn) => {
                    for e in &turn.trace {
                        writeln!(out, "{}", format_event(e))?;
                    }
                }
                None => writeln!(out, "no turn yet")?,
            },
            text => match orch.handle_turn(&mut session, text, &NoSink) {
                Ok(turn) => write!(out, "{}", turn.response)?,
                Err(TurnError::ExecutionAborted { turn, reason }) => {
                    write!(out, "{}", turn.response)?;
                    writeln!(out, "(aborted: {reason})")?;
                }
                Err(e) => writeln!(out, "error: {e}")?,
            },
        }
        write!(out, "{PROMPT}")?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(())
}
