//! Tool-learning agent for audio work.
//!
//! A user request flows through task planning, tool selection, isolated tool
//! invocation and response generation. The pieces:
//!
//! - [`wire`]: newline-delimited JSON message framing used on every boundary
//! - [`registry`]: the JSON tool library
//! - [`selection`]: BM25 tool retrieval and budgeted few-shot context
//! - [`planner`]: plan decomposition, feedback policy and response synthesis
//! - [`executor`]: per-tool isolated subprocess execution and the tool server
//! - [`orchestrator`]: drives one conversational turn and records its trace
//! - [`audiotools`]: WAV codec, DSP built-ins and the stub tool process
//! - [`gateway`]: configuration, REPL and HTTP service

pub mod audiotools;
pub mod executor;
pub mod gateway;
pub mod orchestrator;
pub mod planner;
pub mod registry;
pub mod selection;
pub mod wire;
