//! End-to-end turns with the scripted planner and stub/built-in tools.

mod common;

use std::fs;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use audiofab::orchestrator::{validate_trace, NoSink, Stage, TraceEvent, TurnError};
use audiofab::planner::{RuleSet, SubtaskStatus};
use common::harness::{orchestrator_with, rule_sequence, scenario_orchestrator, scenarios};
use common::{rules_file, scenario_registry};

#[test]
fn scenarios_follow_their_rules() {
    let inputs = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let orch = scenario_orchestrator(root.path());
    let rules = RuleSet::load(&rules_file()).unwrap();
    let names = ["music_creation", "speech_emotion_flip", "talking_portrait"];
    for (sc, rule) in scenarios(inputs.path()).iter().zip(names) {
        let mut session = orch.new_session().unwrap();
        let started = Instant::now();
        let turn = orch.handle_turn(&mut session, &sc.query, &NoSink).unwrap();
        assert!(started.elapsed() < Duration::from_secs(5), "{} too slow", sc.name);
        assert_eq!(turn.tool_sequence(), sc.expected, "{}", sc.name);
        assert_eq!(turn.tool_sequence(), rule_sequence(&rules, rule), "{}", sc.name);
        assert_eq!(validate_trace(&turn.trace), Vec::<String>::new(), "{}", sc.name);
        assert!(turn.plan.subtasks.iter().all(|s| s.status == SubtaskStatus::Done));
        for record in &turn.calls {
            assert!(record.result.is_ok(), "{}: {:?}", sc.name, record.result);
            for a in &record.result.artifacts {
                assert!(session.workspace.join(a).is_file(), "{a}");
                assert!(turn.response.contains(a.as_str()), "response misses {a}");
            }
        }
    }
}

#[test]
fn arguments_flow_between_subtasks() {
    let inputs = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let orch = scenario_orchestrator(root.path());
    let sc = &scenarios(inputs.path())[0];
    let mut session = orch.new_session().unwrap();
    let turn = orch.handle_turn(&mut session, &sc.query, &NoSink).unwrap();
    let gen = &turn.calls[2].call;
    assert_eq!(gen.arguments["reference_audio"], "out/music_separation.wav");
    assert_eq!(
        gen.arguments["prompt"],
        "A new segment in this style: [placeholder output of music_style_description]"
    );
    assert_eq!(turn.calls[0].call.arguments["audio_path"], "inputs/pop_song.wav");
    assert_eq!(turn.calls[0].call.call_id, "t1-s1-a1");
    assert!(session.workspace.join("inputs/pop_song.wav").is_file());
}

#[test]
fn unmatched_request_skips_tool_steps() {
    let root = tempfile::tempdir().unwrap();
    let orch = scenario_orchestrator(root.path());
    let mut session = orch.new_session().unwrap();
    let turn = orch
        .handle_turn(&mut session, "what is the capital of france", &NoSink)
        .unwrap();
    let steps: Vec<u8> = turn.trace.iter().map(|e| e.step).collect();
    assert_eq!(steps, [1, 2, 3, 12, 13]);
    assert!(turn.calls.is_empty());
    assert!(turn.response.starts_with("No tool in the library fits"));
    assert!(validate_trace(&turn.trace).is_empty());
}

#[test]
fn trace_events_stream_in_order() {
    let inputs = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let orch = scenario_orchestrator(root.path());
    let sc = &scenarios(inputs.path())[1];
    let seen: Mutex<Vec<TraceEvent>> = Mutex::new(Vec::new());
    let sink = |e: &TraceEvent| seen.lock().unwrap().push(e.clone());
    let mut session = orch.new_session().unwrap();
    let turn = orch.handle_turn(&mut session, &sc.query, &sink).unwrap();
    assert_eq!(*seen.lock().unwrap(), turn.trace);
    for stage in Stage::ALL {
        assert!(turn.trace.iter().any(|e| e.stage == stage), "{stage} missing");
    }
    assert_eq!(turn.trace.iter().filter(|e| e.step == 10).count(), 4);
}

#[test]
fn sessions_keep_separate_workspaces() {
    let inputs = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let orch = scenario_orchestrator(root.path());
    let sc = &scenarios(inputs.path())[0];
    let mut a = orch.new_session().unwrap();
    let mut b = orch.new_session().unwrap();
    assert_ne!(a.workspace, b.workspace);
    orch.handle_turn(&mut a, &sc.query, &NoSink).unwrap();
    assert!(fs::read_dir(&b.workspace).unwrap().next().is_none());
    orch.handle_turn(&mut b, "hello", &NoSink).unwrap();
    assert!(!b.workspace.join("out").exists());
    assert_eq!(a.turns.len(), 1);
    assert_eq!(b.turns.len(), 1);
}

const FAILING_RULES: &str = r#"{
  "rules": [
    {"name": "crash", "match": {"tokens": ["crash"]},
     "plan": {"plan_id": "p", "subtasks": [
        {"id": "s1", "description": "crash", "tool_hint": "crash_midway", "arguments": {}},
        {"id": "s2", "description": "after crash", "tool_hint": "echo_env", "depends_on": ["s1"], "arguments": {}},
        {"id": "s3", "description": "independent", "tool_hint": "conflict_a", "arguments": {}}]}},
    {"name": "recover", "match": {"tokens": ["recover"]},
     "plan": {"plan_id": "p", "subtasks": [
        {"id": "s1", "description": "crash", "tool_hint": "crash_midway", "arguments": {}},
        {"id": "s2", "description": "never runs", "tool_hint": "echo_env", "depends_on": ["s1"], "arguments": {}}]},
     "replan": {"s1": {"plan_id": "p2", "subtasks": [
        {"id": "r1", "description": "fallback", "tool_hint": "conflict_b", "arguments": {}}]}}}
  ]
}"#;

#[test]
fn failures_retry_then_abort_with_partial_response() {
    let root = tempfile::tempdir().unwrap();
    let rules = RuleSet::from_json(FAILING_RULES, "test").unwrap();
    let orch = orchestrator_with(scenario_registry(), rules, root.path());
    let mut session = orch.new_session().unwrap();
    let err = orch.handle_turn(&mut session, "please crash", &NoSink).unwrap_err();
    let TurnError::ExecutionAborted { turn, .. } = err else {
        panic!("expected abort, got {err:?}");
    };
    assert_eq!(
        turn.tool_sequence(),
        ["crash_midway", "crash_midway", "crash_midway", "conflict_a"]
    );
    let status: Vec<_> = turn.plan.subtasks.iter().map(|s| s.status).collect();
    assert_eq!(
        status,
        [SubtaskStatus::Failed, SubtaskStatus::Skipped, SubtaskStatus::Done]
    );
    assert!(
        validate_trace(&turn.trace).is_empty(),
        "{:?}",
        validate_trace(&turn.trace)
    );
    assert!(turn.response.contains("s1") && turn.response.contains("failed"));
    assert_eq!(session.turns.len(), 1);
    assert!(turn.aborted);
}

#[test]
fn exhausted_retries_trigger_one_replan() {
    let root = tempfile::tempdir().unwrap();
    let rules = RuleSet::from_json(FAILING_RULES, "test").unwrap();
    let orch = orchestrator_with(scenario_registry(), rules, root.path());
    let mut session = orch.new_session().unwrap();
    let turn = orch.handle_turn(&mut session, "recover please", &NoSink).unwrap();
    assert_eq!(
        turn.tool_sequence(),
        ["crash_midway", "crash_midway", "crash_midway", "conflict_b"]
    );
    let ids: Vec<_> = turn.plan.subtasks.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["s1", "r1"]);
    assert!(validate_trace(&turn.trace).is_empty());
}
