//! Tool processes run in their own environments and cannot take the server
//! down with them.

mod common;

use std::collections::BTreeSet;
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use audiofab::executor::server::{serve_tcp, ClientError, Loopback, TcpConnection, ToolClient};
use audiofab::executor::{CallStatus, WORKDIR_VAR};
use audiofab::wire::INVALID_PARAMS;
use common::{call, diagnostic_tools, scenario_registry, tool_server};
use serde_json::json;

fn loopback() -> ToolClient<Loopback> {
    ToolClient::new(Loopback::new(tool_server(diagnostic_tools())))
}

#[test]
fn conflicting_library_versions_coexist_in_one_workspace() {
    let ws = tempfile::tempdir().unwrap();
    let mut client = loopback();
    for (i, tool) in ["conflict_a", "conflict_b", "conflict_a"].into_iter().enumerate() {
        let r = client
            .call_tool(ws.path(), &call(&format!("c{i}"), tool, json!({})))
            .unwrap();
        assert_eq!(r.status, CallStatus::Ok, "{tool}: {:?}", r.error);
    }
}

#[test]
fn tools_see_only_whitelisted_variables() {
    let ws = tempfile::tempdir().unwrap();
    let r = loopback()
        .call_tool(ws.path(), &call("env", "echo_env", json!({})))
        .unwrap();
    assert_eq!(r.status, CallStatus::Ok);
    let env = r.payload.unwrap();
    let keys: BTreeSet<&str> = env.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["LIBVER", "PATH", WORKDIR_VAR]));
    assert_eq!(env["LIBVER"], "1");
    assert_eq!(env[WORKDIR_VAR], ws.path().canonicalize().unwrap().to_str().unwrap());
    let first = env["PATH"].as_str().unwrap().split(':').next().unwrap();
    assert_eq!(std::path::Path::new(first), common::tool_dir());
}

#[test]
fn hung_tool_times_out_promptly() {
    let ws = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let r = loopback()
        .call_tool(ws.path(), &call("hang", "sleep_forever", json!({})))
        .unwrap();
    assert_eq!(r.status, CallStatus::Timeout);
    assert!(start.elapsed() <= Duration::from_secs(3), "{:?}", start.elapsed());
}

#[test]
fn crashing_tool_is_an_error_and_server_keeps_serving() {
    let ws = tempfile::tempdir().unwrap();
    let mut client = loopback();
    let r = client
        .call_tool(ws.path(), &call("boom", "crash_midway", json!({})))
        .unwrap();
    assert_eq!(r.status, CallStatus::Error);
    assert!(r.error.is_some());
    let after = client
        .call_tool(ws.path(), &call("next", "conflict_a", json!({})))
        .unwrap();
    assert!(after.is_ok());
    assert_eq!(client.list_tools().unwrap().entries.len(), 6);
}

#[test]
fn server_refuses_unknown_tools_and_bad_arguments() {
    let ws = tempfile::tempdir().unwrap();
    let mut client = ToolClient::new(Loopback::new(tool_server(scenario_registry())));
    match client.call_tool(ws.path(), &call("x", "no_such_tool", json!({}))) {
        Err(ClientError::Rpc(e)) => assert_eq!(e.code, INVALID_PARAMS),
        other => panic!("{other:?}"),
    }
    match client.call_tool(ws.path(), &call("x", "text2speech", json!({"voice": 3}))) {
        Err(ClientError::Rpc(e)) => assert_eq!(e.code, INVALID_PARAMS, "{}", e.message),
        other => panic!("{other:?}"),
    }
}

#[test]
fn stub_tools_write_labelled_placeholders() {
    let ws = tempfile::tempdir().unwrap();
    let mut client = ToolClient::new(Loopback::new(tool_server(scenario_registry())));
    let input = ws.path().join("in.wav");
    common::harness::write_tone(&input);
    let r = client
        .call_tool(
            ws.path(),
            &call("sep", "music_separation", json!({"audio_path": "in.wav"})),
        )
        .unwrap();
    assert!(r.is_ok(), "{:?}", r.error);
    assert_eq!(r.artifacts, ["out/music_separation.wav"]);
    assert!(ws.path().join("out/music_separation.wav").is_file());
    let payload = r.payload.unwrap();
    assert_eq!(payload["tool"], "music_separation");
    assert_eq!(payload["placeholder"], true);
    assert_eq!(payload["arguments"]["audio_path"], "in.wav");
}

#[test]
fn tcp_clients_are_served_concurrently() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tool_server(diagnostic_tools());
    thread::spawn(move || serve_tcp(server, listener));
    let ws = Arc::new(tempfile::tempdir().unwrap());

    let start = Instant::now();
    let workers: Vec<_> = (0..3)
        .map(|i| {
            let ws = Arc::clone(&ws);
            thread::spawn(move || {
                let mut client = ToolClient::new(TcpConnection::connect(addr).unwrap());
                client.initialize().unwrap();
                let tool = if i == 0 { "sleep_forever" } else { "conflict_b" };
                let r = client
                    .call_tool(ws.path(), &call(&format!("t{i}"), tool, json!({})))
                    .unwrap();
                client.shutdown().unwrap();
                r.status
            })
        })
        .collect();
    let statuses: Vec<CallStatus> = workers.into_iter().map(|w| w.join().unwrap()).collect();
    assert_eq!(statuses, [CallStatus::Timeout, CallStatus::Ok, CallStatus::Ok]);
    assert!(start.elapsed() < Duration::from_secs(3));

    let mut client = ToolClient::new(TcpConnection::connect(addr).unwrap());
    let detail = client.tool_detail("echo_env").unwrap();
    assert_eq!(detail.name, "echo_env");
    let sel = client.select("show the tool environment", 2, 1024).unwrap();
    assert_eq!(sel.selection.top().unwrap().name, "echo_env");
    assert!(sel.context.contains("echo_env"));
}
