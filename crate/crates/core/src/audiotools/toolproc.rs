//! The `audiofab-tool` process.
//!
//! Speaks the tool-process contract: read one `tools/call` request frame
//! (from stdin, or from the file given with `--request`), write one response
//! frame to stdout. The first argument picks the behaviour: one of the
//! built-in DSP operations, or `stub`, which stands in for a model-backed
//! technique by echoing its inputs and writing a labelled placeholder
//! artifact to `out/<tool>.<ext>`, the extension following the output kind.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, ValueEnum};
use serde_json::{json, Map, Value};

use super::{apply_gain, detect_voice_activity, mix, parse_wav, trim, write_wav, AudioBuffer, SampleFormat, VadConfig};
use crate::wire::{self, Method, RpcError, RpcMessage, INVALID_PARAMS, METHOD_NOT_FOUND, TOOL_FAILURE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Stub,
    Gain,
    Trim,
    Mix,
    Vad,
    Convert,
    #[value(name = "text_edit")]
    TextEdit,
}

#[derive(Debug, Parser)]
#[command(name = "audiofab-tool", about = "Built-in and placeholder audio tools")]
pub struct ToolArgs {
    #[arg(value_enum)]
    pub mode: Mode,
    /// Output kind written by stub tools.
    #[arg(long, default_value = "json")]
    pub kind: String,
    /// Read the request frame from this file instead of stdin.
    #[arg(long)]
    pub request: Option<PathBuf>,
    /// Stub only: wait this long before answering.
    #[arg(long)]
    pub delay_ms: Option<u64>,
}

struct Call {
    call_id: String,
    tool: String,
    arguments: Map<String, Value>,
}

struct Output {
    payload: Value,
    artifacts: Vec<String>,
}

type ToolOutcome = Result<Output, RpcError>;

fn invalid(msg: impl Into<String>) -> RpcError {
    RpcError::new(INVALID_PARAMS, msg)
}

fn failure(msg: impl Into<String>) -> RpcError {
    RpcError::new(TOOL_FAILURE, msg)
}

pub fn main_with_args(args: ToolArgs) -> i32 {
    let request = match read_request(&args) {
        Ok(msg) => msg,
        Err(err) => {
            let _ = respond(1, Err(err));
            return 1;
        }
    };
    let id = request.id.unwrap_or(1);
    if request.method != Some(Method::ToolsCall) {
        let _ = respond(
            id,
            Err(RpcError::new(METHOD_NOT_FOUND, "tool processes only serve tools/call")),
        );
        return 1;
    }
    let call = match parse_call(request.params.unwrap_or_default()) {
        Ok(c) => c,
        Err(e) => {
            let _ = respond(id, Err(e));
            return 1;
        }
    };
    let outcome = match args.mode {
        Mode::Stub => run_stub(&call, &args),
        Mode::Gain => run_gain(&call),
        Mode::Trim => run_trim(&call),
        Mode::Mix => run_mix(&call),
        Mode::Vad => run_vad(&call),
        Mode::Convert => run_convert(&call),
        Mode::TextEdit => run_text_edit(&call),
    };
    let ok = outcome.is_ok();
    match respond(id, outcome) {
        Ok(()) if ok => 0,
        _ => 1,
    }
}

fn read_request(args: &ToolArgs) -> Result<RpcMessage, RpcError> {
    let msg = match &args.request {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| failure(format!("cannot read request file: {e}")))?;
            wire::decode_frame(&bytes).map_err(|e| e.to_rpc_error())?
        }
        None => {
            let mut stdin = BufReader::new(io::stdin());
            match wire::read_frame(&mut stdin) {
                Ok(Some(msg)) => msg,
                Ok(None) => return Err(failure("no request on stdin")),
                Err(wire::FrameIoError::Wire(e)) => return Err(e.to_rpc_error()),
                Err(wire::FrameIoError::Io(e)) => return Err(failure(e.to_string())),
            }
        }
    };
    Ok(msg)
}

fn parse_call(params: Map<String, Value>) -> Result<Call, RpcError> {
    let call_id = params
        .get("call_id")
        .and_then(Value::as_str)
        .ok_or_else(|| invalid("missing call_id"))?
        .to_string();
    let tool = params
        .get("tool")
        .and_then(Value::as_str)
        .ok_or_else(|| invalid("missing tool"))?
        .to_string();
    let arguments = match params.get("arguments") {
        Some(Value::Object(m)) => m.clone(),
        None => Map::new(),
        Some(_) => return Err(invalid("arguments must be an object")),
    };
    Ok(Call {
        call_id,
        tool,
        arguments,
    })
}

fn respond(id: u64, outcome: ToolOutcome) -> io::Result<()> {
    let msg = match outcome {
        Ok(out) => RpcMessage::success(id, json!({"payload": out.payload, "artifacts": out.artifacts})),
        Err(err) => RpcMessage::failure(id, err),
    };
    let mut stdout = io::stdout().lock();
    wire::write_frame(&mut stdout, &msg).map_err(|e| io::Error::other(e.to_string()))
}

fn env_map() -> BTreeMap<String, String> {
    std::env::vars().collect()
}

fn write_artifact(rel: &str, bytes: &[u8]) -> Result<String, RpcError> {
    let path = Path::new(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| failure(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| failure(format!("cannot write {rel}: {e}")))?;
    Ok(rel.to_string())
}

fn run_stub(call: &Call, args: &ToolArgs) -> ToolOutcome {
    if let Some(ms) = args.delay_ms {
        std::thread::sleep(Duration::from_millis(ms));
    }
    match call.tool.as_str() {
        "echo_env" => {
            return Ok(Output {
                payload: json!(env_map()),
                artifacts: vec![],
            })
        }
        "sleep_forever" => loop {
            std::thread::sleep(Duration::from_secs(3600));
        },
        "crash_midway" => {
            let mut out = io::stdout().lock();
            let _ = out.write_all(b"{\"kind\":\"response\",\"id\":1,\"res");
            let _ = out.flush();
            std::process::abort();
        }
        "conflict_a" | "conflict_b" => {
            let want = if call.tool == "conflict_a" { "1" } else { "2" };
            let have = std::env::var("LIBVER").unwrap_or_default();
            if have != want {
                return Err(failure(format!("LIBVER mismatch: expected {want}, found '{have}'")));
            }
            return Ok(Output {
                payload: json!({"tool": call.tool, "LIBVER": have}),
                artifacts: vec![],
            });
        }
        _ => {}
    }

    let kind = args.kind.as_str();
    let ext = match kind {
        "audio_path" => "wav",
        "image_path" => "png",
        "video_path" => "mp4",
        "text" => "txt",
        "json" => "json",
        other => other,
    };
    let rel = format!("out/{}.{ext}", call.tool);
    let label = format!("[placeholder output of {}]", call.tool);
    let bytes = match kind {
        "audio_path" => {
            let silence = AudioBuffer::silence(16_000, 1, 1_600).expect("valid silence");
            write_wav(&silence, SampleFormat::Pcm16)
        }
        "json" => serde_json::to_vec_pretty(&json!({"tool": call.tool, "placeholder": true})).expect("serializes"),
        _ => format!("{label}\n").into_bytes(),
    };
    let artifact = write_artifact(&rel, &bytes)?;
    let mut payload = json!({
        "tool": call.tool,
        "arguments": call.arguments,
        "env": env_map(),
        "placeholder": true,
    });
    if kind == "text" {
        payload["text"] = json!(label);
    }
    Ok(Output {
        payload,
        artifacts: vec![artifact],
    })
}

fn str_arg<'a>(call: &'a Call, name: &str) -> Result<&'a str, RpcError> {
    call.arguments
        .get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| invalid(format!("missing string argument '{name}'")))
}

fn num_arg(call: &Call, name: &str) -> Result<f64, RpcError> {
    call.arguments
        .get(name)
        .and_then(Value::as_f64)
        .ok_or_else(|| invalid(format!("missing number argument '{name}'")))
}

fn load_audio(path: &str) -> Result<AudioBuffer, RpcError> {
    let bytes = fs::read(path).map_err(|e| failure(format!("cannot read {path}: {e}")))?;
    parse_wav(&bytes).map_err(|e| failure(format!("{path}: {e}")))
}

fn audio_output(call: &Call, buf: &AudioBuffer, format: SampleFormat) -> ToolOutcome {
    let rel = format!("out/{}.wav", call.tool);
    let artifact = write_artifact(&rel, &write_wav(buf, format))?;
    Ok(Output {
        payload: json!({
            "call_id": call.call_id,
            "sample_rate_hz": buf.sample_rate_hz(),
            "channels": buf.channel_count(),
            "frames": buf.length_frames(),
        }),
        artifacts: vec![artifact],
    })
}

fn run_gain(call: &Call) -> ToolOutcome {
    let input = load_audio(str_arg(call, "audio_path")?)?;
    let out = apply_gain(&input, num_arg(call, "gain_db")?).map_err(|e| invalid(e.to_string()))?;
    audio_output(call, &out, SampleFormat::Pcm16)
}

fn run_trim(call: &Call) -> ToolOutcome {
    let input = load_audio(str_arg(call, "audio_path")?)?;
    let out = trim(&input, num_arg(call, "start_s")?, num_arg(call, "end_s")?).map_err(|e| invalid(e.to_string()))?;
    audio_output(call, &out, SampleFormat::Pcm16)
}

fn run_mix(call: &Call) -> ToolOutcome {
    let a = load_audio(str_arg(call, "audio_path")?)?;
    let b = load_audio(str_arg(call, "second_audio_path")?)?;
    let out = mix(&a, &b).map_err(|e| invalid(e.to_string()))?;
    audio_output(call, &out, SampleFormat::Pcm16)
}

fn run_convert(call: &Call) -> ToolOutcome {
    let input = load_audio(str_arg(call, "audio_path")?)?;
    let format = match str_arg(call, "format")? {
        "pcm16" => SampleFormat::Pcm16,
        "float32" => SampleFormat::Float32,
        other => return Err(invalid(format!("unknown format '{other}'"))),
    };
    audio_output(call, &input, format)
}

fn run_vad(call: &Call) -> ToolOutcome {
    let input = load_audio(str_arg(call, "audio_path")?)?;
    let mut cfg = VadConfig::default();
    if let Some(t) = call.arguments.get("threshold_dbfs").and_then(Value::as_f64) {
        cfg.threshold_dbfs = t;
    }
    let segments = detect_voice_activity(&input, &cfg);
    let payload = json!({"segments": segments, "duration_s": input.duration_s()});
    let rel = format!("out/{}.json", call.tool);
    let artifact = write_artifact(&rel, &serde_json::to_vec_pretty(&payload).expect("serializes"))?;
    Ok(Output {
        payload,
        artifacts: vec![artifact],
    })
}

const OPPOSITES: &[(&str, &str)] = &[
    ("happy", "sad"),
    ("happiness", "sadness"),
    ("love", "hate"),
    ("loved", "hated"),
    ("joy", "sorrow"),
    ("calm", "angry"),
    ("glad", "upset"),
    ("excited", "bored"),
    ("good", "bad"),
    ("great", "awful"),
    ("wonderful", "terrible"),
    ("hopeful", "hopeless"),
    ("cheerful", "gloomy"),
    ("proud", "ashamed"),
];

fn opposite(word: &str) -> Option<&'static str> {
    let lower = word.to_lowercase();
    OPPOSITES.iter().find_map(|&(a, b)| {
        if lower == a {
            Some(b)
        } else if lower == b {
            Some(a)
        } else {
            None
        }
    })
}

fn match_case(template: &str, word: &str) -> String {
    if template.len() > 1 && template.chars().all(|c| !c.is_lowercase()) {
        return word.to_uppercase();
    }
    let mut chars = word.chars();
    match (template.chars().next(), chars.next()) {
        (Some(t), Some(first)) if t.is_uppercase() => first.to_uppercase().chain(chars).collect(),
        _ => word.to_string(),
    }
}

/// Swaps emotional words for their opposites, keeping case and punctuation.
pub fn flip_emotions(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !word.is_empty() {
            match opposite(word) {
                Some(opp) => out.push_str(&match_case(word, opp)),
                None => out.push_str(word),
            }
            word.clear();
        }
    };
    for ch in text.chars() {
        if ch.is_alphabetic() {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

fn run_text_edit(call: &Call) -> ToolOutcome {
    let text = match (call.arguments.get("text"), call.arguments.get("text_path")) {
        (Some(Value::String(t)), _) => t.clone(),
        (_, Some(Value::String(p))) => fs::read_to_string(p).map_err(|e| failure(format!("cannot read {p}: {e}")))?,
        _ => return Err(invalid("need 'text' or 'text_path'")),
    };
    let edited = flip_emotions(&text);
    let rel = format!("out/{}.txt", call.tool);
    let artifact = write_artifact(&rel, edited.as_bytes())?;
    Ok(Output {
        payload: json!({"text": edited}),
        artifacts: vec![artifact],
    })
}
