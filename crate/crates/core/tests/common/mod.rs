//! Shared helpers for integration tests: fixture locations and independent
//! reference implementations used as oracles.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use audiofab::registry::{load_registry, Registry, ToolManifest};

pub mod wiregen;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

pub fn fixture_registry() -> Registry {
    load_registry(&repo_root().join("registry")).unwrap()
}

/// Built-in tools shipped next to the technique registry (text editing, gain).
pub fn builtin_tools() -> Registry {
    load_registry(&repo_root().join("builtin_tools")).unwrap()
}

/// Diagnostic stubs used by the isolation tests.
pub fn diagnostic_tools() -> Registry {
    load_registry(&repo_root().join("fixtures/extra_tools")).unwrap()
}

/// Everything the end-to-end scenarios need.
pub fn scenario_registry() -> Registry {
    fixture_registry()
        .merged(&builtin_tools())
        .unwrap()
        .merged(&diagnostic_tools())
        .unwrap()
}

pub fn rules_file() -> PathBuf {
    repo_root().join("rules/scenarios.json")
}

/// Directory holding the `audiofab-tool` executable built for this test run.
pub fn tool_dir() -> PathBuf {
    Path::new(env!("CARGO_BIN_EXE_audiofab-tool"))
        .parent()
        .unwrap()
        .to_path_buf()
}

/// Brute-force Okapi BM25 (k1 = 1.2, b = 0.75, idf = ln(1 + (N - n + 0.5)/(n + 0.5))).
///
/// Written without sharing any code with the library: its own tokenizer, no
/// precomputed index, every statistic recounted by scanning.
pub mod bm25_oracle {
    use super::*;

    pub fn terms(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                for low in ch.to_lowercase() {
                    cur.push(low);
                }
            } else if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    fn document(t: &ToolManifest) -> Vec<String> {
        let mut text = vec![t.name.clone(), t.instruction.clone(), t.description.clone()];
        text.extend(t.examples.iter().map(|e| e.query.clone()));
        terms(&text.join(" "))
    }

    pub fn rank(reg: &Registry, query: &str, k: usize) -> Vec<(String, f64)> {
        let docs: Vec<(String, Vec<String>)> = reg.tools().iter().map(|t| (t.name.clone(), document(t))).collect();
        let n = docs.len() as f64;
        let avgdl = docs.iter().map(|(_, d)| d.len() as f64).sum::<f64>() / n;
        let mut q: Vec<String> = Vec::new();
        for t in terms(query) {
            if !q.contains(&t) {
                q.push(t);
            }
        }
        let mut scored: Vec<(String, f64)> = docs
            .iter()
            .map(|(name, d)| {
                let mut s = 0.0;
                for term in &q {
                    let tf = d.iter().filter(|x| *x == term).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let df = docs.iter().filter(|(_, o)| o.contains(term)).count() as f64;
                    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                    s += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * d.len() as f64 / avgdl));
                }
                (name.clone(), s)
            })
            .filter(|(_, s)| *s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

pub mod harness {
    use std::path::{Path, PathBuf};
    use std::sync::Arc;

    use audiofab::executor::server::ToolServer;
    use audiofab::executor::Executor;
    use audiofab::orchestrator::{Orchestrator, Settings};
    use audiofab::planner::{RuleSet, ScriptedPlanner};
    use audiofab::registry::Registry;

    use super::*;

    pub fn orchestrator_with(registry: Registry, rules: RuleSet, workspace_root: &Path) -> Orchestrator {
        let registry = Arc::new(registry);
        let executor = Arc::new(Executor::new(Arc::clone(&registry), tool_dir(), 4));
        let server = Arc::new(ToolServer::new(executor));
        Orchestrator::new(
            registry,
            Arc::new(ScriptedPlanner::new(rules)),
            server,
            Settings {
                k: 5,
                budget_tokens: 4096,
                workspace_root: workspace_root.to_path_buf(),
            },
        )
    }

    pub fn scenario_orchestrator(workspace_root: &Path) -> Orchestrator {
        orchestrator_with(
            scenario_registry(),
            RuleSet::load(&rules_file()).unwrap(),
            workspace_root,
        )
    }

    /// Writes a one-second 440 Hz mono pcm16 WAV with hound.
    pub fn write_tone(path: &Path) -> PathBuf {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for i in 0..16_000 {
            let t = i as f64 / 16_000.0;
            w.write_sample((0.3 * (2.0 * std::f64::consts::PI * 440.0 * t).sin() * 32767.0) as i16)
                .unwrap();
        }
        w.finalize().unwrap();
        path.to_path_buf()
    }

    pub struct Scenario {
        pub name: &'static str,
        pub query: String,
        pub expected: Vec<&'static str>,
    }

    /// The three demonstration requests, with input files created under `dir`.
    pub fn scenarios(dir: &Path) -> Vec<Scenario> {
        let song = write_tone(&dir.join("pop_song.wav"));
        let speech = write_tone(&dir.join("speech.wav"));
        let voice = write_tone(&dir.join("voice.wav"));
        let portrait = dir.join("portrait.png");
        std::fs::write(&portrait, b"\x89PNG\r\n\x1a\nplaceholder").unwrap();
        vec![
            Scenario {
                name: "music creation",
                query: format!(
                    "Analyze this pop song's style, split vocals, and make a similar new segment: {}",
                    song.display()
                ),
                expected: vec!["music_style_description", "music_separation", "text2music"],
            },
            Scenario {
                name: "speech perception",
                query: format!(
                    "Flip the emotion of this speech but keep the voice: {}",
                    speech.display()
                ),
                expected: vec!["speech_emotion_recognition", "asr", "text_edit", "text2speech"],
            },
            Scenario {
                name: "multimodal",
                query: format!(
                    "Make this portrait {} move with this audio {}",
                    portrait.display(),
                    voice.display()
                ),
                expected: vec!["speech2talking_head", "audio2video"],
            },
        ]
    }

    /// Expected tool order of a rule, read from the rules file itself.
    pub fn rule_sequence(rules: &RuleSet, rule: &str) -> Vec<String> {
        rules
            .rules
            .iter()
            .find(|r| r.name == rule)
            .unwrap()
            .plan
            .subtasks
            .iter()
            .filter_map(|s| s.tool_hint.clone())
            .collect()
    }
}

/// Reference packing of context sections, computed from per-section token
/// counts at 0, 1 and 2 examples.
pub mod context_oracle {
    use audiofab::selection::{query_parameters, ContextSection, SelectionResult};

    use super::*;

    fn section_tokens(reg: &Registry, tool: &str, examples: usize) -> usize {
        let mut detail = query_parameters(reg, tool).unwrap();
        detail.examples.truncate(examples);
        ContextSection::from_detail(&detail).token_estimate
    }

    /// Example count of each section the document should contain.
    pub fn expected_examples(reg: &Registry, sel: &SelectionResult, budget: usize) -> Vec<usize> {
        let names: Vec<&str> = sel.candidates.iter().map(|c| c.name.as_str()).collect();
        let mut used = 0;
        let mut count = 0;
        for name in &names {
            let t = section_tokens(reg, name, 0);
            if used + t > budget {
                break;
            }
            used += t;
            count += 1;
        }
        if count == 0 {
            return if names.is_empty() { vec![] } else { vec![0] };
        }
        let mut shape = vec![0; count];
        for (i, name) in names.iter().take(count).enumerate() {
            let available = reg.get(name).unwrap().examples.len().min(2);
            for n in (1..=available).rev() {
                let delta = section_tokens(reg, name, n) - section_tokens(reg, name, 0);
                if used + delta <= budget {
                    used += delta;
                    shape[i] = n;
                    break;
                }
            }
        }
        shape
    }
}

/// A tool server over the given registry, launching tools from [`tool_dir`].
pub fn tool_server(registry: Registry) -> std::sync::Arc<audiofab::executor::server::ToolServer> {
    use std::sync::Arc;
    let executor = audiofab::executor::Executor::new(Arc::new(registry), tool_dir(), 4);
    Arc::new(audiofab::executor::server::ToolServer::new(Arc::new(executor)))
}

pub fn call(call_id: &str, tool: &str, arguments: serde_json::Value) -> audiofab::executor::ToolCall {
    audiofab::executor::ToolCall {
        call_id: call_id.into(),
        tool: tool.into(),
        arguments: arguments.as_object().cloned().unwrap_or_default(),
    }
}
