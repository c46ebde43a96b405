//! The `audiofab` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or startup
//! error.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::{http, load_config, repl, App, Config};
use crate::registry::{load_registry, validate_manifest, Registry};
use crate::selection::{enumerate_instructions, match_tools, DEFAULT_K};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "audiofab", version, about = "Tool-learning agent for audio tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Interactive chat in the terminal.
    Chat {
        #[arg(long)]
        config: PathBuf,
    },
    /// HTTP service with live trace events.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured port.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Inspect the tool registry.
    Tools {
        #[command(subcommand)]
        action: ToolsAction,
    },
    /// Check a manifest file and report every violation.
    Validate { manifest: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum ToolsAction {
    /// Rank tools for a query.
    Match {
        query: String,
        #[arg(short, default_value_t = DEFAULT_K)]
        k: usize,
        #[command(flatten)]
        source: RegistrySource,
    },
    /// One line per tool.
    List {
        #[command(flatten)]
        source: RegistrySource,
    },
}

#[derive(Debug, clap::Args)]
pub struct RegistrySource {
    /// Take the registry directories from this config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Registry directory, used when no config is given.
    #[arg(long, default_value = "registry")]
    registry: PathBuf,
}

fn config_or_exit(path: &Path, err: &mut dyn Write) -> Result<Config, i32> {
    load_config(path).map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        EXIT_CONFIG
    })
}

fn app_or_exit(cfg: Config, err: &mut dyn Write) -> Result<App, i32> {
    App::build(cfg).map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        EXIT_CONFIG
    })
}

fn registry_from(source: &RegistrySource, err: &mut dyn Write) -> Result<Registry, i32> {
    let loaded = match &source.config {
        Some(path) => {
            let cfg = config_or_exit(path, err)?;
            super::load_full_registry(&cfg).map_err(|e| e.to_string())
        }
        None => load_registry(&source.registry).map_err(|e| e.to_string()),
    };
    loaded.map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        EXIT_CONFIG
    })
}

/// Runs a parsed command with the given standard streams.
pub fn run(cli: Cli, stdin: &mut dyn io::BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Chat { config } => chat(&config, stdin, out, err),
        Command::Serve { config, port } => serve(&config, port, out, err),
        Command::Tools { action } => tools(action, out, err),
        Command::Validate { manifest } => validate(&manifest, out, err),
    };
    result.unwrap_or_else(|code| code)
}

fn chat(config: &Path, stdin: &mut dyn io::BufRead, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, i32> {
    let app = app_or_exit(config_or_exit(config, err)?, err)?;
    match repl::run_repl(&app.orchestrator, stdin, out) {
        Ok(()) => Ok(EXIT_OK),
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            Err(EXIT_FAILURE)
        }
    }
}

fn serve(config: &Path, port: Option<u16>, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, i32> {
    let mut cfg = config_or_exit(config, err)?;
    if let Some(p) = port {
        cfg.port = p;
    }
    let app = app_or_exit(cfg, err)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        EXIT_FAILURE
    })?;
    let state = http::AppState::new(app.orchestrator, app.config.static_dir.clone());
    let port = app.config.port;
    let result = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        let _ = writeln!(out, "listening on http://{}", listener.local_addr()?);
        let _ = out.flush();
        http::serve_on(listener, state).await
    });
    result.map(|()| EXIT_OK).map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        EXIT_FAILURE
    })
}

fn tools(action: ToolsAction, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, i32> {
    let io_fail = |_| EXIT_FAILURE;
    match action {
        ToolsAction::Match { query, k, source } => {
            let reg = registry_from(&source, err)?;
            let sel = match_tools(&query, &reg, k).map_err(|e| {
                let _ = writeln!(err, "error: {e}");
                EXIT_FAILURE
            })?;
            for (i, c) in sel.candidates.iter().enumerate() {
                writeln!(out, "{}. {} {:.4}", i + 1, c.name, c.score).map_err(io_fail)?;
            }
        }
        ToolsAction::List { source } => {
            let reg = registry_from(&source, err)?;
            for e in enumerate_instructions(&reg).entries {
                writeln!(out, "{}: {}", e.name, e.instruction).map_err(io_fail)?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn validate(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, i32> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        let _ = writeln!(err, "error: cannot read {}: {e}", path.display());
        EXIT_FAILURE
    })?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        let _ = writeln!(err, "error: {}: {e}", path.display());
        EXIT_FAILURE
    })?;
    let docs = match doc {
        serde_json::Value::Array(items) => items,
        single => vec![single],
    };
    let mut bad = 0;
    for (i, d) in docs.iter().enumerate() {
        let name = d.get("name").and_then(|n| n.as_str()).unwrap_or("?");
        let violations = validate_manifest(d);
        if violations.is_empty() {
            let _ = writeln!(out, "ok: {name}");
        } else {
            bad += 1;
            for v in violations {
                let _ = writeln!(out, "invalid [{i}] {name}: {v}");
            }
        }
    }
    Ok(if bad == 0 { EXIT_OK } else { EXIT_FAILURE })
}
