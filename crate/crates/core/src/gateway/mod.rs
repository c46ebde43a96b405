//! User-facing entry points: configuration, the terminal REPL, the HTTP
//! service and the command line.

pub mod cli;
pub mod http;
pub mod repl;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::executor::server::ToolServer;
use crate::executor::{Executor, DEFAULT_MAX_CONCURRENT};
use crate::orchestrator::{Orchestrator, Settings};
use crate::planner::{LlmConfig, LlmPlanner, Planner, RuleSet, ScriptedPlanner, DEFAULT_MODEL, DEFAULT_TIMEOUT};
use crate::registry::{load_registry, Registry};
use crate::selection::{enumerate_instructions, DEFAULT_K, MIN_BUDGET_TOKENS};

pub const DEFAULT_BUDGET_TOKENS: usize = 4096;
pub const DEFAULT_PORT: u16 = 8080;
pub const LLM_URL_VAR: &str = "AUDIOFAB_LLM_URL";
pub const LLM_KEY_VAR: &str = "AUDIOFAB_LLM_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Scripted,
    Llm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub backend: Backend,
    pub rules_file: Option<PathBuf>,
    pub llm_url: Option<String>,
    pub model: String,
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub registry_dir: PathBuf,
    pub extra_registry_dirs: Vec<PathBuf>,
    pub planner: PlannerConfig,
    pub budget_tokens: usize,
    pub k: usize,
    pub workspace_root: PathBuf,
    pub port: u16,
    pub max_concurrent_invocations: usize,
    /// Directory searched first for tool commands; defaults to the directory
    /// of the running executable.
    pub tool_path: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlannerFile {
    backend: Backend,
    rules_file: Option<PathBuf>,
    llm_url: Option<String>,
    model: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    registry_dir: PathBuf,
    #[serde(default)]
    extra_registry_dirs: Vec<PathBuf>,
    planner: PlannerFile,
    budget_tokens: Option<i64>,
    k: Option<i64>,
    workspace_root: Option<PathBuf>,
    port: Option<i64>,
    max_concurrent_invocations: Option<i64>,
    tool_path: Option<PathBuf>,
    static_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn ranged<T: TryFrom<i64>>(value: Option<i64>, default: T, field: &str, min: i64, problems: &mut Vec<String>) -> T {
    match value {
        None => default,
        Some(v) if v < min => {
            problems.push(format!("{field}: must be at least {min}, got {v}"));
            default
        }
        Some(v) => T::try_from(v).unwrap_or_else(|_| {
            problems.push(format!("{field}: {v} is out of range"));
            default
        }),
    }
}

/// Parses a config document. Relative paths are taken relative to `base`;
/// `env` supplies environment overrides.
pub fn parse_config(text: &str, base: &Path, env: &dyn Fn(&str) -> Option<String>) -> Result<Config, ConfigError> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
    let mut problems = Vec::new();
    let budget_tokens = ranged(
        file.budget_tokens,
        DEFAULT_BUDGET_TOKENS,
        "budget_tokens",
        MIN_BUDGET_TOKENS as i64,
        &mut problems,
    );
    let k = ranged(file.k, DEFAULT_K, "k", 1, &mut problems);
    let port = ranged(file.port, DEFAULT_PORT, "port", 0, &mut problems);
    let max_concurrent_invocations = ranged(
        file.max_concurrent_invocations,
        DEFAULT_MAX_CONCURRENT,
        "max_concurrent_invocations",
        1,
        &mut problems,
    );

    let llm_url = env(LLM_URL_VAR).filter(|s| !s.is_empty()).or(file.planner.llm_url);
    let planner = PlannerConfig {
        backend: file.planner.backend,
        rules_file: file.planner.rules_file.map(|p| resolve(base, p)),
        llm_url,
        model: file.planner.model.unwrap_or_else(|| DEFAULT_MODEL.to_string()),
        api_key: env(LLM_KEY_VAR).filter(|s| !s.is_empty()),
    };
    match planner.backend {
        Backend::Scripted if planner.rules_file.is_none() => {
            problems.push("planner.rules_file: required for the scripted backend".into())
        }
        Backend::Llm if planner.llm_url.is_none() => problems.push(format!(
            "planner.llm_url: required for the llm backend (or set {LLM_URL_VAR})"
        )),
        _ => {}
    }
    if !problems.is_empty() {
        return Err(ConfigError::Invalid(problems));
    }
    Ok(Config {
        registry_dir: resolve(base, file.registry_dir),
        extra_registry_dirs: file.extra_registry_dirs.into_iter().map(|p| resolve(base, p)).collect(),
        planner,
        budget_tokens,
        k,
        workspace_root: resolve(base, file.workspace_root.unwrap_or_else(|| PathBuf::from("workspaces"))),
        port,
        max_concurrent_invocations,
        tool_path: file.tool_path.map(|p| resolve(base, p)),
        static_dir: file.static_dir.map(|p| resolve(base, p)),
    })
}

pub fn load_config_with(path: &Path, env: &dyn Fn(&str) -> Option<String>) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    parse_config(&text, base, env)
}

/// Loads a config file, applying `AUDIOFAB_LLM_URL` / `AUDIOFAB_LLM_KEY`.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    load_config_with(path, &|k| std::env::var(k).ok())
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Registry(#[from] crate::registry::RegistryError),
    #[error(transparent)]
    Rules(#[from] crate::planner::RulesError),
    #[error("workspace root {}: {source}", .path.display())]
    Workspace {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot locate the tool directory: {0}")]
    ToolPath(String),
}

pub fn load_full_registry(cfg: &Config) -> Result<Registry, StartupError> {
    let mut reg = load_registry(&cfg.registry_dir)?;
    for dir in &cfg.extra_registry_dirs {
        reg = reg.merged(&load_registry(dir)?)?;
    }
    Ok(reg)
}

fn default_tool_dir() -> Result<PathBuf, StartupError> {
    let exe = std::env::current_exe().map_err(|e| StartupError::ToolPath(e.to_string()))?;
    exe.parent()
        .map(Path::to_path_buf)
        .ok_or_else(|| StartupError::ToolPath(exe.display().to_string()))
}

/// Everything a front end needs, wired from a config.
pub struct App {
    pub config: Config,
    pub orchestrator: Arc<Orchestrator>,
}

impl App {
    pub fn build(config: Config) -> Result<App, StartupError> {
        let registry = Arc::new(load_full_registry(&config)?);
        std::fs::create_dir_all(&config.workspace_root).map_err(|source| StartupError::Workspace {
            path: config.workspace_root.clone(),
            source,
        })?;
        let planner: Arc<dyn Planner> = match config.planner.backend {
            Backend::Scripted => {
                let rules = config.planner.rules_file.as_ref().expect("checked at load");
                Arc::new(ScriptedPlanner::new(RuleSet::load(rules)?))
            }
            Backend::Llm => Arc::new(LlmPlanner::new(
                LlmConfig {
                    url: config.planner.llm_url.clone().expect("checked at load"),
                    model: config.planner.model.clone(),
                    api_key: config.planner.api_key.clone(),
                    timeout: DEFAULT_TIMEOUT,
                },
                &enumerate_instructions(&registry),
            )),
        };
        let tool_dir = match &config.tool_path {
            Some(p) => p.clone(),
            None => default_tool_dir()?,
        };
        let executor = Arc::new(Executor::new(
            Arc::clone(&registry),
            tool_dir,
            config.max_concurrent_invocations,
        ));
        let server = Arc::new(ToolServer::new(executor));
        let orchestrator = Arc::new(Orchestrator::new(
            registry,
            planner,
            server,
            Settings {
                k: config.k,
                budget_tokens: config.budget_tokens,
                workspace_root: config.workspace_root.clone(),
            },
        ));
        Ok(App { config, orchestrator })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(
            r#"{"registry_dir":"registry","planner":{"backend":"scripted","rules_file":"rules.json"}}"#,
            Path::new("/etc/af"),
            &no_env,
        )
        .unwrap();
        assert_eq!(cfg.registry_dir, Path::new("/etc/af/registry"));
        assert_eq!(cfg.planner.rules_file.as_deref(), Some(Path::new("/etc/af/rules.json")));
        assert_eq!(
            (cfg.budget_tokens, cfg.k, cfg.port, cfg.max_concurrent_invocations),
            (4096, 5, 8080, 4)
        );
        assert_eq!(cfg.workspace_root, Path::new("/etc/af/workspaces"));
        assert!(cfg.extra_registry_dirs.is_empty() && cfg.tool_path.is_none());
    }

    #[test]
    fn llm_needs_a_url() {
        let text = r#"{"registry_dir":"r","planner":{"backend":"llm"}}"#;
        match parse_config(text, Path::new("."), &no_env) {
            Err(ConfigError::Invalid(p)) => assert!(p[0].starts_with("planner.llm_url"), "{p:?}"),
            other => panic!("{other:?}"),
        }
        let env = |k: &str| match k {
            LLM_URL_VAR => Some("http://localhost:9/v1/chat/completions".to_string()),
            LLM_KEY_VAR => Some("secret".to_string()),
            _ => None,
        };
        let cfg = parse_config(text, Path::new("."), &env).unwrap();
        assert_eq!(
            cfg.planner.llm_url.as_deref(),
            Some("http://localhost:9/v1/chat/completions")
        );
        assert_eq!(cfg.planner.api_key.as_deref(), Some("secret"));
    }

    #[test]
    fn env_overrides_file_url() {
        let text = r#"{"registry_dir":"r","planner":{"backend":"llm","llm_url":"http://file"}}"#;
        let env = |k: &str| (k == LLM_URL_VAR).then(|| "http://env".to_string());
        assert_eq!(
            parse_config(text, Path::new("."), &env)
                .unwrap()
                .planner
                .llm_url
                .as_deref(),
            Some("http://env")
        );
    }

    #[test]
    fn field_level_diagnostics() {
        let text = r#"{"registry_dir":"r","planner":{"backend":"scripted"},"budget_tokens":100,"k":0}"#;
        match parse_config(text, Path::new("."), &no_env) {
            Err(ConfigError::Invalid(p)) => {
                assert_eq!(p.len(), 3, "{p:?}");
                assert!(p[0].starts_with("budget_tokens: must be at least 256"));
                assert!(p[1].starts_with("k:"));
                assert!(p[2].starts_with("planner.rules_file"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_config(
            r#"{"registry_dir":"r","planner":{"backend":"x"}}"#,
            Path::new("."),
            &no_env
        )
        .is_err());
        assert!(parse_config(
            r#"{"registry_dir":"r","planner":{"backend":"scripted","rules_file":"a"},"bogus":1}"#,
            Path::new("."),
            &no_env
        )
        .is_err());
    }
}
