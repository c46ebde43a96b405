//! The tool library: JSON manifests describing each tool's identity,
//! parameters, few-shot usage examples and isolated launch environment.
//!
//! A registry directory holds one manifest object per `*.json` file; a file
//! whose top-level value is an array is read as an aggregate of manifests.
//! Loading is fail-fast: any invalid manifest aborts the whole load.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MAX_INSTRUCTION_CHARS: usize = 200;
pub const MAX_TIMEOUT_S: f64 = 600.0;
pub const MAX_OUTPUT_BYTES: u64 = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Sound,
    Music,
    Multimodal,
}

impl Modality {
    pub const ALL: [&'static str; 4] = ["speech", "sound", "music", "multimodal"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Editing,
    Understanding,
    Generation,
}

impl Category {
    pub const ALL: [&'static str; 3] = ["editing", "understanding", "generation"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Number,
    Boolean,
    Path,
    Enum,
}

impl ParamType {
    pub const ALL: [&'static str; 5] = ["string", "number", "boolean", "path", "enum"];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::Path => "path",
            ParamType::Enum => "enum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Text,
    AudioPath,
    ImagePath,
    VideoPath,
    Json,
}

impl OutputKind {
    pub const ALL: [&'static str; 5] = ["text", "audio_path", "image_path", "video_path", "json"];

    pub fn as_str(self) -> &'static str {
        match self {
            OutputKind::Text => "text",
            OutputKind::AudioPath => "audio_path",
            OutputKind::ImagePath => "image_path",
            OutputKind::VideoPath => "video_path",
            OutputKind::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageExample {
    pub query: String,
    pub arguments: Map<String, Value>,
    pub expected_output_kind: OutputKind,
}

fn default_working_dir() -> PathBuf {
    PathBuf::from(".")
}

fn default_timeout() -> f64 {
    60.0
}

fn default_max_output() -> u64 {
    1024 * 1024
}

/// How to launch a tool in its own environment. `args` may contain the
/// `{request_file}` placeholder; a relative `working_dir` is resolved against
/// the session workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub env_vars: BTreeMap<String, String>,
    #[serde(default = "default_working_dir")]
    pub working_dir: PathBuf,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_max_output")]
    pub max_output_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolManifest {
    pub name: String,
    pub instruction: String,
    pub description: String,
    pub modality: Modality,
    pub category: Category,
    #[serde(default)]
    pub parameters: Vec<ParamSpec>,
    pub examples: Vec<UsageExample>,
    pub env: EnvSpec,
}

impl ToolManifest {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// One broken rule, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid manifest {}: {}", .file.display(), join_violations(.violations))]
    ManifestInvalid { file: PathBuf, violations: Vec<Violation> },
    #[error("duplicate tool name '{0}'")]
    DuplicateName(String),
    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

pub fn is_valid_tool_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Checks call arguments against a parameter schema. Used both for manifest
/// examples and for live tool calls.
pub fn check_arguments(params: &[ParamSpec], args: &Map<String, Value>) -> Vec<String> {
    let mut problems = Vec::new();
    for key in args.keys() {
        if !params.iter().any(|p| &p.name == key) {
            problems.push(format!("unknown param '{key}'"));
        }
    }
    for p in params {
        let Some(value) = args.get(&p.name) else {
            if p.required {
                problems.push(format!("missing required param '{}'", p.name));
            }
            continue;
        };
        let ok = match p.ty {
            ParamType::String => value.is_string(),
            ParamType::Number => value.is_number(),
            ParamType::Boolean => value.is_boolean(),
            ParamType::Path => value.as_str().is_some_and(|s| !s.trim().is_empty()),
            ParamType::Enum => value
                .as_str()
                .is_some_and(|s| p.enum_values.as_ref().is_some_and(|vals| vals.iter().any(|v| v == s))),
        };
        if !ok {
            let expected = match p.ty {
                ParamType::Path => "a nonempty path string".to_string(),
                ParamType::Enum => format!("one of [{}]", p.enum_values.as_deref().unwrap_or_default().join(", ")),
                other => format!("a {}", other.as_str()),
            };
            problems.push(format!("param '{}' must be {expected}", p.name));
        }
    }
    problems
}

fn check_manifest(m: &ToolManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    if !is_valid_tool_name(&m.name) {
        out.push(Violation::new("name", "must match [a-z][a-z0-9_]*"));
    }
    if m.instruction.trim().is_empty() {
        out.push(Violation::new("instruction", "must be nonempty"));
    }
    if m.instruction.contains('\n') {
        out.push(Violation::new("instruction", "must be a single line"));
    }
    if m.instruction.chars().count() > MAX_INSTRUCTION_CHARS {
        out.push(Violation::new(
            "instruction",
            format!("longer than {MAX_INSTRUCTION_CHARS} characters"),
        ));
    }

    let mut seen = HashSet::new();
    for (i, p) in m.parameters.iter().enumerate() {
        let field = format!("parameters[{i}]");
        if p.name.is_empty() {
            out.push(Violation::new(&field, "name must be nonempty"));
        }
        if !seen.insert(p.name.as_str()) {
            out.push(Violation::new(&field, format!("duplicate param '{}'", p.name)));
        }
        let has_values = p.enum_values.as_ref().is_some_and(|v| !v.is_empty());
        match (p.ty == ParamType::Enum, has_values) {
            (true, false) => out.push(Violation::new(&field, "enum param needs enum_values")),
            (false, true) => out.push(Violation::new(&field, "enum_values only allowed on enum params")),
            _ => {}
        }
    }

    if m.examples.is_empty() {
        out.push(Violation::new("examples", "at least one usage example required"));
    }
    for (i, ex) in m.examples.iter().enumerate() {
        if ex.query.trim().is_empty() {
            out.push(Violation::new(format!("examples[{i}]"), "query must be nonempty"));
        }
        for problem in check_arguments(&m.parameters, &ex.arguments) {
            out.push(Violation::new(format!("examples[{i}]"), problem));
        }
    }

    if m.env.command.trim().is_empty() {
        out.push(Violation::new("env.command", "must be nonempty"));
    }
    if !(m.env.timeout_s > 0.0 && m.env.timeout_s <= MAX_TIMEOUT_S) {
        out.push(Violation::new("env.timeout_s", "must be in (0, 600]"));
    }
    if m.env.max_output_bytes == 0 || m.env.max_output_bytes > MAX_OUTPUT_BYTES {
        out.push(Violation::new("env.max_output_bytes", "must be in (0, 16 MiB]"));
    }
    out
}

fn check_enum_field(obj: &Map<String, Value>, key: &str, allowed: &[&str], out: &mut Vec<Violation>) {
    match obj.get(key) {
        None => out.push(Violation::new(key, "missing")),
        Some(Value::String(s)) if allowed.contains(&s.as_str()) => {}
        Some(Value::String(_)) => out.push(Violation::new(key, "not in taxonomy")),
        Some(_) => out.push(Violation::new(key, "must be a string")),
    }
}

/// Validates a manifest document as found on disk.
///
/// Returns an empty list iff the document deserializes into a
/// [`ToolManifest`] satisfying every manifest invariant.
pub fn validate_manifest(doc: &Value) -> Vec<Violation> {
    let Some(obj) = doc.as_object() else {
        return vec![Violation::new("manifest", "must be a JSON object")];
    };
    let mut out = Vec::new();
    for key in ["name", "instruction", "description"] {
        match obj.get(key) {
            None => out.push(Violation::new(key, "missing")),
            Some(v) if !v.is_string() => out.push(Violation::new(key, "must be a string")),
            _ => {}
        }
    }
    check_enum_field(obj, "modality", &Modality::ALL, &mut out);
    check_enum_field(obj, "category", &Category::ALL, &mut out);
    if let Some(Value::Array(params)) = obj.get("parameters") {
        for (i, p) in params.iter().enumerate() {
            match p.get("type").and_then(Value::as_str) {
                Some(t) if ParamType::ALL.contains(&t) => {}
                Some(_) => out.push(Violation::new(format!("parameters[{i}].type"), "not a known type")),
                None => out.push(Violation::new(format!("parameters[{i}].type"), "missing")),
            }
        }
    }
    if let Some(Value::Array(examples)) = obj.get("examples") {
        for (i, ex) in examples.iter().enumerate() {
            match ex.get("expected_output_kind").and_then(Value::as_str) {
                Some(k) if OutputKind::ALL.contains(&k) => {}
                _ => out.push(Violation::new(
                    format!("examples[{i}].expected_output_kind"),
                    "not a known output kind",
                )),
            }
        }
    }
    if !out.is_empty() {
        return out;
    }
    match serde_json::from_value::<ToolManifest>(doc.clone()) {
        Ok(m) => check_manifest(&m),
        Err(e) => vec![Violation::new("manifest", e.to_string())],
    }
}

/// Validates an already-typed manifest.
pub fn validate_tool(m: &ToolManifest) -> Vec<Violation> {
    check_manifest(m)
}

/// Immutable, name-sorted set of tool manifests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    tools: Vec<ToolManifest>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn tools(&self) -> &[ToolManifest] {
        &self.tools
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.iter().map(|t| t.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&ToolManifest> {
        self.tools
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.tools[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Returns a new registry with `manifest` added; `self` is left untouched.
    pub fn register_tool(&self, manifest: ToolManifest) -> Result<Registry, RegistryError> {
        let violations = validate_tool(&manifest);
        if !violations.is_empty() {
            return Err(RegistryError::ManifestInvalid {
                file: PathBuf::from(format!("<{}>", manifest.name)),
                violations,
            });
        }
        match self.tools.binary_search_by(|t| t.name.as_str().cmp(&manifest.name)) {
            Ok(_) => Err(RegistryError::DuplicateName(manifest.name)),
            Err(pos) => {
                let mut tools = self.tools.clone();
                tools.insert(pos, manifest);
                Ok(Registry { tools })
            }
        }
    }

    /// Union of two registries; names must not collide.
    pub fn merged(&self, other: &Registry) -> Result<Registry, RegistryError> {
        other
            .tools
            .iter()
            .try_fold(self.clone(), |reg, m| reg.register_tool(m.clone()))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_manifest(file: &Path, doc: &Value) -> Result<ToolManifest, RegistryError> {
    let violations = validate_manifest(doc);
    if !violations.is_empty() {
        return Err(RegistryError::ManifestInvalid {
            file: file.to_path_buf(),
            violations,
        });
    }
    serde_json::from_value(doc.clone()).map_err(|e| RegistryError::ManifestInvalid {
        file: file.to_path_buf(),
        violations: vec![Violation::new("manifest", e.to_string())],
    })
}

/// Loads every `*.json` manifest in `dir`.
pub fn load_registry(dir: &Path) -> Result<Registry, RegistryError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    // filesystem listing order is unspecified
    files.sort();

    let mut manifests: Vec<(PathBuf, ToolManifest)> = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| RegistryError::ManifestInvalid {
            file: file.clone(),
            violations: vec![Violation::new("file", format!("not valid JSON: {e}"))],
        })?;
        match &doc {
            Value::Array(items) => {
                for (i, item) in items.iter().enumerate() {
                    let label = PathBuf::from(format!("{}[{i}]", file.display()));
                    manifests.push((label.clone(), parse_manifest(&label, item)?));
                }
            }
            _ => manifests.push((file.clone(), parse_manifest(&file, &doc)?)),
        }
    }

    let mut seen = HashSet::new();
    for (file, m) in &manifests {
        if !seen.insert(m.name.clone()) {
            return Err(RegistryError::ManifestInvalid {
                file: file.clone(),
                violations: vec![Violation::new("name", format!("duplicate name '{}'", m.name))],
            });
        }
    }
    let mut tools: Vec<ToolManifest> = manifests.into_iter().map(|(_, m)| m).collect();
    tools.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Registry { tools })
}
