//! Deterministic planning from a rules file.
//!
//! A rules file is a JSON object with an ordered `rules` array and an
//! optional `fallback`. The first rule whose `match` accepts the query wins:
//! `{"exact": "..."}` compares the trimmed query verbatim, `{"tokens": [...]}`
//! requires every listed token among the query's tokens. A rule carries the
//! plan to return, optional replacement suffixes keyed by the id of the
//! subtask whose failure triggers them, and an optional reply line that
//! opens the synthesized response.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{
    template_response, validate_plan, ArgumentRequest, Outcome, Plan, Planner, PlannerError, PlanningContext,
    PriorTurn, Subtask,
};
use crate::executor::ToolResult;
use crate::selection::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    Exact(String),
    Tokens(Vec<String>),
}

impl MatchRule {
    pub fn accepts(&self, query: &str) -> bool {
        match self {
            MatchRule::Exact(s) => query.trim() == s.trim(),
            MatchRule::Tokens(wanted) => {
                let have: HashSet<String> = tokenize(query).into_iter().collect();
                wanted.iter().all(|w| tokenize(w).iter().all(|t| have.contains(t)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub name: String,
    #[serde(rename = "match")]
    pub matcher: MatchRule,
    pub plan: Plan,
    #[serde(default)]
    pub replan: BTreeMap<String, Plan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fallback {
    pub plan: Plan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Fallback>,
}

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("cannot read rules file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("rules file {path}: {message}")]
    Invalid { path: String, message: String },
}

impl RuleSet {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, RulesError> {
        let invalid = |message: String| RulesError::Invalid {
            path: origin.to_string(),
            message,
        };
        let set: RuleSet = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let mut names = HashSet::new();
        for rule in &set.rules {
            if !names.insert(rule.name.as_str()) {
                return Err(invalid(format!("duplicate rule name '{}'", rule.name)));
            }
            if let MatchRule::Tokens(t) = &rule.matcher {
                if t.is_empty() {
                    return Err(invalid(format!("rule '{}': empty token list", rule.name)));
                }
            }
            validate_plan(&rule.plan, &[]).map_err(|e| invalid(format!("rule '{}': {e}", rule.name)))?;
            for (trigger, suffix) in &rule.replan {
                if rule.plan.get(trigger).is_none() {
                    return Err(invalid(format!(
                        "rule '{}': replan trigger '{trigger}' is not a subtask",
                        rule.name
                    )));
                }
                let earlier: Vec<&str> = rule
                    .plan
                    .subtasks
                    .iter()
                    .take_while(|s| &s.id != trigger)
                    .map(|s| s.id.as_str())
                    .collect();
                validate_plan(suffix, &earlier)
                    .map_err(|e| invalid(format!("rule '{}' replan '{trigger}': {e}", rule.name)))?;
            }
        }
        if let Some(fb) = &set.fallback {
            validate_plan(&fb.plan, &[]).map_err(|e| invalid(format!("fallback: {e}")))?;
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, RulesError> {
        let text = std::fs::read_to_string(path).map_err(|source| RulesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn rule_for(&self, query: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.matcher.accepts(query))
    }
}

pub struct ScriptedPlanner {
    rules: RuleSet,
}

impl ScriptedPlanner {
    pub fn new(rules: RuleSet) -> Self {
        ScriptedPlanner { rules }
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }
}

impl Planner for ScriptedPlanner {
    fn backend(&self) -> &'static str {
        "scripted"
    }

    fn plan_task(&self, query: &str, _context: &PlanningContext, _history: &[PriorTurn]) -> Result<Plan, PlannerError> {
        if let Some(rule) = self.rules.rule_for(query) {
            return Ok(rule.plan.clone());
        }
        self.rules
            .fallback
            .as_ref()
            .map(|fb| fb.plan.clone())
            .ok_or(PlannerError::NoRule)
    }

    fn tool_arguments(&self, req: &ArgumentRequest<'_>) -> Result<Map<String, Value>, PlannerError> {
        req.subtask.arguments.clone().ok_or_else(|| PlannerError::Arguments {
            subtask: req.subtask.id.clone(),
            reason: "the rule gives no arguments for this subtask".into(),
        })
    }

    fn replan(&self, query: &str, _plan: &Plan, failed: &Subtask, _result: &ToolResult) -> Option<Plan> {
        self.rules.rule_for(query)?.replan.get(&failed.id).cloned()
    }

    fn synthesize(&self, query: &str, outcomes: &[Outcome]) -> Result<String, PlannerError> {
        let reply = match self.rules.rule_for(query) {
            Some(rule) => rule.reply.as_deref(),
            None => self.rules.fallback.as_ref().and_then(|f| f.reply.as_deref()),
        };
        Ok(template_response(query, outcomes, reply))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RULES: &str = r#"{
        "rules": [
            {"name": "exact", "match": {"exact": "hello there"},
             "plan": {"plan_id": "p0", "subtasks": [{"id": "s1", "description": "greet"}]}},
            {"name": "sep", "match": {"tokens": ["separate", "vocals"]},
             "plan": {"plan_id": "p1", "subtasks": [
                {"id": "s1", "description": "split", "tool_hint": "music_separation",
                 "arguments": {"audio_path": "${inputs.0}"}}]},
             "replan": {"s1": {"plan_id": "p1r", "subtasks": [{"id": "r1", "description": "other"}]}},
             "reply": "Separated."}
        ],
        "fallback": {"plan": {"plan_id": "none", "subtasks": [{"id": "s1", "description": "chat"}]}}
    }"#;

    #[test]
    fn matching() {
        let set = RuleSet::from_json(RULES, "t").unwrap();
        assert_eq!(set.rule_for("  hello there ").unwrap().name, "exact");
        assert_eq!(set.rule_for("Please SEPARATE the vocals!").unwrap().name, "sep");
        assert!(set.rule_for("separate drums").is_none());
    }

    #[test]
    fn rejects_bad_rule_files() {
        let dangling = RULES.replace(
            r#""description": "other""#,
            r#""description": "other", "depends_on": ["zz"]"#,
        );
        assert!(RuleSet::from_json(&dangling, "t").is_err());
        let bad_trigger = RULES.replace(r#""replan": {"s1""#, r#""replan": {"s7""#);
        assert!(RuleSet::from_json(&bad_trigger, "t").is_err());
        assert!(RuleSet::from_json("[]", "t").is_err());
    }
}
