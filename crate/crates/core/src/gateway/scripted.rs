use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChatClient, ChatRequest, TemplateId};
use crate::error::{Error, Result};

/// Matches on template and/or prompt substrings; unset fields match anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default)]
    pub template: Option<TemplateId>,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub tag: Option<String>,
    pub reply: String,
}

impl ScriptRule {
    pub fn template(template: TemplateId, reply: impl Into<String>) -> Self {
        Self {
            template: Some(template),
            contains: None,
            tag: None,
            reply: reply.into(),
        }
    }

    pub fn contains(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn tagged(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        self.template.is_none_or(|t| t == req.template_id)
            && self.tag.as_deref().is_none_or(|t| t == req.tag)
            && self.contains.as_deref().is_none_or(|n| req.prompt.contains(n))
    }
}

/// Scenario file layout (TOML):
///
/// ```toml
/// default_reply = "FINAL: 0"
/// [[rules]]
/// template = "evidence_fusion"
/// contains = "ZEBRA_MARKER"
/// reply = "FINAL: 1"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub default_reply: String,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

/// Deterministic test double: first matching rule wins, else the default reply.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedResponder {
    rules: Vec<ScriptRule>,
    default_reply: String,
}

impl ScriptedResponder {
    pub fn new(default_reply: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_reply: default_reply.into(),
        }
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn from_scenario(scenario: Scenario) -> Self {
        Self {
            rules: scenario.rules,
            default_reply: scenario.default_reply,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scenario: Scenario = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::from_scenario(scenario))
    }

    pub fn to_scenario(&self) -> Scenario {
        Scenario {
            default_reply: self.default_reply.clone(),
            rules: self.rules.clone(),
        }
    }

    pub fn reply_for(&self, req: &ChatRequest) -> &str {
        self.rules
            .iter()
            .find(|r| r.matches(req))
            .map(|r| r.reply.as_str())
            .unwrap_or(&self.default_reply)
    }
}

impl ChatClient for ScriptedResponder {
    fn send(&self, request: &ChatRequest) -> Result<String> {
        Ok(self.reply_for(request).to_string())
    }

    fn fingerprint(&self) -> String {
        format!("scripted/rules={}", self.rules.len())
    }
}
