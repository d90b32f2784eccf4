//! Deterministic rule-driven backend.
//!
//! A rules file is a JSON array of `{"match": string, "response": string,
//! "once": bool?}`. Matches are tested against the last user message, in file
//! order; the first applicable rule answers. A `match` starting with `re:` is
//! a regular expression, anything else is a plain substring. Rules marked
//! `once` are consumed by their first use.

use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::Deserialize;

use super::{last_user_message, ChatBackend, ChatMessage, ChatParams, GatewayError};

#[derive(Debug, Clone)]
pub enum Matcher {
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    /// Parses the `match` field of a rules file.
    pub fn parse(spec: &str) -> Result<Self, regex::Error> {
        match spec.strip_prefix("re:") {
            Some(pattern) => Ok(Matcher::Pattern(Regex::new(pattern)?)),
            None => Ok(Matcher::Substring(spec.to_string())),
        }
    }

    pub fn is_match(&self, text: &str) -> bool {
        match self {
            Matcher::Substring(s) => text.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(text),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedRule {
    pub matcher: Matcher,
    pub response: String,
    pub consume_once: bool,
}

#[derive(Deserialize)]
struct RuleRecord {
    #[serde(rename = "match")]
    matcher: String,
    response: String,
    #[serde(default)]
    once: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScriptMode {
    /// Unmatched prompts are an error.
    #[default]
    Strict,
    /// Unmatched prompts are echoed back.
    Lenient,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
    consumed: Mutex<Vec<bool>>,
    mode: ScriptMode,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>, mode: ScriptMode) -> Self {
        let consumed = Mutex::new(vec![false; rules.len()]);
        Self { rules, consumed, mode }
    }

    pub fn from_json(text: &str, mode: ScriptMode) -> Result<Self, String> {
        let records: Vec<RuleRecord> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let rules = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let matcher = Matcher::parse(&r.matcher).map_err(|e| format!("rule {i}: {e}"))?;
                Ok(ScriptedRule {
                    matcher,
                    response: r.response,
                    consume_once: r.once,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Self::new(rules, mode))
    }

    pub fn from_file(path: &Path, mode: ScriptMode) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text, mode).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Convenience for tests: substring rules, none consumed.
    pub fn with_responses<I, S, T>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let rules = pairs
            .into_iter()
            .map(|(m, r)| ScriptedRule {
                matcher: Matcher::Substring(m.into()),
                response: r.into(),
                consume_once: false,
            })
            .collect();
        Self::new(rules, ScriptMode::Strict)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, messages: &[ChatMessage], _params: &ChatParams) -> Result<String, GatewayError> {
        let prompt = last_user_message(messages).unwrap_or_default();
        let mut consumed = self.consumed.lock().expect("scripted backend poisoned");
        for (i, rule) in self.rules.iter().enumerate() {
            if consumed[i] || !rule.matcher.is_match(prompt) {
                continue;
            }
            if rule.consume_once {
                consumed[i] = true;
            }
            return Ok(rule.response.clone());
        }
        match self.mode {
            ScriptMode::Lenient => Ok(prompt.to_string()),
            ScriptMode::Strict => {
                let head: String = prompt.chars().take(120).collect();
                Err(GatewayError::NoRuleMatched(head))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::chat;

    fn ask(b: &ScriptedBackend, text: &str) -> Result<String, GatewayError> {
        chat(b, &[ChatMessage::user(text)], &ChatParams::default())
    }

    #[test]
    fn first_matching_rule_wins() {
        let b = ScriptedBackend::from_json(
            r#"[{"match": "enumerate open ports", "response": "[plan]"},
                {"match": "ports", "response": "other"}]"#,
            ScriptMode::Strict,
        )
        .unwrap();
        assert_eq!(ask(&b, "please enumerate open ports now").unwrap(), "[plan]");
        assert_eq!(ask(&b, "ports?").unwrap(), "other");
    }

    #[test]
    fn once_rules_are_consumed() {
        let b = ScriptedBackend::from_json(
            r#"[{"match": "x", "response": "first", "once": true},
                {"match": "x", "response": "after"}]"#,
            ScriptMode::Strict,
        )
        .unwrap();
        assert_eq!(ask(&b, "x").unwrap(), "first");
        assert_eq!(ask(&b, "x").unwrap(), "after");
        assert_eq!(ask(&b, "x").unwrap(), "after");
    }

    #[test]
    fn regex_rules_and_modes() {
        let b = ScriptedBackend::from_json(r#"[{"match": "re:^Phase \\d+$", "response": "yes"}]"#, ScriptMode::Strict)
            .unwrap();
        assert_eq!(ask(&b, "Phase 2").unwrap(), "yes");
        assert!(matches!(ask(&b, "Phase two"), Err(GatewayError::NoRuleMatched(_))));

        let lenient = ScriptedBackend::new(vec![], ScriptMode::Lenient);
        assert_eq!(ask(&lenient, "echo me").unwrap(), "echo me");
    }

    #[test]
    fn matching_uses_last_user_message_only() {
        let b = ScriptedBackend::with_responses([("needle", "found")]);
        let msgs = [
            ChatMessage::user("needle"),
            ChatMessage::assistant("yes"),
            ChatMessage::user("haystack"),
        ];
        assert!(chat(&b, &msgs, &ChatParams::default()).is_err());
    }

    #[test]
    fn bad_rules_file_is_reported() {
        assert!(ScriptedBackend::from_json("{}", ScriptMode::Strict).is_err());
        assert!(ScriptedBackend::from_json(r#"[{"match":"re:(","response":""}]"#, ScriptMode::Strict).is_err());
    }
}
