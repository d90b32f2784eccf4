//! A simulated target that answers commands from a rules file.
//!
//! ```json
//! {
//!   "name": "fig3-basic",
//!   "initial_state": {"cwd": "/home/kali", "user": "kali"},
//!   "rules": [
//!     {"match": "re:^ssh (\\w+)@", "output": "Welcome", "set": {"user": "${1}"}},
//!     {"match": "whoami", "output": "${user}"},
//!     {"match": "cat /etc/shadow", "guard": {"user": "root"}, "output": "..."},
//!     {"match": "sleep", "output": "", "exit": "hang"}
//!   ]
//! }
//! ```
//!
//! A `match` starting with `re:` is a regular expression searched in the
//! command; anything else is a substring. `${n}` expands capture groups and
//! `${key}` expands state. The first rule whose match and guard hold answers.
//! Without a matching rule, `cd DIR` and `pwd` act on the `cwd` state entry,
//! and anything else prints `<program>: command not found`.

use std::collections::BTreeMap;
use std::path::Path;

use regex::{Captures, Regex};
use serde::Deserialize;
use thiserror::Error;

use crate::actuation::{ActuationError, ChannelOutput, Command, ShellChannel};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("rule {index}: bad pattern: {reason}")]
    Pattern { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitHint {
    #[default]
    Ok,
    Error,
    /// The command never returns; the caller sees a timeout.
    Hang,
    /// The session drops after this output.
    Close,
}

#[derive(Debug, Clone, Deserialize)]
struct RuleRecord {
    #[serde(rename = "match")]
    matcher: String,
    #[serde(default)]
    guard: BTreeMap<String, String>,
    #[serde(default)]
    output: String,
    #[serde(default)]
    set: BTreeMap<String, String>,
    #[serde(default)]
    exit: ExitHint,
}

#[derive(Debug, Deserialize)]
struct ScenarioRecord {
    name: String,
    #[serde(default)]
    initial_state: BTreeMap<String, String>,
    #[serde(default)]
    rules: Vec<RuleRecord>,
}

#[derive(Debug, Clone)]
enum RuleMatch {
    Substring(String),
    Pattern(Regex),
}

#[derive(Debug, Clone)]
pub struct SandboxRule {
    matcher: RuleMatch,
    guard: BTreeMap<String, String>,
    output: String,
    set: BTreeMap<String, String>,
    exit: ExitHint,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub initial_state: BTreeMap<String, String>,
    rules: Vec<SandboxRule>,
}

/// What the sandbox did with one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxReply {
    pub output: String,
    pub exit: ExitHint,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let record: ScenarioRecord = serde_json::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let rules = record
            .rules
            .into_iter()
            .enumerate()
            .map(|(index, r)| {
                let matcher = match r.matcher.strip_prefix("re:") {
                    Some(p) => RuleMatch::Pattern(Regex::new(p).map_err(|e| ScenarioError::Pattern {
                        index,
                        reason: e.to_string(),
                    })?),
                    None if r.matcher.is_empty() => {
                        return Err(ScenarioError::Invalid(format!("rule {index}: empty match")))
                    }
                    None => RuleMatch::Substring(r.matcher),
                };
                Ok(SandboxRule {
                    matcher,
                    guard: r.guard,
                    output: r.output,
                    set: r.set,
                    exit: r.exit,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if rules.is_empty() {
            return Err(ScenarioError::Invalid("scenario has no rules".into()));
        }
        Ok(Self {
            name: record.name,
            initial_state: record.initial_state,
            rules,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    /// Answers `command` against `state`, updating it.
    pub fn respond(&self, state: &mut BTreeMap<String, String>, command: &str) -> SandboxReply {
        let command = command.trim();
        for rule in &self.rules {
            let captures = match &rule.matcher {
                RuleMatch::Substring(s) => {
                    if !command.contains(s.as_str()) {
                        continue;
                    }
                    None
                }
                RuleMatch::Pattern(re) => match re.captures(command) {
                    Some(c) => Some(c),
                    None => continue,
                },
            };
            if rule.guard.iter().any(|(k, v)| state.get(k) != Some(v)) {
                continue;
            }
            let output = expand(&rule.output, captures.as_ref(), state);
            let updates: Vec<(String, String)> = rule
                .set
                .iter()
                .map(|(k, v)| (k.clone(), expand(v, captures.as_ref(), state)))
                .collect();
            state.extend(updates);
            return SandboxReply { output, exit: rule.exit };
        }
        builtin(state, command)
    }
}

fn expand(template: &str, captures: Option<&Captures<'_>>, state: &BTreeMap<String, String>) -> String {
    static PLACEHOLDER: std::sync::LazyLock<Regex> =
        std::sync::LazyLock::new(|| Regex::new(r"\$\{([A-Za-z0-9_]+)\}").expect("placeholder regex compiles"));
    PLACEHOLDER
        .replace_all(template, |c: &Captures<'_>| {
            let key = &c[1];
            if let Ok(n) = key.parse::<usize>() {
                captures
                    .and_then(|cap| cap.get(n))
                    .map(|m| m.as_str().to_string())
                    .unwrap_or_default()
            } else {
                state.get(key).cloned().unwrap_or_default()
            }
        })
        .into_owned()
}

fn builtin(state: &mut BTreeMap<String, String>, command: &str) -> SandboxReply {
    let mut words = command.split_whitespace();
    let program = words.next().unwrap_or_default();
    let cwd = state.get("cwd").cloned().unwrap_or_else(|| "/".into());
    match program {
        "" => SandboxReply {
            output: String::new(),
            exit: ExitHint::Ok,
        },
        "pwd" => SandboxReply {
            output: format!("{cwd}\n"),
            exit: ExitHint::Ok,
        },
        "cd" => {
            let target = words.next().unwrap_or("~");
            let home = state.get("home").cloned().unwrap_or_else(|| "/root".into());
            let next = match target {
                "~" => home,
                t if t.starts_with('/') => t.to_string(),
                t => format!("{}/{}", cwd.trim_end_matches('/'), t),
            };
            state.insert("cwd".into(), next);
            SandboxReply {
                output: String::new(),
                exit: ExitHint::Ok,
            }
        }
        other => SandboxReply {
            output: format!("{other}: command not found\n"),
            exit: ExitHint::Error,
        },
    }
}

/// In-process execution channel over a [`Scenario`].
pub struct SandboxChannel {
    scenario: Scenario,
    state: BTreeMap<String, String>,
    open: bool,
    history: Vec<String>,
}

impl SandboxChannel {
    pub fn new(scenario: Scenario) -> Self {
        let state = scenario.initial_state.clone();
        Self {
            scenario,
            state,
            open: true,
            history: Vec::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, String> {
        &self.state
    }

    /// Every command received, in order.
    pub fn history(&self) -> &[String] {
        &self.history
    }
}

impl ShellChannel for SandboxChannel {
    fn run(&mut self, command: &Command) -> Result<ChannelOutput, ActuationError> {
        if !self.open {
            return Err(ActuationError::ChannelClosed);
        }
        self.history.push(command.text.clone());
        let reply = self.scenario.respond(&mut self.state, &command.text);
        match reply.exit {
            ExitHint::Hang => Ok(ChannelOutput {
                output: reply.output,
                timed_out: true,
            }),
            ExitHint::Close => {
                self.open = false;
                Ok(ChannelOutput {
                    output: reply.output,
                    timed_out: false,
                })
            }
            ExitHint::Ok | ExitHint::Error => Ok(ChannelOutput {
                output: reply.output,
                timed_out: false,
            }),
        }
    }

    fn is_open(&self) -> bool {
        self.open
    }

    fn close(&mut self) {
        self.open = false;
    }
}
