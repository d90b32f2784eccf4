//! Phase handoff summaries and the shared shell-state description.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::llm_gateway::{chat, ChatBackend, ChatMessage, ChatParams};
use crate::phase_pipeline::PhaseName;
use crate::plan_sessions::parse_verdict;
use crate::task_graph::{PenetrationTaskGraph, TaskId, TaskNode};
use crate::text::{clip, first_line};

pub const DEFAULT_DIGEST_BUDGET: usize = 2000;
pub const NO_FINDINGS: &str = "no findings";
const RESULT_CHARS_IN_PROMPT: usize = 1500;
const FACT_CHARS: usize = 200;
const NO_SHELL: &str = "no shell session established";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShellState {
    pub description: String,
    pub last_updated_task: Option<TaskId>,
    /// Session-wide step at which the description last changed.
    #[serde(default)]
    pub updated_at_step: u64,
}

impl ShellState {
    pub fn describe(&self) -> &str {
        if self.description.trim().is_empty() {
            NO_SHELL
        } else {
            &self.description
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: PhaseName,
    pub digest: String,
    pub key_facts: Vec<String>,
    pub shell_state: ShellState,
    /// Set when the gateway was unavailable and the digest was built mechanically.
    pub degraded: bool,
}

impl PhaseSummary {
    pub fn empty(phase: PhaseName, shell: &ShellState) -> Self {
        Self {
            phase,
            digest: NO_FINDINGS.to_string(),
            key_facts: Vec::new(),
            shell_state: shell.clone(),
            degraded: false,
        }
    }

    /// Text handed to the next phase's plan session.
    pub fn handoff_text(&self) -> String {
        let mut out = format!("{} phase summary:\n{}\n", self.phase, self.digest);
        if !self.key_facts.is_empty() {
            out.push_str("Key facts:\n");
            for fact in &self.key_facts {
                out.push_str(&format!("- {fact}\n"));
            }
        }
        out.push_str(&format!("Current shell state: {}", self.shell_state.describe()));
        out
    }
}

/// Condenses the successful tasks of a finished phase.
pub fn summarize_phase(
    gateway: &dyn ChatBackend,
    params: &ChatParams,
    phase: PhaseName,
    graph: &PenetrationTaskGraph,
    shell: &ShellState,
    budget: usize,
) -> PhaseSummary {
    let successes: Vec<&TaskNode> = graph.tasks().filter(|t| t.is_completed()).collect();
    let mut summary = PhaseSummary {
        phase,
        digest: clip(NO_FINDINGS, budget),
        key_facts: Vec::new(),
        shell_state: shell.clone(),
        degraded: false,
    };
    if successes.is_empty() {
        return summary;
    }

    let mut prompt = format!("Summarize the findings of the {phase} phase for the next phase.\nSuccessful tasks:\n");
    for task in &successes {
        prompt.push_str(&format!("- {}\n", task.instruction));
        if let Some(cmd) = &task.command {
            prompt.push_str(&format!("  Command: {cmd}\n"));
        }
        prompt.push_str(&format!(
            "  Result: {}\n",
            clip(task.result.as_deref().unwrap_or_default(), RESULT_CHARS_IN_PROMPT)
        ));
    }
    prompt.push_str(
        "Reply with a short paragraph, then a line \"Key facts:\" followed by one fact per line starting with \"- \" \
         (ports, services, versions, vulnerabilities, credentials).",
    );

    match chat(gateway, &[ChatMessage::user(prompt)], params) {
        Ok(reply) => {
            let (digest, facts) = split_reply(&reply);
            summary.key_facts = dedup(facts);
            summary.digest = clip(if digest.is_empty() { NO_FINDINGS } else { &digest }, budget);
        }
        Err(err) => {
            warn!(%phase, error = %err, "summary fell back to mechanical digest");
            summary.key_facts = dedup(successes.iter().map(|t| mechanical_fact(t)).collect());
            summary.digest = clip(&summary.key_facts.join("; "), budget);
            summary.degraded = true;
        }
    }
    summary
}

fn split_reply(reply: &str) -> (String, Vec<String>) {
    let mut digest = Vec::new();
    let mut facts = Vec::new();
    let mut in_facts = false;
    for line in reply.lines() {
        let trimmed = line.trim();
        if trimmed.trim_end_matches(':').eq_ignore_ascii_case("key facts") {
            in_facts = true;
            continue;
        }
        if in_facts {
            if let Some(fact) = trimmed.strip_prefix("- ").or_else(|| trimmed.strip_prefix("* ")) {
                let fact = fact.trim();
                if !fact.is_empty() {
                    facts.push(clip(fact, FACT_CHARS));
                }
            }
        } else {
            digest.push(line);
        }
    }
    (digest.join("\n").trim().to_string(), facts)
}

fn mechanical_fact(task: &TaskNode) -> String {
    let result = first_line(task.result.as_deref().unwrap_or_default());
    let fact = if result.is_empty() {
        task.instruction.clone()
    } else {
        format!("{}: {}", task.instruction, result)
    };
    clip(&fact, FACT_CHARS)
}

fn dedup(facts: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    facts.into_iter().filter(|f| seen.insert(f.clone())).collect()
}

/// Replaces the shell description when a successful task changed the session.
///
/// `step` is the session-wide step at which `task` ran; updates from earlier
/// steps than the current state are ignored. Gateway errors leave the state
/// as it was.
pub fn update_shell_state(
    gateway: &dyn ChatBackend,
    params: &ChatParams,
    state: &ShellState,
    task: &TaskNode,
    step: u64,
) -> ShellState {
    if !task.is_completed() || step < state.updated_at_step {
        return state.clone();
    }
    let result = clip(task.result.as_deref().unwrap_or_default(), RESULT_CHARS_IN_PROMPT);
    let command = task.command.as_deref().unwrap_or("(performed by operator)");
    let question = format!(
        "Did this task change the shell session?\nCurrent shell state: {}\nTask: {}\nCommand: {}\nResult:\n{}\n\
         Begin your reply with \"yes\" or \"no\".",
        state.describe(),
        task.instruction,
        command,
        result
    );
    let changed = match chat(gateway, &[ChatMessage::user(question)], params) {
        Ok(reply) => parse_verdict(&reply).success,
        Err(err) => {
            warn!(task = task.id, error = %err, "shell state left unchanged");
            return state.clone();
        }
    };
    if !changed {
        return state.clone();
    }
    let describe = format!(
        "Describe the current shell session in one line.\nPrevious shell state: {}\nTask: {}\nCommand: {}\nResult:\n{}",
        state.describe(),
        task.instruction,
        command,
        result
    );
    match chat(gateway, &[ChatMessage::user(describe)], params) {
        Ok(reply) => {
            let line = first_line(&reply);
            if line.is_empty() {
                return state.clone();
            }
            ShellState {
                description: line.to_string(),
                last_updated_task: Some(task.id),
                updated_at_step: step,
            }
        }
        Err(err) => {
            warn!(task = task.id, error = %err, "shell state left unchanged");
            state.clone()
        }
    }
}
