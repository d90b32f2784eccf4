//! Command generation, execution channels and the oversize-output filter.

mod process;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use process::{Completion, ProcessChannel, SshConfig, DEFAULT_PROMPT_PATTERN};

use crate::llm_gateway::{chat, ChatBackend, ChatMessage, ChatParams, GatewayError};
use crate::phase_pipeline::PhaseSpec;
use crate::summarizer::ShellState;
use crate::task_graph::TaskId;

pub const DEFAULT_TIMEOUT_S: f64 = 300.0;
pub const DEFAULT_FILTER_THRESHOLD: usize = 8000;
pub const TRUNCATION_MARKER: &str = "\n[... output truncated ...]\n";

#[derive(Debug, Error)]
pub enum ActuationError {
    #[error("no command in completion")]
    EmptyCommand,
    #[error("command contains a line break")]
    MultiLineCommand,
    #[error("interactive command `{0}` is not supported; use a non-interactive equivalent")]
    InteractiveCommand(String),
    #[error("execution channel is closed")]
    ChannelClosed,
    #[error("execution channel: {0}")]
    Channel(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One command line bound for the execution channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub text: String,
    pub task_id: TaskId,
    pub timeout_s: f64,
}

impl Command {
    pub fn new(text: impl Into<String>, task_id: TaskId, timeout_s: f64) -> Result<Self, ActuationError> {
        let text = text.into();
        if text.contains(['\n', '\r']) {
            return Err(ActuationError::MultiLineCommand);
        }
        if text.trim().is_empty() {
            return Err(ActuationError::EmptyCommand);
        }
        Ok(Self {
            text: text.trim().to_string(),
            task_id,
            timeout_s,
        })
    }
}

/// What a channel returns for one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelOutput {
    pub output: String,
    pub timed_out: bool,
}

/// An interactive session that keeps its state between commands.
pub trait ShellChannel: Send {
    fn run(&mut self, command: &Command) -> Result<ChannelOutput, ActuationError>;
    fn is_open(&self) -> bool;
    fn close(&mut self);
}

impl<T: ShellChannel + ?Sized> ShellChannel for Box<T> {
    fn run(&mut self, command: &Command) -> Result<ChannelOutput, ActuationError> {
        (**self).run(command)
    }

    fn is_open(&self) -> bool {
        (**self).is_open()
    }

    fn close(&mut self) {
        (**self).close()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub raw: String,
    pub filtered: String,
    pub duration_s: f64,
    pub timed_out: bool,
    pub extraction_used: bool,
    /// The extraction call failed and `filtered` is a head-and-tail cut.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilteredOutput {
    pub text: String,
    pub extraction_used: bool,
    pub degraded: bool,
}

/// Strips fences and chatter, keeps the first line, rewrites pagers.
pub fn parse_command(completion: &str) -> Result<String, ActuationError> {
    let body = fenced_body(completion).unwrap_or(completion);
    let line = body
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with("```"))
        .ok_or(ActuationError::EmptyCommand)?;
    let line = line.strip_prefix("$ ").unwrap_or(line);
    let line = line.trim().trim_matches('`').trim();
    if line.is_empty() {
        return Err(ActuationError::EmptyCommand);
    }
    rewrite_interactive(line)
}

fn fenced_body(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    // drop the language tag
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    Some(match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    })
}

const EDITORS: &[&str] = &["vi", "vim", "nvim", "nano", "emacs", "pico"];
const PAGERS: &[&str] = &["less", "more"];

/// Rewrites or rejects commands that would wait for keyboard input.
pub fn rewrite_interactive(command: &str) -> Result<String, ActuationError> {
    let (prefix, rest) = match command.strip_prefix("sudo ") {
        Some(rest) => ("sudo ", rest.trim_start()),
        None => ("", command),
    };
    let mut words = rest.splitn(2, char::is_whitespace);
    let program = words.next().unwrap_or_default();
    let args = words.next().unwrap_or_default().trim();
    let name = program.rsplit('/').next().unwrap_or(program);
    if EDITORS.contains(&name) {
        return Err(ActuationError::InteractiveCommand(name.to_string()));
    }
    if PAGERS.contains(&name) {
        return Ok(format!("{prefix}cat {args}").trim_end().to_string());
    }
    if name == "top" && !args.split_whitespace().any(|a| a == "-b") {
        return Ok(format!("{prefix}top -b -n 1 {args}").trim_end().to_string());
    }
    Ok(command.to_string())
}

/// Asks the gateway for one command that carries out `detail`.
pub fn generate_command(
    gateway: &dyn ChatBackend,
    params: &ChatParams,
    detail: &str,
    phase: &PhaseSpec,
    shell: &ShellState,
    task_id: TaskId,
    timeout_s: f64,
) -> Result<Command, ActuationError> {
    let prompt = format!(
        "You are the command generator for the {} phase.\nCurrent shell state: {}\nTask details:\n{}\n\
         Reply with exactly one shell command on a single line and nothing else.",
        phase.name,
        shell.describe(),
        detail
    );
    let reply = chat(gateway, &[ChatMessage::user(prompt)], params)?;
    Command::new(parse_command(&reply)?, task_id, timeout_s)
}

/// Passes short output through untouched and asks the gateway to condense
/// anything longer than `threshold` characters.
pub fn filter_output(gateway: &dyn ChatBackend, params: &ChatParams, raw: &str, threshold: usize) -> FilteredOutput {
    if raw.chars().count() <= threshold {
        return FilteredOutput {
            text: raw.to_string(),
            extraction_used: false,
            degraded: false,
        };
    }
    let prompt = format!(
        "The command output below is too long to pass on. Extract the key information from it: open ports, \
         services and versions, credentials, paths, errors and anything else useful for the next step.\n\
         Output:\n{raw}"
    );
    match chat(gateway, &[ChatMessage::user(prompt)], params) {
        Ok(reply) if !reply.trim().is_empty() => FilteredOutput {
            text: cap(&reply, threshold),
            extraction_used: true,
            degraded: false,
        },
        Ok(_) => {
            warn!("extraction returned nothing; keeping head and tail");
            head_and_tail(raw, threshold)
        }
        Err(err) => {
            warn!(error = %err, "extraction failed; keeping head and tail");
            head_and_tail(raw, threshold)
        }
    }
}

fn cap(text: &str, threshold: usize) -> String {
    if text.chars().count() <= threshold {
        return text.to_string();
    }
    let keep = threshold.saturating_sub(TRUNCATION_MARKER.chars().count());
    let mut out: String = text.chars().take(keep).collect();
    out.push_str(TRUNCATION_MARKER);
    out.chars().take(threshold).collect()
}

fn head_and_tail(raw: &str, threshold: usize) -> FilteredOutput {
    let half = threshold / 2;
    let total = raw.chars().count();
    let head: String = raw.chars().take(half).collect();
    let tail: String = raw.chars().skip(total - half).collect();
    FilteredOutput {
        text: format!("{head}{TRUNCATION_MARKER}{tail}"),
        extraction_used: true,
        degraded: true,
    }
}

/// Runs `command` on `channel`, timing it.
pub fn execute(channel: &mut dyn ShellChannel, command: &Command) -> Result<(ChannelOutput, f64), ActuationError> {
    if !channel.is_open() {
        return Err(ActuationError::ChannelClosed);
    }
    let started = Instant::now();
    let out = channel.run(command)?;
    Ok((out, started.elapsed().as_secs_f64()))
}

/// Execute followed by the output filter.
pub fn execute_and_filter(
    channel: &mut dyn ShellChannel,
    gateway: &dyn ChatBackend,
    params: &ChatParams,
    command: &Command,
    threshold: usize,
) -> Result<ExecutionResult, ActuationError> {
    let (out, duration_s) = execute(channel, command)?;
    let filtered = filter_output(gateway, params, &out.output, threshold);
    Ok(ExecutionResult {
        raw: out.output,
        filtered: filtered.text,
        duration_s,
        timed_out: out.timed_out,
        extraction_used: filtered.extraction_used,
        degraded: filtered.degraded,
    })
}
