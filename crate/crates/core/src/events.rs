//! Append-only session event log and the live session snapshot.
//!
//! Each event is one JSON object per line:
//!
//! ```text
//! {"seq":1,"timestamp_ms":1718000000000,"kind":"plan_generated","phase":"reconnaissance","payload":{...}}
//! ```

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::phase_pipeline::{Mode, PhaseName, SessionStatus};
use crate::task_graph::PenetrationTaskGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PlanGenerated,
    PlanMerged,
    TaskDetailed,
    CommandGenerated,
    CommandExecuted,
    ResultChecked,
    ManualRequested,
    ManualSubmitted,
    PhaseSummary,
    PhaseFailed,
    SessionFinished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<PhaseName>,
    pub payload: Value,
}

impl SessionEvent {
    /// The event without its timestamp, for run-to-run comparison.
    pub fn without_timestamp(&self) -> SessionEvent {
        SessionEvent {
            timestamp_ms: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("event log {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("event log corrupt at line {line}: {reason}")]
    LogCorrupt { line: usize, reason: String },
}

/// Reads every event from a log file in seq order.
///
/// A trailing line without its newline that fails to parse is a torn write
/// and is dropped with a warning; any other bad line is an error.
pub fn replay(path: &Path) -> Result<Vec<SessionEvent>, LogError> {
    let text = std::fs::read_to_string(path).map_err(|e| LogError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    replay_str(&text)
}

pub fn replay_str(text: &str) -> Result<Vec<SessionEvent>, LogError> {
    let torn_tail = !text.is_empty() && !text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut events = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let event: SessionEvent = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(_) if torn_tail && lineno == lines.len() => {
                warn!(line = lineno, "dropping torn trailing event record");
                break;
            }
            Err(e) => {
                return Err(LogError::LogCorrupt {
                    line: lineno,
                    reason: e.to_string(),
                })
            }
        };
        let expected = events.len() as u64 + 1;
        if event.seq != expected {
            return Err(LogError::LogCorrupt {
                line: lineno,
                reason: format!("expected seq {expected}, found {}", event.seq),
            });
        }
        events.push(event);
    }
    Ok(events)
}

/// Latest published state of a session, as seen by the console.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub status: SessionStatus,
    pub mode: Mode,
    pub target_description: String,
    pub current_phase: Option<PhaseName>,
    pub phase_steps: u32,
    pub total_steps: u32,
    pub graph: Option<PenetrationTaskGraph>,
    pub last_seq: u64,
}

impl SessionSnapshot {
    pub fn new(mode: Mode, target_description: impl Into<String>) -> Self {
        Self {
            status: SessionStatus::Running,
            mode,
            target_description: target_description.into(),
            current_phase: None,
            phase_steps: 0,
            total_steps: 0,
            graph: None,
            last_seq: 0,
        }
    }
}

struct JournalInner {
    events: Vec<SessionEvent>,
    file: Option<(File, String)>,
    snapshot: SessionSnapshot,
}

/// Event log plus snapshot, updated together under one lock.
pub struct Journal {
    inner: Mutex<JournalInner>,
    changed: Condvar,
}

impl Journal {
    /// In-memory journal.
    pub fn new(snapshot: SessionSnapshot) -> Self {
        Self {
            inner: Mutex::new(JournalInner {
                events: Vec::new(),
                file: None,
                snapshot,
            }),
            changed: Condvar::new(),
        }
    }

    /// Journal that also appends to `path`, truncating any previous content.
    pub fn with_file(snapshot: SessionSnapshot, path: &Path) -> Result<Self, LogError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| LogError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        let journal = Self::new(snapshot);
        journal.lock().file = Some((file, path.display().to_string()));
        Ok(journal)
    }

    pub fn emit(&self, kind: EventKind, phase: Option<PhaseName>, payload: Value) -> Result<u64, LogError> {
        self.emit_with(kind, phase, payload, |_| {})
    }

    /// Appends an event and applies `update` to the snapshot in one step.
    pub fn emit_with(
        &self,
        kind: EventKind,
        phase: Option<PhaseName>,
        payload: Value,
        update: impl FnOnce(&mut SessionSnapshot),
    ) -> Result<u64, LogError> {
        let mut inner = self.lock();
        let event = SessionEvent {
            seq: inner.events.len() as u64 + 1,
            timestamp_ms: now_ms(),
            kind,
            phase,
            payload,
        };
        if let Some((file, path)) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&event).expect("event serializes");
            line.push('\n');
            file.write_all(line.as_bytes()).and_then(|_| file.flush()).map_err(|e| LogError::Io {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
        let seq = event.seq;
        inner.events.push(event);
        update(&mut inner.snapshot);
        inner.snapshot.last_seq = seq;
        drop(inner);
        self.changed.notify_all();
        Ok(seq)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        self.lock().snapshot.clone()
    }

    pub fn events(&self) -> Vec<SessionEvent> {
        self.lock().events.clone()
    }

    /// Events with seq greater than `since`.
    pub fn events_since(&self, since: u64) -> Vec<SessionEvent> {
        let inner = self.lock();
        inner.events.iter().skip(since as usize).cloned().collect()
    }

    /// Like `events_since`, but waits up to `wait` for at least one event.
    pub fn wait_since(&self, since: u64, wait: Duration) -> Vec<SessionEvent> {
        let deadline = Instant::now() + wait;
        let mut inner = self.lock();
        loop {
            if inner.events.len() as u64 > since {
                return inner.events.iter().skip(since as usize).cloned().collect();
            }
            let now = Instant::now();
            if now >= deadline {
                return Vec::new();
            }
            inner = self
                .changed
                .wait_timeout(inner, deadline - now)
                .expect("journal lock poisoned")
                .0;
        }
    }

    fn lock(&self) -> MutexGuard<'_, JournalInner> {
        self.inner.lock().expect("journal lock poisoned")
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
