//! The human side of the pipeline: manual results and command approvals.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::PhaseName;
use crate::task_graph::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    /// The operator performs the task and reports what happened.
    Result,
    /// The operator confirms a generated command before it runs.
    Approval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorRequest {
    pub task_id: TaskId,
    pub phase: PhaseName,
    pub kind: RequestKind,
    pub instruction: String,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorReply {
    pub result: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_hint: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OperatorError {
    #[error("aborted by operator")]
    Aborted,
    #[error("no operator response within {0:?}")]
    TimedOut(Duration),
    #[error("no operator attached")]
    Unavailable,
}

/// Where the pipeline sends work that needs a person.
pub trait OperatorChannel: Send + Sync {
    /// Blocks until the operator reports a result for `request`.
    fn request_result(&self, request: OperatorRequest) -> Result<OperatorReply, OperatorError>;
    /// Blocks until the operator approves the command in `request`.
    fn request_approval(&self, request: OperatorRequest) -> Result<(), OperatorError>;
    fn aborted(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("task {0} has no pending request")]
    NotPending(TaskId),
    #[error("task {task} is waiting for {expected:?}, not {got:?}")]
    WrongKind {
        task: TaskId,
        expected: RequestKind,
        got: RequestKind,
    },
    #[error("session was aborted")]
    Aborted,
}

enum Answer {
    Result(OperatorReply),
    Approved,
}

struct Slot {
    request: OperatorRequest,
    answer: Option<Answer>,
}

#[derive(Default)]
struct BridgeState {
    pending: BTreeMap<TaskId, Slot>,
    aborted: bool,
}

/// Thread-safe meeting point between a session thread and the HTTP API.
#[derive(Default)]
pub struct ConsoleBridge {
    state: Mutex<BridgeState>,
    changed: Condvar,
    wait_timeout: Option<Duration>,
}

impl ConsoleBridge {
    pub fn new(wait_timeout: Option<Duration>) -> Self {
        Self {
            wait_timeout,
            ..Self::default()
        }
    }

    /// Requests still waiting for an answer, by task id.
    pub fn pending(&self) -> Vec<OperatorRequest> {
        self.lock()
            .pending
            .values()
            .filter(|s| s.answer.is_none())
            .map(|s| s.request.clone())
            .collect()
    }

    pub fn submit_result(&self, task_id: TaskId, reply: OperatorReply) -> Result<(), SubmitError> {
        self.answer(task_id, RequestKind::Result, Answer::Result(reply))
    }

    pub fn approve(&self, task_id: TaskId) -> Result<(), SubmitError> {
        self.answer(task_id, RequestKind::Approval, Answer::Approved)
    }

    pub fn abort(&self) {
        self.lock().aborted = true;
        self.changed.notify_all();
    }

    fn answer(&self, task_id: TaskId, kind: RequestKind, answer: Answer) -> Result<(), SubmitError> {
        let mut state = self.lock();
        if state.aborted {
            return Err(SubmitError::Aborted);
        }
        let slot = state
            .pending
            .get_mut(&task_id)
            .filter(|s| s.answer.is_none())
            .ok_or(SubmitError::NotPending(task_id))?;
        if slot.request.kind != kind {
            return Err(SubmitError::WrongKind {
                task: task_id,
                expected: slot.request.kind,
                got: kind,
            });
        }
        slot.answer = Some(answer);
        drop(state);
        self.changed.notify_all();
        Ok(())
    }

    fn wait(&self, request: OperatorRequest) -> Result<Answer, OperatorError> {
        let task_id = request.task_id;
        let mut state = self.lock();
        if state.aborted {
            return Err(OperatorError::Aborted);
        }
        state.pending.insert(task_id, Slot { request, answer: None });
        let deadline = self.wait_timeout.map(|t| Instant::now() + t);
        loop {
            if state.aborted {
                state.pending.remove(&task_id);
                return Err(OperatorError::Aborted);
            }
            if state.pending.get(&task_id).is_some_and(|s| s.answer.is_some()) {
                let slot = state.pending.remove(&task_id).expect("slot present");
                return Ok(slot.answer.expect("answer present"));
            }
            state = match deadline {
                None => self.changed.wait(state).expect("bridge lock poisoned"),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        state.pending.remove(&task_id);
                        return Err(OperatorError::TimedOut(self.wait_timeout.unwrap_or_default()));
                    }
                    self.changed
                        .wait_timeout(state, deadline - now)
                        .expect("bridge lock poisoned")
                        .0
                }
            };
        }
    }

    fn lock(&self) -> MutexGuard<'_, BridgeState> {
        self.state.lock().expect("bridge lock poisoned")
    }
}

impl OperatorChannel for ConsoleBridge {
    fn request_result(&self, request: OperatorRequest) -> Result<OperatorReply, OperatorError> {
        match self.wait(request)? {
            Answer::Result(reply) => Ok(reply),
            Answer::Approved => unreachable!("kind checked on submit"),
        }
    }

    fn request_approval(&self, request: OperatorRequest) -> Result<(), OperatorError> {
        match self.wait(request)? {
            Answer::Approved => Ok(()),
            Answer::Result(_) => unreachable!("kind checked on submit"),
        }
    }

    fn aborted(&self) -> bool {
        self.lock().aborted
    }
}
