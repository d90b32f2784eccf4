use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{info, warn};

use super::bridge::{OperatorChannel, OperatorRequest, RequestKind};
use super::spec::{ConfigError, Mode, PhaseName, PhaseSpec, SessionConfig};
use crate::actuation::{execute_and_filter, generate_command, ActuationError, ShellChannel};
use crate::events::{EventKind, Journal, LogError, SessionSnapshot};
use crate::llm_gateway::{ChatBackend, ChatParams};
use crate::memory_retriever::{KnowledgeChunk, MemoryRetriever};
use crate::plan_sessions::{PhaseContext, PlanFeedback, PlanOutcome, Planner, PlannerSettings, PromptLibrary, SuccessJudgement};
use crate::summarizer::{summarize_phase, update_shell_state, PhaseSummary, ShellState};
use crate::task_graph::{ActionKind, PenetrationTaskGraph, TaskId, TaskNode};
use crate::text::first_line;

pub const MANUAL_UNAVAILABLE: &str = "manual action unavailable in automatic mode";
pub const PLAN_EXHAUSTED: &str = "plan exhausted";
pub const BUDGET_EXHAUSTED: &str = "step budget exhausted";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "phase", rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Finished,
    FailedAt(PhaseName),
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionStatus::Running => f.write_str("running"),
            SessionStatus::Finished => f.write_str("finished"),
            SessionStatus::FailedAt(phase) => write!(f, "failed_at({})", phase.title().to_lowercase()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub phase: PhaseName,
    pub steps_used: u32,
    pub goal_met: bool,
    pub summary: PhaseSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_stage_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub status: SessionStatus,
    pub phases: Vec<PhaseOutcome>,
    pub total_steps: u32,
    pub shell_state: ShellState,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Log(#[from] LogError),
}

/// Everything a session talks to.
pub struct SessionDeps<'a> {
    pub gateway: &'a dyn ChatBackend,
    pub channel: &'a mut dyn ShellChannel,
    pub retriever: Option<&'a MemoryRetriever>,
    pub operator: Option<&'a dyn OperatorChannel>,
    pub journal: &'a Journal,
    pub prompts: &'a PromptLibrary,
}

/// Fresh snapshot for a session about to run with `config`.
pub fn initial_snapshot(config: &SessionConfig) -> SessionSnapshot {
    SessionSnapshot::new(config.mode, config.target_description.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    Machine,
    Operator,
    AutoFail,
}

fn route(mode: Mode, action: ActionKind) -> Route {
    match (mode, action) {
        (Mode::Manual, _) | (Mode::SemiAutomatic, ActionKind::Manual) => Route::Operator,
        (Mode::Automatic, ActionKind::Manual) => Route::AutoFail,
        (_, ActionKind::Shell) => Route::Machine,
    }
}

enum PhaseEnd {
    GoalMet,
    Failed(String),
}

/// The phase cannot go on; the note ends up in the phase outcome.
struct Stop(String);

struct Acted {
    command: Option<String>,
    result: String,
    /// Set when the outcome is already known without asking the gateway.
    verdict: Option<bool>,
    note: Option<String>,
}

#[derive(Default)]
struct PhaseState {
    graph: Option<PenetrationTaskGraph>,
    steps: u32,
    notes: BTreeMap<TaskId, String>,
}

struct Runner<'a> {
    config: &'a SessionConfig,
    gateway: &'a dyn ChatBackend,
    retriever: Option<&'a MemoryRetriever>,
    operator: Option<&'a dyn OperatorChannel>,
    journal: &'a Journal,
    prompts: &'a PromptLibrary,
    settings: PlannerSettings,
    shell: ShellState,
    total_steps: u32,
}

/// Runs reconnaissance, scanning and exploitation in order.
///
/// A phase that ends without meeting its goal stops the session.
pub fn run_session(config: &SessionConfig, deps: SessionDeps<'_>) -> Result<SessionReport, SessionError> {
    config.validate()?;
    let SessionDeps {
        gateway,
        channel,
        retriever,
        operator,
        journal,
        prompts,
    } = deps;
    let mut settings = PlannerSettings {
        preamble: config.preamble.clone(),
        ..PlannerSettings::default()
    };
    settings.params.temperature = config.temperature;
    settings.params.model_id = config.model_id.clone();
    settings.params.max_tokens = config.max_tokens;
    let mut runner = Runner {
        config,
        gateway,
        retriever,
        operator,
        journal,
        prompts,
        settings,
        shell: ShellState::default(),
        total_steps: 0,
    };

    let mut outcomes = Vec::new();
    let mut handoffs: Vec<String> = Vec::new();
    let mut status = SessionStatus::Finished;
    for phase in config.phases() {
        let prior = handoffs.join("\n\n");
        let outcome = runner.run_phase(&phase, &prior, channel)?;
        handoffs.push(outcome.summary.handoff_text());
        let met = outcome.goal_met;
        outcomes.push(outcome);
        if !met {
            status = SessionStatus::FailedAt(phase.name);
            break;
        }
    }

    let total_steps = runner.total_steps;
    let phases: Vec<Value> = outcomes
        .iter()
        .map(|o| json!({"phase": o.phase, "steps_used": o.steps_used, "goal_met": o.goal_met, "note": o.failure_stage_note}))
        .collect();
    journal.emit_with(
        EventKind::SessionFinished,
        None,
        json!({"status": status, "total_steps": total_steps, "phases": phases}),
        |s| s.status = status,
    )?;
    info!(%status, total_steps, "session finished");
    Ok(SessionReport {
        status,
        phases: outcomes,
        total_steps,
        shell_state: runner.shell,
    })
}

impl<'a> Runner<'a> {
    fn planner(&self) -> Planner<'_> {
        Planner::new(self.gateway, self.prompts, &self.settings)
    }

    fn params(&self) -> &ChatParams {
        &self.settings.params
    }

    fn aborted(&self) -> bool {
        self.operator.is_some_and(|o| o.aborted())
    }

    fn run_phase(
        &mut self,
        phase: &PhaseSpec,
        prior: &str,
        channel: &mut dyn ShellChannel,
    ) -> Result<PhaseOutcome, SessionError> {
        let target = self.config.target_description.clone();
        let ctx = PhaseContext {
            phase,
            target_description: &target,
            prior_context: prior,
        };
        let mut st = PhaseState::default();
        let end = self.phase_loop(&ctx, channel, &mut st)?;
        let summary = match &st.graph {
            Some(graph) => summarize_phase(
                self.gateway,
                self.params(),
                phase.name,
                graph,
                &self.shell,
                self.config.digest_budget,
            ),
            None => PhaseSummary::empty(phase.name, &self.shell),
        };
        let outcome = match end {
            PhaseEnd::GoalMet => {
                self.journal.emit(
                    EventKind::PhaseSummary,
                    Some(phase.name),
                    json!({"steps_used": st.steps, "summary": summary}),
                )?;
                PhaseOutcome {
                    phase: phase.name,
                    steps_used: st.steps,
                    goal_met: true,
                    summary,
                    failure_stage_note: None,
                }
            }
            PhaseEnd::Failed(note) => {
                warn!(phase = %phase.name, %note, "phase failed");
                self.journal.emit(
                    EventKind::PhaseFailed,
                    Some(phase.name),
                    json!({"steps_used": st.steps, "note": note, "summary": summary}),
                )?;
                PhaseOutcome {
                    phase: phase.name,
                    steps_used: st.steps,
                    goal_met: false,
                    summary,
                    failure_stage_note: Some(note),
                }
            }
        };
        Ok(outcome)
    }

    fn phase_loop(
        &mut self,
        ctx: &PhaseContext<'_>,
        channel: &mut dyn ShellChannel,
        st: &mut PhaseState,
    ) -> Result<PhaseEnd, SessionError> {
        let name = ctx.phase.name;
        if self.aborted() {
            return Ok(PhaseEnd::Failed("aborted by operator".into()));
        }
        let hits = self.memory_hits(ctx);
        let plan = match self.planner().generate_plan(ctx, &hits) {
            Ok(plan) => plan,
            Err(e) => return Ok(PhaseEnd::Failed(format!("planning failed: {e}"))),
        };
        self.publish_plan(EventKind::PlanGenerated, name, &plan, &hits)?;
        st.graph = Some(plan.graph);
        let mut needs_replan = false;

        loop {
            if self.aborted() {
                return Ok(PhaseEnd::Failed("aborted by operator".into()));
            }
            if st.steps >= ctx.phase.step_budget {
                return Ok(PhaseEnd::Failed(BUDGET_EXHAUSTED.into()));
            }
            let graph = st.graph.clone().expect("plan generated above");
            let graph = if needs_replan || graph.ready_tasks().is_empty() {
                needs_replan = false;
                let feedback = PlanFeedback::from_graph(&graph, &ctx.phase.goal, &st.notes);
                let hits = self.memory_hits(ctx);
                let plan = match self.planner().update_plan(ctx, &graph, &feedback, &hits) {
                    Ok(plan) => plan,
                    Err(e) => return Ok(PhaseEnd::Failed(format!("replanning failed: {e}"))),
                };
                self.publish_plan(EventKind::PlanMerged, name, &plan, &hits)?;
                st.graph = Some(plan.graph.clone());
                // notes are keyed by id and ids were re-sequenced
                st.notes.clear();
                if plan.graph.ready_tasks().is_empty() {
                    return Ok(PhaseEnd::Failed(PLAN_EXHAUSTED.into()));
                }
                plan.graph
            } else {
                graph
            };

            let task = graph.ready_tasks()[0].clone();
            let acted = match self.act(ctx, channel, &task)? {
                Ok(acted) => acted,
                Err(Stop(note)) => return Ok(PhaseEnd::Failed(note)),
            };
            st.steps += 1;
            self.total_steps += 1;

            let judgement = match acted.verdict {
                Some(success) => SuccessJudgement {
                    success,
                    ambiguous: false,
                    raw_reply: String::new(),
                },
                None => match self.planner().check_result(ctx, &task, acted.command.as_deref(), &acted.result) {
                    Ok(j) => j,
                    Err(e) => return Ok(PhaseEnd::Failed(format!("result check failed: {e}"))),
                },
            };
            let graph = graph
                .record_result(task.id, acted.command.clone(), acted.result.clone(), judgement.success)
                .expect("ready task accepts a result");
            let node = graph.get(task.id).expect("task present").clone();

            let mut goal_met = false;
            let note = if judgement.success {
                self.remember(&node);
                self.shell = update_shell_state(self.gateway, self.params(), &self.shell, &node, u64::from(self.total_steps));
                goal_met = match self.planner().check_phase_goal(ctx, &graph) {
                    Ok(j) => j.success,
                    Err(e) => {
                        warn!(error = %e, "phase goal check failed; assuming not met");
                        false
                    }
                };
                None
            } else {
                let note = acted.note.unwrap_or_else(|| {
                    if judgement.ambiguous {
                        format!("ambiguous verdict: {}", first_line(&judgement.raw_reply))
                    } else {
                        format!("judged unsuccessful: {}", first_line(&judgement.raw_reply))
                    }
                });
                st.notes.insert(task.id, note.clone());
                needs_replan = true;
                Some(note)
            };

            let (phase_steps, total_steps) = (st.steps, self.total_steps);
            self.journal.emit_with(
                EventKind::ResultChecked,
                Some(name),
                json!({
                    "task_id": task.id,
                    "success": judgement.success,
                    "ambiguous": judgement.ambiguous,
                    "verdict": judgement.raw_reply,
                    "note": note,
                    "goal_met": goal_met,
                    "phase_steps": phase_steps,
                    "total_steps": total_steps,
                    "shell_state": self.shell,
                    "graph": graph,
                }),
                |s| {
                    s.graph = Some(graph.clone());
                    s.phase_steps = phase_steps;
                    s.total_steps = total_steps;
                },
            )?;
            st.graph = Some(graph);
            if goal_met {
                return Ok(PhaseEnd::GoalMet);
            }
        }
    }

    /// Details the task and carries it out on the route its mode and action
    /// call for. Everything that reaches `Ok(Ok(_))` counts as one step.
    fn act(
        &mut self,
        ctx: &PhaseContext<'_>,
        channel: &mut dyn ShellChannel,
        task: &TaskNode,
    ) -> Result<Result<Acted, Stop>, SessionError> {
        let name = ctx.phase.name;
        let detail = match self.planner().detail_task(ctx, task, &self.shell) {
            Ok(d) => d,
            Err(e) => return Ok(Err(Stop(format!("task detail failed: {e}")))),
        };
        self.journal.emit(
            EventKind::TaskDetailed,
            Some(name),
            json!({"task_id": task.id, "instruction": task.instruction, "action": task.action, "detail": detail}),
        )?;

        match route(self.config.mode, task.action) {
            Route::AutoFail => Ok(Ok(Acted {
                command: None,
                result: MANUAL_UNAVAILABLE.into(),
                verdict: Some(false),
                note: Some(MANUAL_UNAVAILABLE.into()),
            })),
            Route::Operator => {
                let Some(operator) = self.operator else {
                    return Ok(Err(Stop("no operator attached for a manual task".into())));
                };
                let request = OperatorRequest {
                    task_id: task.id,
                    phase: name,
                    kind: RequestKind::Result,
                    instruction: task.instruction.clone(),
                    detail,
                    command: None,
                };
                self.journal
                    .emit(EventKind::ManualRequested, Some(name), json!(request))?;
                match operator.request_result(request) {
                    Ok(reply) => {
                        self.journal.emit(
                            EventKind::ManualSubmitted,
                            Some(name),
                            json!({"task_id": task.id, "kind": RequestKind::Result, "result": reply.result, "success_hint": reply.success_hint}),
                        )?;
                        Ok(Ok(Acted {
                            command: None,
                            result: reply.result,
                            verdict: reply.success_hint,
                            note: None,
                        }))
                    }
                    Err(e) => Ok(Err(Stop(e.to_string()))),
                }
            }
            Route::Machine => {
                let command = match generate_command(
                    self.gateway,
                    self.params(),
                    &detail,
                    ctx.phase,
                    &self.shell,
                    task.id,
                    self.config.command_timeout_s,
                ) {
                    Ok(c) => c,
                    Err(ActuationError::Gateway(e)) => {
                        return Ok(Err(Stop(format!("command generation failed: {e}"))))
                    }
                    Err(e) => {
                        let error = e.to_string();
                        self.journal.emit(
                            EventKind::CommandGenerated,
                            Some(name),
                            json!({"task_id": task.id, "error": error}),
                        )?;
                        return Ok(Ok(Acted {
                            command: None,
                            result: error.clone(),
                            verdict: Some(false),
                            note: Some(error),
                        }));
                    }
                };
                self.journal.emit(
                    EventKind::CommandGenerated,
                    Some(name),
                    json!({"task_id": task.id, "command": command.text, "timeout_s": command.timeout_s}),
                )?;

                if self.config.require_approval {
                    let Some(operator) = self.operator else {
                        return Ok(Err(Stop("no operator attached to approve commands".into())));
                    };
                    let request = OperatorRequest {
                        task_id: task.id,
                        phase: name,
                        kind: RequestKind::Approval,
                        instruction: task.instruction.clone(),
                        detail: detail.clone(),
                        command: Some(command.text.clone()),
                    };
                    self.journal
                        .emit(EventKind::ManualRequested, Some(name), json!(request))?;
                    if let Err(e) = operator.request_approval(request) {
                        return Ok(Err(Stop(e.to_string())));
                    }
                    self.journal.emit(
                        EventKind::ManualSubmitted,
                        Some(name),
                        json!({"task_id": task.id, "kind": RequestKind::Approval}),
                    )?;
                }

                let executed = match execute_and_filter(
                    channel,
                    self.gateway,
                    self.params(),
                    &command,
                    self.config.filter_threshold,
                ) {
                    Ok(r) => r,
                    Err(e) => return Ok(Err(Stop(format!("execution failed: {e}")))),
                };
                self.journal.emit(
                    EventKind::CommandExecuted,
                    Some(name),
                    json!({
                        "task_id": task.id,
                        "command": command.text,
                        "raw": executed.raw,
                        "filtered": executed.filtered,
                        "timed_out": executed.timed_out,
                        "extraction_used": executed.extraction_used,
                        "degraded": executed.degraded,
                    }),
                )?;
                let mut result = executed.filtered;
                if executed.timed_out {
                    result.push_str(&format!("\n[command timed out after {}s]", command.timeout_s));
                }
                Ok(Ok(Acted {
                    command: Some(command.text),
                    result,
                    verdict: None,
                    note: None,
                }))
            }
        }
    }

    fn memory_hits(&self, ctx: &PhaseContext<'_>) -> Vec<KnowledgeChunk> {
        let Some(retriever) = self.retriever.filter(|_| self.config.retrieval_enabled) else {
            return Vec::new();
        };
        let query = format!("{} {}", ctx.phase.goal, ctx.target_description);
        match retriever.query(&query) {
            Ok(hits) => hits.into_iter().map(|h| h.chunk).collect(),
            Err(e) => {
                warn!(error = %e, "retrieval failed; planning without reference knowledge");
                Vec::new()
            }
        }
    }

    fn remember(&self, task: &TaskNode) {
        if let Some(retriever) = self.retriever.filter(|_| self.config.retrieval_enabled) {
            if let Err(e) = retriever.remember(task) {
                warn!(error = %e, task = task.id, "could not store experience");
            }
        }
    }

    fn publish_plan(
        &self,
        kind: EventKind,
        phase: PhaseName,
        plan: &PlanOutcome,
        hits: &[KnowledgeChunk],
    ) -> Result<(), SessionError> {
        let ids: Vec<String> = hits.iter().map(|h| h.chunk_id.to_string()).collect();
        let graph = plan.graph.clone();
        self.journal.emit_with(
            kind,
            Some(phase),
            json!({
                "attempts": plan.attempts,
                "retries": plan.retries(),
                "rejected": plan.rejected,
                "warnings": plan.warnings,
                "memory_hits": ids,
                "graph": plan.graph,
            }),
            |s| {
                if s.current_phase != Some(phase) {
                    s.phase_steps = 0;
                }
                s.current_phase = Some(phase);
                s.graph = Some(graph);
            },
        )?;
        Ok(())
    }
}
