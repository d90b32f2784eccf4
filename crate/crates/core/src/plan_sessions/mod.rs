//! The planner's two conversations.
//!
//! The plan session produces the task graph for a phase and revises it after
//! execution feedback. The task session expands a single task into concrete
//! steps and judges whether its result shows success.

mod parse;
mod templates;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

pub use parse::{parse_plan_text, serialize_plan, ParsedPlan, PlanParseError};
pub use templates::{render_prompt, PromptError, PromptLibrary, PromptTemplate, TemplateId, PLACEHOLDERS};

use crate::llm_gateway::{chat, ChatBackend, ChatMessage, ChatParams, GatewayError};
use crate::memory_retriever::KnowledgeChunk;
use crate::phase_pipeline::PhaseSpec;
use crate::summarizer::ShellState;
use crate::text::clip;
use crate::task_graph::{merge_plan, validate_graph, PenetrationTaskGraph, TaskId, TaskNode};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_REFERENCE_BUDGET: usize = 4000;
const RESULT_DIGEST_CHARS: usize = 300;
const NO_CONTEXT: &str = "No previous phases.";
const TASK_SESSION_ACK: &str = "yes";

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan generation failed after {attempts} attempt(s): {last_error}")]
    GenerationFailed { attempts: u32, last_error: String },
    #[error("cannot revise a plan with no finished tasks")]
    NothingToReflect,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerSettings {
    /// Completions requested per plan before giving up.
    pub max_attempts: u32,
    /// Character budget for the reference-knowledge section.
    pub reference_budget: usize,
    /// Operator-supplied text sent as a system message ahead of every prompt.
    pub preamble: Option<String>,
    pub params: ChatParams,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            reference_budget: DEFAULT_REFERENCE_BUDGET,
            preamble: None,
            params: ChatParams::default(),
        }
    }
}

/// What the planner knows about the phase it is working on.
#[derive(Debug, Clone, Copy)]
pub struct PhaseContext<'a> {
    pub phase: &'a PhaseSpec,
    pub target_description: &'a str,
    /// Summaries handed over by earlier phases; empty for the first one.
    pub prior_context: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub graph: PenetrationTaskGraph,
    pub attempts: u32,
    /// Why each rejected completion was rejected, in order.
    pub rejected: Vec<String>,
    pub warnings: Vec<String>,
}

impl PlanOutcome {
    pub fn retries(&self) -> u32 {
        self.attempts.saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SucceededEntry {
    pub task_id: TaskId,
    pub instruction: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedEntry {
    pub task_id: TaskId,
    pub instruction: String,
    pub digest: String,
    pub note: String,
}

/// Outcome digest the plan session reflects on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFeedback {
    pub succeeded: Vec<SucceededEntry>,
    pub failed: Vec<FailedEntry>,
    pub phase_goal: String,
}

impl PlanFeedback {
    /// Collects every finished task; `notes` carries per-task failure notes.
    pub fn from_graph(graph: &PenetrationTaskGraph, phase_goal: &str, notes: &BTreeMap<TaskId, String>) -> Self {
        let mut feedback = PlanFeedback {
            succeeded: Vec::new(),
            failed: Vec::new(),
            phase_goal: phase_goal.to_string(),
        };
        for task in graph.tasks().filter(|t| t.finished) {
            let digest = clip(task.result.as_deref().unwrap_or_default(), RESULT_DIGEST_CHARS);
            if task.success {
                feedback.succeeded.push(SucceededEntry {
                    task_id: task.id,
                    instruction: task.instruction.clone(),
                    digest,
                });
            } else {
                feedback.failed.push(FailedEntry {
                    task_id: task.id,
                    instruction: task.instruction.clone(),
                    digest,
                    note: notes.get(&task.id).cloned().unwrap_or_else(|| "judged unsuccessful".into()),
                });
            }
        }
        feedback
    }
}

/// Verdict of a yes/no judgement. Anything that is not clearly "yes" fails.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessJudgement {
    pub success: bool,
    pub ambiguous: bool,
    pub raw_reply: String,
}

/// Maps a reply to a verdict by its first alphabetic word.
pub fn parse_verdict(reply: &str) -> SuccessJudgement {
    let first = reply
        .split(|c: char| !c.is_alphabetic())
        .find(|w| !w.is_empty())
        .map(str::to_lowercase);
    let (success, ambiguous) = match first.as_deref() {
        Some("yes") => (true, false),
        Some("no") => (false, false),
        _ => (false, true),
    };
    SuccessJudgement {
        success,
        ambiguous,
        raw_reply: reply.to_string(),
    }
}

pub struct Planner<'a> {
    gateway: &'a dyn ChatBackend,
    prompts: &'a PromptLibrary,
    settings: &'a PlannerSettings,
}

impl<'a> Planner<'a> {
    pub fn new(gateway: &'a dyn ChatBackend, prompts: &'a PromptLibrary, settings: &'a PlannerSettings) -> Self {
        Self {
            gateway,
            prompts,
            settings,
        }
    }

    /// Initial plan for a phase.
    pub fn generate_plan(&self, ctx: &PhaseContext<'_>, memory_hits: &[KnowledgeChunk]) -> Result<PlanOutcome, PlanError> {
        let request = format!(
            "{}\n\nRespond with the {} phase task plan as a JSON array. {}",
            self.plan_prompt(ctx)?,
            ctx.phase.name,
            WIRE_FORMAT_HINT
        );
        self.plan_loop(request, memory_hits, |completion| {
            let parsed = parse_plan_text(completion).map_err(|e| e.to_string())?;
            if parsed.drafts.is_empty() {
                return Err("plan contains no tasks".into());
            }
            let graph = validate_graph(&parsed.drafts).map_err(|e| e.to_string())?;
            Ok((graph, parsed.warnings))
        })
    }

    /// Revised plan after execution feedback, merged so completed work survives.
    pub fn update_plan(
        &self,
        ctx: &PhaseContext<'_>,
        graph: &PenetrationTaskGraph,
        feedback: &PlanFeedback,
        memory_hits: &[KnowledgeChunk],
    ) -> Result<PlanOutcome, PlanError> {
        if !graph.has_finished_tasks() {
            return Err(PlanError::NothingToReflect);
        }
        let request = format!(
            "{}\n\n{}",
            self.plan_prompt(ctx)?,
            revise_request(ctx.phase, graph, feedback)
        );
        let old: Vec<TaskNode> = graph.tasks().cloned().collect();
        self.plan_loop(request, memory_hits, |completion| {
            let parsed = parse_plan_text(completion).map_err(|e| e.to_string())?;
            if parsed.drafts.is_empty() {
                return Err("plan contains no tasks".into());
            }
            let merged = merge_plan(&parsed.drafts, &old).map_err(|e| e.to_string())?;
            let mut warnings = parsed.warnings;
            warnings.extend(merged.warnings);
            Ok((merged.graph, warnings))
        })
    }

    /// Concrete steps for a ready task.
    pub fn detail_task(&self, ctx: &PhaseContext<'_>, task: &TaskNode, shell: &ShellState) -> Result<String, PlanError> {
        let request = format!(
            "New Task: {}\nCurrent shell state: {}\nBreak the task down into clear, actionable steps for the tester to follow.",
            task.instruction,
            shell.describe()
        );
        let reply = chat(self.gateway, &self.task_session(ctx, request)?, &self.settings.params)?;
        let reply = reply.trim();
        Ok(if reply.is_empty() { task.instruction.clone() } else { reply.to_string() })
    }

    /// Judges a (filtered) task result.
    pub fn check_result(
        &self,
        ctx: &PhaseContext<'_>,
        task: &TaskNode,
        command: Option<&str>,
        result: &str,
    ) -> Result<SuccessJudgement, PlanError> {
        let request = format!(
            "Task Result:\nTask: {}\nCommand: {}\nResult:\n{}\nWas the task successful? Begin your reply with \"yes\" or \"no\".",
            task.instruction,
            command.unwrap_or("(performed by operator)"),
            result
        );
        let reply = chat(self.gateway, &self.task_session(ctx, request)?, &self.settings.params)?;
        Ok(parse_verdict(&reply))
    }

    /// Asks whether the phase goal has been reached given the completed tasks.
    pub fn check_phase_goal(&self, ctx: &PhaseContext<'_>, graph: &PenetrationTaskGraph) -> Result<SuccessJudgement, PlanError> {
        let mut request = format!(
            "Phase goal check for the {} phase.\nPhase goal: {}\nCompleted tasks:\n",
            ctx.phase.name, ctx.phase.goal
        );
        for task in graph.tasks().filter(|t| t.is_completed()) {
            request.push_str(&format!(
                "- {} => {}\n",
                task.instruction,
                clip(task.result.as_deref().unwrap_or_default(), RESULT_DIGEST_CHARS)
            ));
        }
        request.push_str("Has the phase goal been met? Begin your reply with \"yes\" or \"no\".");
        let reply = chat(self.gateway, &self.messages(request), &self.settings.params)?;
        Ok(parse_verdict(&reply))
    }

    fn plan_prompt(&self, ctx: &PhaseContext<'_>) -> Result<String, PromptError> {
        let context = if ctx.prior_context.trim().is_empty() {
            NO_CONTEXT.to_string()
        } else {
            ctx.prior_context.to_string()
        };
        render_prompt(&self.prompts.plan_init, &bindings(ctx, context))
    }

    fn task_session(&self, ctx: &PhaseContext<'_>, request: String) -> Result<Vec<ChatMessage>, PromptError> {
        let context = if ctx.prior_context.trim().is_empty() {
            NO_CONTEXT.to_string()
        } else {
            ctx.prior_context.to_string()
        };
        let primer = render_prompt(&self.prompts.task_init, &bindings(ctx, context))?;
        let mut messages = self.preamble();
        messages.push(ChatMessage::user(primer));
        messages.push(ChatMessage::assistant(TASK_SESSION_ACK));
        messages.push(ChatMessage::user(request));
        Ok(messages)
    }

    fn messages(&self, request: String) -> Vec<ChatMessage> {
        let mut messages = self.preamble();
        messages.push(ChatMessage::user(request));
        messages
    }

    fn preamble(&self) -> Vec<ChatMessage> {
        self.settings
            .preamble
            .iter()
            .filter(|p| !p.trim().is_empty())
            .map(|p| ChatMessage::system(p.clone()))
            .collect()
    }

    fn plan_loop(
        &self,
        request: String,
        memory_hits: &[KnowledgeChunk],
        accept: impl Fn(&str) -> Result<(PenetrationTaskGraph, Vec<String>), String>,
    ) -> Result<PlanOutcome, PlanError> {
        let reference = reference_section(memory_hits, self.settings.reference_budget);
        let mut rejected: Vec<String> = Vec::new();
        for attempt in 1..=self.settings.max_attempts.max(1) {
            let mut prompt = request.clone();
            if let Some(last) = rejected.last() {
                prompt.push_str(&format!(
                    "\n\nYour previous reply was rejected: {last}\nRespond again with the complete plan as a JSON array."
                ));
            }
            prompt.push_str(&reference);
            let completion = chat(self.gateway, &self.messages(prompt), &self.settings.params)?;
            match accept(&completion) {
                Ok((graph, warnings)) => {
                    return Ok(PlanOutcome {
                        graph,
                        attempts: attempt,
                        rejected,
                        warnings,
                    })
                }
                Err(reason) => {
                    debug!(attempt, %reason, "plan rejected");
                    rejected.push(reason);
                }
            }
        }
        Err(PlanError::GenerationFailed {
            attempts: self.settings.max_attempts.max(1),
            last_error: rejected.pop().unwrap_or_default(),
        })
    }
}

const WIRE_FORMAT_HINT: &str = "Each element must be an object \
{\"id\": integer, \"dependencies\": [integer, ...], \"instruction\": string, \"action\": \"shell\" | \"manual\"}. \
Use \"shell\" for commands the attack machine can run and \"manual\" for steps a human must perform.";

fn bindings<'b>(ctx: &PhaseContext<'_>, context: String) -> BTreeMap<&'b str, String> {
    BTreeMap::from([
        ("name", ctx.phase.name.title().to_string()),
        ("init_description", ctx.target_description.to_string()),
        ("goal", ctx.phase.goal.clone()),
        ("tools", ctx.phase.tools_line()),
        ("context", context),
    ])
}

fn revise_request(phase: &PhaseSpec, graph: &PenetrationTaskGraph, feedback: &PlanFeedback) -> String {
    let mut out = format!(
        "Revise the {} phase task plan using the execution feedback below.\nPhase goal: {}\nCurrent plan:\n{}\nSucceeded tasks:\n",
        phase.name,
        feedback.phase_goal,
        serialize_plan(&graph.to_drafts())
    );
    if feedback.succeeded.is_empty() {
        out.push_str("- none\n");
    }
    for s in &feedback.succeeded {
        out.push_str(&format!("- [{}] {} => {}\n", s.task_id, s.instruction, s.digest));
    }
    out.push_str("Failed tasks:\n");
    if feedback.failed.is_empty() {
        out.push_str("- none\n");
    }
    for f in &feedback.failed {
        out.push_str(&format!("- [{}] {} => {} (note: {})\n", f.task_id, f.instruction, f.digest, f.note));
    }
    out.push_str(
        "Keep the tasks that succeeded, reanalyze the failed ones and replace them with corrected tasks where needed. \
         Respond with the complete revised plan as a JSON array. ",
    );
    out.push_str(WIRE_FORMAT_HINT);
    out
}

/// `Reference knowledge:` block, at most `budget` characters of content.
fn reference_section(hits: &[KnowledgeChunk], budget: usize) -> String {
    if hits.is_empty() || budget == 0 {
        return String::new();
    }
    let mut body = String::new();
    for hit in hits {
        body.push_str(&format!("[{}] {}\n", hit.chunk_id, hit.text.trim()));
    }
    let body: String = body.chars().take(budget).collect();
    format!("\n\nReference knowledge:\n{}", body.trim_end())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::llm_gateway::{InstrumentedBackend, ScriptMode, ScriptedBackend};
    use crate::memory_retriever::{ChunkId, ChunkKind};
    use crate::phase_pipeline::PhaseName;

    const SAMPLE_PLAN: &str = r#"[
      {"id": 1, "dependencies": [], "instruction": "SSH into a target machine located at IP address 192.168.1.104 on port 22", "action": "shell"},
      {"id": 2, "dependencies": [1], "instruction": "Search for writable directories", "action": "shell"},
      {"id": 3, "dependencies": [1], "instruction": "Enumerate running processes", "action": "shell"}]"#;

    const CYCLIC: &str = r#"[{"id": 1, "dependencies": [2], "instruction": "a", "action": "shell"},
                              {"id": 2, "dependencies": [1], "instruction": "b", "action": "shell"}]"#;

    fn phase() -> PhaseSpec {
        PhaseSpec::standard(PhaseName::Exploitation, 5)
    }

    fn ctx(phase: &PhaseSpec) -> PhaseContext<'_> {
        PhaseContext {
            phase,
            target_description: "I want to test 192.168.1.104",
            prior_context: "",
        }
    }

    fn scripted(json: &str) -> ScriptedBackend {
        ScriptedBackend::from_json(json, ScriptMode::Strict).unwrap()
    }

    fn rules(pairs: &[(&str, &str, bool)]) -> ScriptedBackend {
        let v: Vec<_> = pairs
            .iter()
            .map(|(m, r, once)| serde_json::json!({"match": m, "response": r, "once": once}))
            .collect();
        scripted(&serde_json::Value::Array(v).to_string())
    }

    #[test]
    fn generate_plan_from_sample_completion() {
        let backend = rules(&[("Respond with the Exploitation phase task plan", SAMPLE_PLAN, false)]);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let out = Planner::new(&backend, &lib, &settings).generate_plan(&ctx(&p), &[]).unwrap();
        assert_eq!(out.graph.len(), 3);
        assert_eq!(out.attempts, 1);
        assert_eq!(out.graph.ready_tasks().len(), 1);
    }

    #[test]
    fn cyclic_plan_is_retried_with_error_appended() {
        let backend = Arc::new(rules(&[("task plan", CYCLIC, true), ("task plan", SAMPLE_PLAN, false)]));
        let instrumented = InstrumentedBackend::new(backend);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let out = Planner::new(&instrumented, &lib, &settings)
            .generate_plan(&ctx(&p), &[])
            .unwrap();
        assert_eq!(out.retries(), 1);
        assert_eq!(out.rejected.len(), 1);
        assert!(out.rejected[0].contains("cyclic"));
        let prompts = instrumented.prompts();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[1].contains("Your previous reply was rejected: cyclic dependencies"));
    }

    #[test]
    fn garbage_exhausts_the_budget() {
        let backend = rules(&[("task plan", "no idea, sorry", false)]);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let err = Planner::new(&backend, &lib, &settings).generate_plan(&ctx(&p), &[]).unwrap_err();
        assert!(matches!(err, PlanError::GenerationFailed { attempts: 3, .. }), "{err}");
    }

    #[test]
    fn empty_plans_are_rejected() {
        let backend = rules(&[("task plan", "[]", false)]);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let err = Planner::new(&backend, &lib, &settings).generate_plan(&ctx(&p), &[]).unwrap_err();
        match err {
            PlanError::GenerationFailed { last_error, .. } => assert_eq!(last_error, "plan contains no tasks"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn gateway_errors_propagate() {
        let backend = rules(&[]);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let err = Planner::new(&backend, &lib, &settings).generate_plan(&ctx(&p), &[]).unwrap_err();
        assert!(matches!(err, PlanError::Gateway(GatewayError::NoRuleMatched(_))));
    }

    #[test]
    fn memory_hits_go_last_and_are_budgeted() {
        let backend = Arc::new(rules(&[("task plan", SAMPLE_PLAN, false)]));
        let instrumented = InstrumentedBackend::new(backend);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings {
            reference_budget: 40,
            ..PlannerSettings::default()
        };
        let hit = KnowledgeChunk {
            chunk_id: ChunkId::new("ssh.md", 0),
            kind: ChunkKind::Knowledge,
            text: "x".repeat(500),
            embedding: vec![],
        };
        let p = phase();
        Planner::new(&instrumented, &lib, &settings)
            .generate_plan(&ctx(&p), &[hit])
            .unwrap();
        let prompt = &instrumented.prompts()[0];
        let (head, tail) = prompt.split_once("\n\nReference knowledge:\n").unwrap();
        assert!(head.contains("Exploitation Assistant running on Kali Linux 2023"));
        assert!(tail.chars().count() <= 40);
        assert!(tail.starts_with("[ssh.md#0] xxx"));
    }

    fn executed_sample(t2_success: bool) -> PenetrationTaskGraph {
        let graph = validate_graph(&parse_plan_text(SAMPLE_PLAN).unwrap().drafts).unwrap();
        let graph = graph
            .record_result(1, Some("ssh student@192.168.1.104 -p 22".into()), "Welcome student", true)
            .unwrap();
        graph.record_result(2, Some("find / -writable".into()), "permission denied", t2_success).unwrap()
    }

    #[test]
    fn update_plan_keeps_completed_and_adds_replacement() {
        let revision = r#"[
          {"id": 1, "dependencies": [], "instruction": "Search /tmp and /var/tmp for writable directories", "action": "shell"},
          {"id": 2, "dependencies": [], "instruction": "Enumerate running processes", "action": "shell"}]"#;
        let backend = rules(&[("Revise the Exploitation phase task plan", revision, false)]);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let graph = executed_sample(false);
        let notes = BTreeMap::from([(2, "permission denied".to_string())]);
        let feedback = PlanFeedback::from_graph(&graph, &p.goal, &notes);
        assert_eq!(feedback.failed.len(), 1);
        assert_eq!(feedback.succeeded.len(), 1);

        let out = Planner::new(&backend, &lib, &settings)
            .update_plan(&ctx(&p), &graph, &feedback, &[])
            .unwrap();
        let nodes: Vec<_> = out.graph.tasks().collect();
        // hand trace: T1 completed and not re-listed -> retained first; the two new tasks follow
        assert_eq!(nodes.len(), 3);
        assert!(nodes[0].instruction.starts_with("SSH into"));
        assert_eq!(nodes[0].result.as_deref(), Some("Welcome student"));
        assert!(nodes[0].is_completed());
        assert_eq!(nodes[1].instruction, "Search /tmp and /var/tmp for writable directories");
        assert!(!nodes[1].finished);
        assert_eq!(nodes[2].instruction, "Enumerate running processes");
    }

    #[test]
    fn relisting_the_same_plan_is_a_fixed_point() {
        let graph = executed_sample(true);
        let backend = rules(&[("Revise the", SAMPLE_PLAN, false)]);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let feedback = PlanFeedback::from_graph(&graph, &p.goal, &BTreeMap::new());
        let out = Planner::new(&backend, &lib, &settings)
            .update_plan(&ctx(&p), &graph, &feedback, &[])
            .unwrap();
        assert_eq!(out.graph, graph);
    }

    #[test]
    fn update_rejects_empty_revisions_and_unfinished_graphs() {
        let backend = rules(&[("Revise the", "[]", false)]);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let graph = executed_sample(true);
        let feedback = PlanFeedback::from_graph(&graph, &p.goal, &BTreeMap::new());
        let planner = Planner::new(&backend, &lib, &settings);
        assert!(matches!(
            planner.update_plan(&ctx(&p), &graph, &feedback, &[]),
            Err(PlanError::GenerationFailed { .. })
        ));
        let fresh = validate_graph(&parse_plan_text(SAMPLE_PLAN).unwrap().drafts).unwrap();
        assert!(matches!(
            planner.update_plan(&ctx(&p), &fresh, &feedback, &[]),
            Err(PlanError::NothingToReflect)
        ));
    }

    #[test]
    fn detail_task_uses_primed_task_session() {
        let backend = Arc::new(rules(&[(
            "New Task: SSH into",
            "1. Run ssh student@192.168.1.104 -p 22\n2. Enter password 'password' when prompted",
            false,
        )]));
        let instrumented = InstrumentedBackend::new(backend);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let graph = validate_graph(&parse_plan_text(SAMPLE_PLAN).unwrap().drafts).unwrap();
        let detail = Planner::new(&instrumented, &lib, &settings)
            .detail_task(&ctx(&p), graph.get(1).unwrap(), &ShellState::default())
            .unwrap();
        assert!(detail.contains("192.168.1.104") && detail.contains("-p 22") && detail.contains("password"));
    }

    #[test]
    fn detail_echo_and_failure() {
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let graph = validate_graph(&parse_plan_text(SAMPLE_PLAN).unwrap().drafts).unwrap();
        let task = graph.get(3).unwrap();
        let echo = rules(&[("New Task:", "Enumerate running processes", false)]);
        let detail = Planner::new(&echo, &lib, &settings)
            .detail_task(&ctx(&p), task, &ShellState::default())
            .unwrap();
        assert_eq!(detail, task.instruction);

        let down = rules(&[]);
        assert!(Planner::new(&down, &lib, &settings)
            .detail_task(&ctx(&p), task, &ShellState::default())
            .is_err());
        assert_eq!(graph.ready_tasks()[0].id, 1);
    }

    #[test]
    fn verdict_mapping() {
        assert!(parse_verdict("Yes, ports identified.").success);
        let no = parse_verdict("No -- the scan failed.");
        assert!(!no.success && !no.ambiguous);
        let unclear = parse_verdict("The result indicates partial progress");
        assert!(!unclear.success && unclear.ambiguous);
        assert!(parse_verdict("  **YES**").success);
        assert!(parse_verdict("").ambiguous);
        assert!(parse_verdict("yesterday it worked").ambiguous);
    }

    #[test]
    fn check_result_asks_with_the_result() {
        let backend = rules(&[("Task Result:", "Yes, ports identified.", false)]);
        let lib = PromptLibrary::default();
        let settings = PlannerSettings::default();
        let p = phase();
        let graph = validate_graph(&parse_plan_text(SAMPLE_PLAN).unwrap().drafts).unwrap();
        let j = Planner::new(&backend, &lib, &settings)
            .check_result(&ctx(&p), graph.get(1).unwrap(), Some("nmap"), "22/tcp open")
            .unwrap();
        assert!(j.success && !j.ambiguous);
    }

    #[test]
    fn preamble_is_a_system_message() {
        struct Capture(std::sync::Mutex<Vec<ChatMessage>>);
        impl ChatBackend for Capture {
            fn complete(&self, m: &[ChatMessage], _: &ChatParams) -> Result<String, GatewayError> {
                *self.0.lock().unwrap() = m.to_vec();
                Ok("no".into())
            }
        }
        let cap = Capture(Default::default());
        let lib = PromptLibrary::default();
        let settings = PlannerSettings {
            preamble: Some("operator preamble".into()),
            ..PlannerSettings::default()
        };
        let p = phase();
        let graph = validate_graph(&parse_plan_text(SAMPLE_PLAN).unwrap().drafts).unwrap();
        Planner::new(&cap, &lib, &settings)
            .check_result(&ctx(&p), graph.get(1).unwrap(), None, "x")
            .unwrap();
        let m = cap.0.lock().unwrap().clone();
        assert_eq!(m.len(), 4);
        assert_eq!(m[0], ChatMessage::system("operator preamble"));
        assert!(m[1].content.contains("Reply with \"yes\" if you understood."));
        assert_eq!(m[2], ChatMessage::assistant("yes"));
    }
}
