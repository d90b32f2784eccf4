//! Staged penetration-test orchestration.
//!
//! A session runs three roles in order (reconnaissance, scanning,
//! exploitation). Each role plans its work as a task graph, turns ready tasks
//! into shell commands, runs them on an execution channel, judges the
//! outcome, and revises its plan after failures. Completed findings are
//! summarized and handed to the next role.

pub mod actuation;
pub mod events;
pub mod llm_gateway;
pub mod memory_retriever;
pub mod phase_pipeline;
pub mod plan_sessions;
pub mod sandbox_target;
pub mod summarizer;
pub mod task_graph;
mod text;
