//! Penetration task graph.
//!
//! A plan is a set of tasks with dependency edges (an edge runs from each
//! dependency to the task that needs it). Graphs are immutable values:
//! recording a result or merging a revised plan produces a new graph.

mod merge;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use merge::{merge_plan, normalize_instruction, MergeOutcome};

/// Identifier of a task inside one graph. Always `>= 1`.
pub type TaskId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Shell,
    Manual,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionKind::Shell => f.write_str("shell"),
            ActionKind::Manual => f.write_str("manual"),
        }
    }
}

/// A task as emitted by the planner, before any execution state exists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDraft {
    pub id: TaskId,
    pub dependencies: Vec<TaskId>,
    pub instruction: String,
    pub action: ActionKind,
}

impl TaskDraft {
    pub fn new(id: TaskId, dependencies: Vec<TaskId>, instruction: impl Into<String>, action: ActionKind) -> Self {
        Self {
            id,
            dependencies,
            instruction: instruction.into(),
            action,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub id: TaskId,
    pub instruction: String,
    pub action: ActionKind,
    pub dependencies: BTreeSet<TaskId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<String>,
    pub finished: bool,
    pub success: bool,
}

impl TaskNode {
    fn from_draft(draft: &TaskDraft) -> Self {
        Self {
            id: draft.id,
            instruction: draft.instruction.clone(),
            action: draft.action,
            dependencies: draft.dependencies.iter().copied().collect(),
            command: None,
            result: None,
            finished: false,
            success: false,
        }
    }

    /// Finished with a successful outcome.
    pub fn is_completed(&self) -> bool {
        self.finished && self.success
    }

    pub fn is_failed(&self) -> bool {
        self.finished && !self.success
    }

    pub fn to_draft(&self) -> TaskDraft {
        TaskDraft {
            id: self.id,
            dependencies: self.dependencies.iter().copied().collect(),
            instruction: self.instruction.clone(),
            action: self.action,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("plan contains no tasks")]
    EmptyPlan,
    #[error("task id must be a positive integer, got {0}")]
    InvalidId(TaskId),
    #[error("duplicate task id {0}")]
    DuplicateId(TaskId),
    #[error("task {0} has an empty instruction")]
    EmptyInstruction(TaskId),
    #[error("task {task} depends on unknown task {dependency}")]
    UnknownDependency { task: TaskId, dependency: TaskId },
    #[error("cyclic dependencies: {}", format_cycle(.0))]
    CyclicDependencies(Vec<TaskId>),
    #[error("task {task} is marked finished but dependency {dependency} has not succeeded")]
    FinishedBeforeDependencies { task: TaskId, dependency: TaskId },
    #[error("task {0} is marked successful but not finished")]
    SuccessWithoutFinish(TaskId),
    #[error("task {0} is a manual action and cannot carry a command")]
    CommandOnManualTask(TaskId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {0} is already finished")]
    AlreadyFinished(TaskId),
}

fn format_cycle(cycle: &[TaskId]) -> String {
    let mut parts: Vec<String> = cycle.iter().map(|id| id.to_string()).collect();
    if let Some(first) = cycle.first() {
        parts.push(first.to_string());
    }
    parts.join(" -> ")
}

/// Directed acyclic graph of tasks plus their execution state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct PenetrationTaskGraph {
    tasks: BTreeMap<TaskId, TaskNode>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    tasks: Vec<TaskNode>,
}

impl TryFrom<GraphRepr> for PenetrationTaskGraph {
    type Error = GraphError;

    fn try_from(repr: GraphRepr) -> Result<Self, Self::Error> {
        PenetrationTaskGraph::from_nodes(repr.tasks)
    }
}

impl From<PenetrationTaskGraph> for GraphRepr {
    fn from(graph: PenetrationTaskGraph) -> Self {
        GraphRepr {
            tasks: graph.tasks.into_values().collect(),
        }
    }
}

/// Builds a fresh graph from planner drafts; every task starts pending.
pub fn validate_graph(drafts: &[TaskDraft]) -> Result<PenetrationTaskGraph, GraphError> {
    PenetrationTaskGraph::from_nodes(drafts.iter().map(TaskNode::from_draft).collect())
}

impl PenetrationTaskGraph {
    /// Validates a list of nodes that may already carry execution state.
    pub fn from_nodes(nodes: Vec<TaskNode>) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::EmptyPlan);
        }
        let mut tasks = BTreeMap::new();
        for node in nodes {
            if node.id == 0 {
                return Err(GraphError::InvalidId(0));
            }
            if node.instruction.trim().is_empty() {
                return Err(GraphError::EmptyInstruction(node.id));
            }
            if node.success && !node.finished {
                return Err(GraphError::SuccessWithoutFinish(node.id));
            }
            if node.action == ActionKind::Manual && node.command.is_some() {
                return Err(GraphError::CommandOnManualTask(node.id));
            }
            let id = node.id;
            if tasks.insert(id, node).is_some() {
                return Err(GraphError::DuplicateId(id));
            }
        }
        for node in tasks.values() {
            for &dep in &node.dependencies {
                if dep == node.id {
                    return Err(GraphError::CyclicDependencies(vec![dep]));
                }
                if !tasks.contains_key(&dep) {
                    return Err(GraphError::UnknownDependency {
                        task: node.id,
                        dependency: dep,
                    });
                }
            }
        }
        if let Some(cycle) = find_cycle(&tasks) {
            return Err(GraphError::CyclicDependencies(cycle));
        }
        for node in tasks.values().filter(|n| n.is_completed()) {
            if let Some(&dep) = node.dependencies.iter().find(|d| !tasks[d].is_completed()) {
                return Err(GraphError::FinishedBeforeDependencies { task: node.id, dependency: dep });
            }
        }
        Ok(Self { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: TaskId) -> Option<&TaskNode> {
        self.tasks.get(&id)
    }

    /// Tasks in ascending id order.
    pub fn tasks(&self) -> impl Iterator<Item = &TaskNode> {
        self.tasks.values()
    }

    /// `(dependency, dependent)` pairs in ascending order.
    pub fn edges(&self) -> Vec<(TaskId, TaskId)> {
        let mut edges: Vec<_> = self
            .tasks
            .values()
            .flat_map(|n| n.dependencies.iter().map(move |&d| (d, n.id)))
            .collect();
        edges.sort_unstable();
        edges
    }

    pub fn to_drafts(&self) -> Vec<TaskDraft> {
        self.tasks.values().map(TaskNode::to_draft).collect()
    }

    pub fn into_nodes(self) -> Vec<TaskNode> {
        self.tasks.into_values().collect()
    }

    pub fn has_finished_tasks(&self) -> bool {
        self.tasks.values().any(|n| n.finished)
    }

    pub fn all_finished(&self) -> bool {
        self.tasks.values().all(|n| n.finished)
    }

    /// Pending tasks whose dependencies all succeeded, ascending by id.
    ///
    /// Dependents of a failed task never become ready; only a replan can
    /// remove or rewire them.
    pub fn ready_tasks(&self) -> Vec<&TaskNode> {
        self.tasks
            .values()
            .filter(|n| !n.finished)
            .filter(|n| n.dependencies.iter().all(|d| self.tasks[d].is_completed()))
            .collect()
    }

    /// Returns a new graph with `task_id` finished.
    ///
    /// A success can only be recorded once every dependency has succeeded;
    /// failures may be recorded at any time.
    pub fn record_result(
        &self,
        task_id: TaskId,
        command: Option<String>,
        result: impl Into<String>,
        success: bool,
    ) -> Result<Self, GraphError> {
        let node = self.tasks.get(&task_id).ok_or(GraphError::UnknownTask(task_id))?;
        if node.finished {
            return Err(GraphError::AlreadyFinished(task_id));
        }
        if command.is_some() && node.action == ActionKind::Manual {
            return Err(GraphError::CommandOnManualTask(task_id));
        }
        if success {
            if let Some(&dep) = node.dependencies.iter().find(|d| !self.tasks[d].is_completed()) {
                return Err(GraphError::FinishedBeforeDependencies { task: task_id, dependency: dep });
            }
        }
        let mut next = self.clone();
        let node = next.tasks.get_mut(&task_id).expect("checked above");
        if command.is_some() {
            node.command = command;
        }
        node.result = Some(result.into());
        node.finished = true;
        node.success = success;
        Ok(next)
    }
}

/// Free-function form of [`PenetrationTaskGraph::ready_tasks`].
pub fn ready_tasks(graph: &PenetrationTaskGraph) -> Vec<&TaskNode> {
    graph.ready_tasks()
}

/// Free-function form of [`PenetrationTaskGraph::record_result`].
pub fn record_result(
    graph: &PenetrationTaskGraph,
    task_id: TaskId,
    command: Option<String>,
    result: impl Into<String>,
    success: bool,
) -> Result<PenetrationTaskGraph, GraphError> {
    graph.record_result(task_id, command, result, success)
}

/// Iterative three-colour DFS over dependency edges; returns one cycle.
fn find_cycle(tasks: &BTreeMap<TaskId, TaskNode>) -> Option<Vec<TaskId>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let mut marks: BTreeMap<TaskId, Mark> = tasks.keys().map(|&id| (id, Mark::White)).collect();
    for &root in tasks.keys() {
        if marks[&root] != Mark::White {
            continue;
        }
        let mut path: Vec<TaskId> = vec![root];
        let mut stack: Vec<std::collections::btree_set::Iter<'_, TaskId>> = vec![tasks[&root].dependencies.iter()];
        marks.insert(root, Mark::Grey);
        while let Some(iter) = stack.last_mut() {
            match iter.next() {
                Some(&dep) => match marks[&dep] {
                    Mark::White => {
                        marks.insert(dep, Mark::Grey);
                        path.push(dep);
                        stack.push(tasks[&dep].dependencies.iter());
                    }
                    Mark::Grey => {
                        let start = path.iter().position(|&p| p == dep).expect("grey node is on the path");
                        let mut cycle = path[start..].to_vec();
                        // path follows dependency edges; report in execution order
                        cycle.reverse();
                        return Some(cycle);
                    }
                    Mark::Black => {}
                },
                None => {
                    let done = path.pop().expect("path tracks stack");
                    marks.insert(done, Mark::Black);
                    stack.pop();
                }
            }
        }
    }
    None
}
