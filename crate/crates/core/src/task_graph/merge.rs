//! Plan merging after reflection.
//!
//! Completed work is never thrown away: completed tasks that the revised plan
//! no longer mentions are kept as-is, completed tasks the revised plan lists
//! again are reused with their recorded results, and everything else in the
//! revised plan becomes a fresh pending task. Failed and pending tasks of the
//! old plan survive only if the revised plan lists them again.
//!
//! Tasks are matched by normalized instruction text because planner ids are
//! renumbered freely between revisions. Matching is one-to-one in list order,
//! so two completed tasks with the same instruction are both conserved.

use std::collections::{BTreeSet, HashMap};

use tracing::warn;

use super::{validate_graph, GraphError, PenetrationTaskGraph, TaskDraft, TaskId, TaskNode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub graph: PenetrationTaskGraph,
    /// Dependencies removed while remapping ids.
    pub warnings: Vec<String>,
}

/// Case-folded, whitespace-collapsed instruction used as the cross-revision key.
pub fn normalize_instruction(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

enum Origin<'a> {
    Retained(&'a TaskNode),
    Reused(&'a TaskNode, &'a TaskDraft),
    Fresh(&'a TaskDraft),
}

/// Merges a revised plan into the tasks of the current one.
///
/// Output order is retained completed tasks (old order) followed by the
/// revised plan's order; ids are re-sequenced `1..=n` and every dependency is
/// remapped. Dependencies that point at dropped tasks are removed, as are
/// dependencies of a reused completed task on anything that has not
/// completed.
pub fn merge_plan(new_tasks: &[TaskDraft], old_tasks: &[TaskNode]) -> Result<MergeOutcome, GraphError> {
    if !new_tasks.is_empty() {
        validate_graph(new_tasks)?;
    }

    let completed: Vec<&TaskNode> = old_tasks.iter().filter(|t| t.is_completed()).collect();
    let mut claimed = vec![false; completed.len()];
    let matches: Vec<Option<usize>> = new_tasks
        .iter()
        .map(|draft| {
            let key = normalize_instruction(&draft.instruction);
            let hit = completed
                .iter()
                .enumerate()
                .position(|(i, t)| !claimed[i] && normalize_instruction(&t.instruction) == key);
            if let Some(i) = hit {
                claimed[i] = true;
            }
            hit
        })
        .collect();

    let mut plan: Vec<Origin<'_>> = completed
        .iter()
        .zip(&claimed)
        .filter(|(_, &c)| !c)
        .map(|(t, _)| Origin::Retained(t))
        .collect();
    for (draft, hit) in new_tasks.iter().zip(&matches) {
        plan.push(match hit {
            Some(i) => Origin::Reused(completed[*i], draft),
            None => Origin::Fresh(draft),
        });
    }

    let mut old_map: HashMap<TaskId, TaskId> = HashMap::new();
    let mut new_map: HashMap<TaskId, TaskId> = HashMap::new();
    for (pos, origin) in plan.iter().enumerate() {
        let merged_id = pos as TaskId + 1;
        match origin {
            Origin::Retained(old) => {
                old_map.insert(old.id, merged_id);
            }
            Origin::Reused(old, draft) => {
                old_map.insert(old.id, merged_id);
                new_map.insert(draft.id, merged_id);
            }
            Origin::Fresh(draft) => {
                new_map.insert(draft.id, merged_id);
            }
        }
    }
    let completed_ids: BTreeSet<TaskId> = plan
        .iter()
        .enumerate()
        .filter(|(_, o)| !matches!(o, Origin::Fresh(_)))
        .map(|(pos, _)| pos as TaskId + 1)
        .collect();

    let mut warnings = Vec::new();
    let mut nodes = Vec::with_capacity(plan.len());
    for (pos, origin) in plan.iter().enumerate() {
        let merged_id = pos as TaskId + 1;
        let node = match origin {
            Origin::Retained(old) => {
                let mut deps = BTreeSet::new();
                for dep in &old.dependencies {
                    match old_map.get(dep) {
                        Some(&mapped) => {
                            deps.insert(mapped);
                        }
                        None => warnings.push(format!(
                            "task {merged_id} ({}): dropped dependency on removed task {dep}",
                            old.instruction
                        )),
                    }
                }
                TaskNode {
                    id: merged_id,
                    dependencies: deps,
                    ..(*old).clone()
                }
            }
            Origin::Reused(old, draft) => {
                let mut deps = BTreeSet::new();
                for dep in &draft.dependencies {
                    let mapped = new_map[dep];
                    if completed_ids.contains(&mapped) {
                        deps.insert(mapped);
                    } else {
                        warnings.push(format!(
                            "task {merged_id} ({}): completed task cannot depend on pending task {mapped}",
                            old.instruction
                        ));
                    }
                }
                TaskNode {
                    id: merged_id,
                    dependencies: deps,
                    ..(*old).clone()
                }
            }
            Origin::Fresh(draft) => TaskNode {
                id: merged_id,
                instruction: draft.instruction.clone(),
                action: draft.action,
                dependencies: draft.dependencies.iter().map(|d| new_map[d]).collect(),
                command: None,
                result: None,
                finished: false,
                success: false,
            },
        };
        nodes.push(node);
    }

    for w in &warnings {
        warn!("{w}");
    }
    let graph = PenetrationTaskGraph::from_nodes(nodes)?;
    Ok(MergeOutcome { graph, warnings })
}

#[cfg(test)]
mod tests {
    use super::super::ActionKind;
    use super::*;

    fn completed(id: TaskId, instruction: &str, deps: &[TaskId], result: &str) -> TaskNode {
        TaskNode {
            id,
            instruction: instruction.into(),
            action: ActionKind::Shell,
            dependencies: deps.iter().copied().collect(),
            command: Some(format!("cmd-{id}")),
            result: Some(result.into()),
            finished: true,
            success: true,
        }
    }

    fn failed(id: TaskId, instruction: &str, deps: &[TaskId]) -> TaskNode {
        TaskNode {
            success: false,
            result: Some("permission denied".into()),
            ..completed(id, instruction, deps, "")
        }
    }

    #[test]
    fn empty_old_is_identity() {
        let new = vec![
            TaskDraft::new(1, vec![], "A", ActionKind::Shell),
            TaskDraft::new(2, vec![1], "B", ActionKind::Manual),
        ];
        let out = merge_plan(&new, &[]).unwrap();
        let nodes = out.graph.into_nodes();
        assert_eq!(nodes.len(), 2);
        assert_eq!(nodes[0].instruction, "A");
        assert_eq!(nodes[1].dependencies, BTreeSet::from([1]));
        assert!(nodes.iter().all(|n| !n.finished));
    }

    #[test]
    fn unlisted_completed_task_is_retained_first() {
        let old = vec![completed(1, "T1", &[], "r1")];
        let new = vec![TaskDraft::new(1, vec![], "T2", ActionKind::Shell)];
        let nodes = merge_plan(&new, &old).unwrap().graph.into_nodes();
        assert_eq!(nodes.len(), 2);
        assert_eq!(nodes[0].instruction, "T1");
        assert_eq!(nodes[0].result.as_deref(), Some("r1"));
        assert!(nodes[0].is_completed());
        assert_eq!(nodes[1].instruction, "T2");
        assert!(!nodes[1].finished);
    }

    #[test]
    fn relisted_completed_is_reused_and_failed_dropped() {
        let old = vec![completed(1, "Scan ports", &[], "22/tcp open"), failed(2, "Crack ssh", &[1])];
        // renumbered plan: the replacement runs first and the old task now depends on nothing
        let new = vec![
            TaskDraft::new(5, vec![], "Try default creds", ActionKind::Shell),
            TaskDraft::new(6, vec![], "  scan   PORTS ", ActionKind::Shell),
        ];
        let out = merge_plan(&new, &old).unwrap();
        let nodes = out.graph.into_nodes();
        assert_eq!(nodes.len(), 2);
        assert_eq!(nodes[0].instruction, "Try default creds");
        assert!(!nodes[0].finished);
        assert_eq!(nodes[1].id, 2);
        assert_eq!(nodes[1].instruction, "Scan ports");
        assert_eq!(nodes[1].result.as_deref(), Some("22/tcp open"));
        assert_eq!(nodes[1].command.as_deref(), Some("cmd-1"));
        assert!(nodes.iter().all(|n| n.instruction != "Crack ssh"));
    }

    #[test]
    fn reused_task_takes_new_dependencies_among_completed() {
        let old = vec![completed(1, "login", &[], "ok"), completed(2, "list dirs", &[1], "/tmp")];
        let new = vec![
            TaskDraft::new(1, vec![], "login", ActionKind::Shell),
            TaskDraft::new(2, vec![], "list dirs", ActionKind::Shell),
            TaskDraft::new(3, vec![2], "write to /tmp", ActionKind::Shell),
        ];
        let out = merge_plan(&new, &old).unwrap();
        assert!(out.warnings.is_empty());
        let g = out.graph;
        assert!(g.get(2).unwrap().dependencies.is_empty());
        assert_eq!(g.get(3).unwrap().dependencies, BTreeSet::from([2]));
        assert_eq!(g.ready_tasks().iter().map(|t| t.id).collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn completed_task_never_depends_on_pending_work() {
        let old = vec![completed(1, "login", &[], "ok")];
        let new = vec![
            TaskDraft::new(1, vec![], "recon again", ActionKind::Shell),
            TaskDraft::new(2, vec![1], "login", ActionKind::Shell),
        ];
        let out = merge_plan(&new, &old).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.graph.get(2).unwrap().dependencies.is_empty());
    }

    #[test]
    fn retained_dependency_on_dropped_task_is_removed() {
        // a completed task whose completed dependency is still present is kept intact
        let old = vec![completed(1, "a", &[], "ra"), completed(2, "b", &[1], "rb")];
        let out = merge_plan(&[], &old).unwrap();
        assert_eq!(out.graph.get(2).unwrap().dependencies, BTreeSet::from([1]));
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn duplicate_completed_instructions_are_both_conserved() {
        let old = vec![completed(1, "ls", &[], "first"), completed(2, "LS", &[], "second")];
        let new = vec![TaskDraft::new(1, vec![], "ls", ActionKind::Shell)];
        let nodes = merge_plan(&new, &old).unwrap().graph.into_nodes();
        let results: Vec<_> = nodes.iter().filter_map(|n| n.result.as_deref()).collect();
        assert_eq!(nodes.len(), 2);
        assert!(results.contains(&"first") && results.contains(&"second"));
    }

    #[test]
    fn invalid_new_plan_propagates() {
        let new = vec![
            TaskDraft::new(1, vec![2], "a", ActionKind::Shell),
            TaskDraft::new(2, vec![1], "b", ActionKind::Shell),
        ];
        assert!(matches!(merge_plan(&new, &[]), Err(GraphError::CyclicDependencies(_))));
        assert_eq!(merge_plan(&[], &[]).unwrap_err(), GraphError::EmptyPlan);
    }

    #[test]
    fn normalization_folds_case_and_space() {
        assert_eq!(normalize_instruction("  Enumerate\tOpen\nPorts "), "enumerate open ports");
    }
}
