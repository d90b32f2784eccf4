//! Plan wire format.
//!
//! A plan is a top-level JSON array of
//! `{"id": integer, "dependencies": [integer...], "instruction": string, "action": "shell" | "manual"}`.
//! Completions usually wrap the array in prose or code fences; the parser
//! takes the first array of objects it can decode and ignores the rest.

use serde_json::{Map, Value};
use thiserror::Error;
use tracing::warn;

use crate::task_graph::{ActionKind, TaskDraft, TaskId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanParseError {
    #[error("no task array found in completion")]
    NoPlanFound,
    #[error("task {index}: {reason}")]
    MalformedTask { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedPlan {
    pub drafts: Vec<TaskDraft>,
    pub warnings: Vec<String>,
}

const KNOWN_FIELDS: [&str; 4] = ["id", "dependencies", "instruction", "action"];

pub fn parse_plan_text(completion: &str) -> Result<ParsedPlan, PlanParseError> {
    for (start, _) in completion.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&completion[start..]).into_iter::<Value>();
        let Some(Ok(Value::Array(items))) = stream.next() else {
            continue;
        };
        if !items.iter().all(Value::is_object) {
            continue;
        }
        let mut plan = ParsedPlan::default();
        for (index, item) in items.iter().enumerate() {
            let object = item.as_object().expect("checked above");
            plan.drafts.push(parse_task(index, object, &mut plan.warnings)?);
        }
        for w in &plan.warnings {
            warn!("{w}");
        }
        return Ok(plan);
    }
    Err(PlanParseError::NoPlanFound)
}

fn parse_task(index: usize, object: &Map<String, Value>, warnings: &mut Vec<String>) -> Result<TaskDraft, PlanParseError> {
    let malformed = |reason: &str| PlanParseError::MalformedTask {
        index,
        reason: reason.to_string(),
    };

    let id = object
        .get("id")
        .ok_or_else(|| malformed("missing \"id\""))
        .and_then(|v| positive_id(v).ok_or_else(|| malformed("\"id\" must be a positive integer")))?;

    let dependencies = match object.get("dependencies") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(deps)) => deps
            .iter()
            .map(|d| positive_id(d).ok_or_else(|| malformed("dependencies must be positive integers")))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(malformed("\"dependencies\" must be an array")),
    };

    let instruction = match object.get("instruction") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(malformed("\"instruction\" must be a string")),
        None => return Err(malformed("missing \"instruction\"")),
    };

    let action = match object.get("action").and_then(Value::as_str) {
        Some("shell") => ActionKind::Shell,
        Some("manual") => ActionKind::Manual,
        other => {
            warnings.push(format!(
                "task {index}: action {} treated as manual",
                other.map_or_else(|| "<missing>".to_string(), |a| format!("{a:?}"))
            ));
            ActionKind::Manual
        }
    };

    for key in object.keys().filter(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
        warnings.push(format!("task {index}: ignoring unknown field {key:?}"));
    }

    Ok(TaskDraft {
        id,
        dependencies,
        instruction,
        action,
    })
}

fn positive_id(value: &Value) -> Option<TaskId> {
    value.as_u64().filter(|&n| n >= 1).and_then(|n| TaskId::try_from(n).ok())
}

/// Serializes drafts in wire order (`id`, `dependencies`, `instruction`, `action`).
pub fn serialize_plan(drafts: &[TaskDraft]) -> String {
    serde_json::to_string_pretty(drafts).expect("drafts serialize")
}
