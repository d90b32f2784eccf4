//! Prompt templates.
//!
//! Templates are plain text with `{name}`, `{init_description}`, `{goal}`,
//! `{tools}` and `{context}` placeholders. Any other brace text is left
//! alone, so bodies may embed JSON examples.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PLACEHOLDERS: [&str; 5] = ["name", "init_description", "goal", "tools", "context"];

static PLACEHOLDER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").expect("static regex"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    PlanInit,
    TaskInit,
    BaseInit,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [TemplateId::PlanInit, TemplateId::TaskInit, TemplateId::BaseInit];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::PlanInit => "plan_init.txt",
            TemplateId::TaskInit => "task_init.txt",
            TemplateId::BaseInit => "base_init.txt",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::PlanInit => include_str!("../../assets/templates/plan_init.txt"),
            TemplateId::TaskInit => include_str!("../../assets/templates/task_init.txt"),
            TemplateId::BaseInit => include_str!("../../assets/templates/base_init.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".txt"))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("template {template} uses unknown placeholder {{{placeholder}}}")]
    UnknownPlaceholder { template: TemplateId, placeholder: String },
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    template_id: TemplateId,
    body: String,
}

impl PromptTemplate {
    pub fn new(template_id: TemplateId, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        for cap in PLACEHOLDER_RE.captures_iter(&body) {
            let name = &cap[1];
            if !PLACEHOLDERS.contains(&name) {
                return Err(PromptError::UnknownPlaceholder {
                    template: template_id,
                    placeholder: name.to_string(),
                });
            }
        }
        Ok(Self { template_id, body })
    }

    pub fn builtin(template_id: TemplateId) -> Self {
        Self::new(template_id, template_id.builtin_body()).expect("built-in templates are well formed")
    }

    pub fn id(&self) -> TemplateId {
        self.template_id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Placeholders used by this template, deduplicated.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut names: Vec<&str> = PLACEHOLDER_RE
            .captures_iter(&self.body)
            .map(|c| c.get(1).expect("group 1").as_str())
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

/// Single-pass substitution: bound values are never re-expanded.
pub fn render_prompt(template: &PromptTemplate, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    if let Some(missing) = template.placeholders().into_iter().find(|p| !bindings.contains_key(p)) {
        return Err(PromptError::MissingBinding(missing.to_string()));
    }
    Ok(PLACEHOLDER_RE
        .replace_all(&template.body, |c: &Captures<'_>| bindings[&c[1]].clone())
        .into_owned())
}

/// The three templates a session needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLibrary {
    pub plan_init: PromptTemplate,
    pub task_init: PromptTemplate,
    pub base_init: PromptTemplate,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self {
            plan_init: PromptTemplate::builtin(TemplateId::PlanInit),
            task_init: PromptTemplate::builtin(TemplateId::TaskInit),
            base_init: PromptTemplate::builtin(TemplateId::BaseInit),
        }
    }
}

impl PromptLibrary {
    /// Loads `plan_init.txt`, `task_init.txt` and `base_init.txt` from `dir`;
    /// files that are absent fall back to the built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let load = |id: TemplateId| -> Result<PromptTemplate, PromptError> {
            let path = dir.join(id.file_name());
            if !path.exists() {
                return Ok(PromptTemplate::builtin(id));
            }
            let body = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            PromptTemplate::new(id, body)
        };
        Ok(Self {
            plan_init: load(TemplateId::PlanInit)?,
            task_init: load(TemplateId::TaskInit)?,
            base_init: load(TemplateId::BaseInit)?,
        })
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        match id {
            TemplateId::PlanInit => &self.plan_init,
            TemplateId::TaskInit => &self.task_init,
            TemplateId::BaseInit => &self.base_init,
        }
    }
}
