use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseName {
    Reconnaissance,
    Scanning,
    Exploitation,
}

impl PhaseName {
    /// Fixed execution order.
    pub const ORDER: [PhaseName; 3] = [PhaseName::Reconnaissance, PhaseName::Scanning, PhaseName::Exploitation];

    pub fn title(self) -> &'static str {
        match self {
            PhaseName::Reconnaissance => "Reconnaissance",
            PhaseName::Scanning => "Scanning",
            PhaseName::Exploitation => "Exploitation",
        }
    }
}

impl fmt::Display for PhaseName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

/// One specialized role: what it is after and what it may reach for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: PhaseName,
    pub goal: String,
    /// Suggested tools, passed to the planner as reference only.
    pub tools: Vec<String>,
    pub step_budget: u32,
}

impl PhaseSpec {
    pub fn standard(name: PhaseName, step_budget: u32) -> Self {
        let (goal, tools): (&str, &[&str]) = match name {
            PhaseName::Reconnaissance => (
                "Map the target's attack surface: every open port and listening service, with service banners, \
                 operating system hints and software versions.",
                &["nmap", "dirb"],
            ),
            PhaseName::Scanning => (
                "Find vulnerabilities and misconfigurations in the services discovered so far and single out \
                 the ones most likely to be exploitable.",
                &["nikto", "wpscan"],
            ),
            PhaseName::Exploitation => (
                "Use the weaknesses found so far to obtain a shell on the target, then escalate privileges \
                 where possible.",
                &["metasploit", "hydra"],
            ),
        };
        Self {
            name,
            goal: goal.to_string(),
            tools: tools.iter().map(|t| t.to_string()).collect(),
            step_budget,
        }
    }

    pub fn tools_line(&self) -> String {
        self.tools.join(", ")
    }
}

/// Reconnaissance, scanning and exploitation, each with the same budget.
pub fn standard_phases(step_budget: u32) -> Vec<PhaseSpec> {
    PhaseName::ORDER
        .iter()
        .map(|&name| PhaseSpec::standard(name, step_budget))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Shell tasks run unattended; manual tasks fail.
    #[default]
    Automatic,
    /// Every task goes to the operator.
    Manual,
    /// Shell tasks run unattended; manual tasks go to the operator.
    SemiAutomatic,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Automatic => "automatic",
            Mode::Manual => "manual",
            Mode::SemiAutomatic => "semi_automatic",
        })
    }
}

pub const DEFAULT_STEPS_PER_PHASE: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub mode: Mode,
    pub target_description: String,
    pub per_phase_budget: u32,
    pub temperature: f64,
    /// Model name passed through to the chat backend.
    #[serde(default = "default_model")]
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    pub retrieval_enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_dir: Option<PathBuf>,
    /// Hold every generated shell command until the operator approves it.
    #[serde(default)]
    pub require_approval: bool,
    /// Optional operator-supplied text placed ahead of every planner prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preamble: Option<String>,
    #[serde(default = "default_timeout")]
    pub command_timeout_s: f64,
    #[serde(default = "default_threshold")]
    pub filter_threshold: usize,
    #[serde(default = "default_digest_budget")]
    pub digest_budget: usize,
}

fn default_model() -> String {
    crate::llm_gateway::ChatParams::default().model_id
}

fn default_timeout() -> f64 {
    crate::actuation::DEFAULT_TIMEOUT_S
}

fn default_threshold() -> usize {
    crate::actuation::DEFAULT_FILTER_THRESHOLD
}

fn default_digest_budget() -> usize {
    crate::summarizer::DEFAULT_DIGEST_BUDGET
}

impl SessionConfig {
    pub fn new(mode: Mode, target_description: impl Into<String>) -> Self {
        Self {
            mode,
            target_description: target_description.into(),
            per_phase_budget: DEFAULT_STEPS_PER_PHASE,
            temperature: crate::llm_gateway::DEFAULT_TEMPERATURE,
            model_id: default_model(),
            max_tokens: None,
            retrieval_enabled: false,
            template_dir: None,
            knowledge_dir: None,
            require_approval: false,
            preamble: None,
            command_timeout_s: default_timeout(),
            filter_threshold: default_threshold(),
            digest_budget: default_digest_budget(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.per_phase_budget < 1 {
            return Err(ConfigError::ZeroBudget);
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::Temperature(self.temperature));
        }
        if self.target_description.trim().is_empty() {
            return Err(ConfigError::EmptyTarget);
        }
        if self.command_timeout_s.is_nan() || self.command_timeout_s <= 0.0 {
            return Err(ConfigError::Timeout(self.command_timeout_s));
        }
        Ok(())
    }

    pub fn phases(&self) -> Vec<PhaseSpec> {
        standard_phases(self.per_phase_budget)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("per-phase step budget must be at least 1")]
    ZeroBudget,
    #[error("temperature {0} outside [0, 2]")]
    Temperature(f64),
    #[error("target description is empty")]
    EmptyTarget,
    #[error("command timeout {0} must be positive")]
    Timeout(f64),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = SessionConfig::new(Mode::Automatic, "test 10.10.1.5");
        assert_eq!(c.per_phase_budget, 5);
        assert_eq!(c.temperature, 0.5);
        assert!(c.validate().is_ok());
        let phases = c.phases();
        assert_eq!(phases.iter().map(|p| p.name).collect::<Vec<_>>(), PhaseName::ORDER.to_vec());
        assert_eq!(phases.iter().map(|p| p.step_budget).sum::<u32>(), 15);
    }

    #[test]
    fn eight_step_budget_caps_at_twenty_four() {
        let total: u32 = standard_phases(8).iter().map(|p| p.step_budget).sum();
        assert_eq!(total, 24);
    }

    #[test]
    fn invalid_configs() {
        let mut c = SessionConfig::new(Mode::Manual, "t");
        c.per_phase_budget = 0;
        assert_eq!(c.validate(), Err(ConfigError::ZeroBudget));
        c.per_phase_budget = 1;
        c.temperature = -0.1;
        assert!(matches!(c.validate(), Err(ConfigError::Temperature(_))));
    }

    #[test]
    fn phase_tool_rosters() {
        assert_eq!(PhaseSpec::standard(PhaseName::Reconnaissance, 5).tools, vec!["nmap", "dirb"]);
        assert_eq!(PhaseSpec::standard(PhaseName::Scanning, 5).tools, vec!["nikto", "wpscan"]);
        assert_eq!(PhaseSpec::standard(PhaseName::Exploitation, 5).tools, vec!["metasploit", "hydra"]);
    }
}
