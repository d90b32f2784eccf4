//! TOML configuration file.
//!
//! Every section and field is optional. Secrets never live in the file: the
//! API key and SSH key material are read from environment variables whose
//! names default to [`API_KEY_ENV`] and [`SSH_KEY_ENV`]. Command-line flags
//! override the file.
//!
//! ```toml
//! [session]
//! mode = "semi_automatic"
//! target = "I want to test 192.168.1.104"
//! steps_per_phase = 8
//!
//! [llm]
//! base_url = "http://127.0.0.1:8000/v1"
//! model = "gpt-4o"
//!
//! [target]
//! kind = "ssh"
//! host = "192.168.1.50"
//! user = "kali"
//!
//! [retrieval]
//! enabled = true
//! knowledge_dir = "knowledge"
//! store = "knowledge.store"
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use breachgraph_core::phase_pipeline::{Mode, SessionConfig, DEFAULT_STEPS_PER_PHASE};
use serde::Deserialize;

pub const API_KEY_ENV: &str = "BREACHGRAPH_API_KEY";
pub const SSH_KEY_ENV: &str = "BREACHGRAPH_SSH_KEY";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub session: SessionSection,
    pub llm: LlmSection,
    pub target: TargetSection,
    pub retrieval: RetrievalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    pub mode: Option<Mode>,
    pub target: Option<String>,
    pub steps_per_phase: u32,
    pub temperature: Option<f64>,
    pub require_approval: bool,
    pub preamble: Option<String>,
    pub template_dir: Option<PathBuf>,
    pub command_timeout_s: Option<f64>,
    pub filter_threshold: Option<usize>,
    pub digest_budget: Option<usize>,
    pub log: Option<PathBuf>,
}

impl Default for SessionSection {
    fn default() -> Self {
        Self {
            mode: None,
            target: None,
            steps_per_phase: DEFAULT_STEPS_PER_PHASE,
            temperature: None,
            require_approval: false,
            preamble: None,
            template_dir: None,
            command_timeout_s: None,
            filter_threshold: None,
            digest_budget: None,
            log: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub max_tokens: Option<u32>,
    pub api_key_env: String,
    pub response_path: Option<String>,
    pub request_timeout_s: Option<f64>,
    /// Scripted rules file used instead of a live backend.
    pub script: Option<PathBuf>,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            base_url: None,
            model: None,
            max_tokens: None,
            api_key_env: API_KEY_ENV.to_string(),
            response_path: None,
            request_timeout_s: None,
            script: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Local,
    Ssh,
    Sandbox,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    pub kind: TargetKind,
    pub scenario: Option<PathBuf>,
    pub host: Option<String>,
    pub port: u16,
    pub user: Option<String>,
    pub key_path: Option<PathBuf>,
    pub key_env: String,
    /// Regex for the remote prompt; commands are delimited by an end marker when unset.
    pub prompt: Option<String>,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            kind: TargetKind::Local,
            scenario: None,
            host: None,
            port: 22,
            user: None,
            key_path: None,
            key_env: SSH_KEY_ENV.to_string(),
            prompt: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub enabled: Option<bool>,
    pub knowledge_dir: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub embed_url: Option<String>,
    pub embed_model: Option<String>,
    pub embed_dimension: Option<usize>,
    pub rerank_url: Option<String>,
    pub rerank_model: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Session settings from the file, before flag overrides.
    pub fn session_config(&self) -> SessionConfig {
        let s = &self.session;
        let mut config = SessionConfig::new(s.mode.unwrap_or_default(), s.target.clone().unwrap_or_default());
        config.per_phase_budget = s.steps_per_phase;
        if let Some(t) = s.temperature {
            config.temperature = t;
        }
        if let Some(m) = &self.llm.model {
            config.model_id = m.clone();
        }
        config.max_tokens = self.llm.max_tokens;
        config.require_approval = s.require_approval;
        config.preamble = s.preamble.clone();
        config.template_dir = s.template_dir.clone();
        if let Some(t) = s.command_timeout_s {
            config.command_timeout_s = t;
        }
        if let Some(t) = s.filter_threshold {
            config.filter_threshold = t;
        }
        if let Some(b) = s.digest_budget {
            config.digest_budget = b;
        }
        config.retrieval_enabled = self.retrieval.enabled.unwrap_or(false);
        config.knowledge_dir = self.retrieval.knowledge_dir.clone();
        config
    }

    pub fn request_timeout(&self) -> Option<Duration> {
        self.llm.request_timeout_s.map(Duration::from_secs_f64)
    }
}
