//! Command-line entry points.
//!
//! Exit codes: 0 when the session finished (or the command succeeded),
//! 1 when the session ended `failed_at(..)` or a log is corrupt, 2 for usage
//! and configuration errors.

use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use breachgraph_core::actuation::{Completion, ProcessChannel, ShellChannel, SshConfig};
use breachgraph_core::events::{replay, Journal, LogError, SessionEvent};
use breachgraph_core::llm_gateway::{ChatBackend, LiveBackend, LiveConfig, ScriptMode, ScriptedBackend};
use breachgraph_core::memory_retriever::{
    ingest_dir, Embedder, HashEmbedder, HttpEmbedder, HttpReranker, KnowledgeStore, MemoryRetriever, OverlapReranker,
    Reranker, DEFAULT_WORDS_PER_CHUNK,
};
use breachgraph_core::phase_pipeline::{
    initial_snapshot, run_session, Mode, OperatorChannel, SessionConfig, SessionDeps, SessionReport, SessionStatus,
};
use breachgraph_core::plan_sessions::PromptLibrary;
use breachgraph_core::sandbox_target::{SandboxChannel, Scenario};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::info;

use crate::api;
use crate::config::{FileConfig, RetrievalSection, TargetKind};
use crate::registry::Registry;
use crate::terminal::TerminalOperator;

#[derive(Debug, Parser)]
#[command(name = "breachgraph", version, about = "Phase-by-phase penetration test orchestration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one session in the foreground and print its report.
    Run(RunArgs),
    /// Print the events of a session log.
    Replay(ReplayArgs),
    /// Chunk, embed and store a knowledge directory.
    Ingest(IngestArgs),
    /// Serve the operator HTTP API, optionally running a session in the background.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Automatic,
    Manual,
    #[value(alias = "semi_automatic", alias = "semi")]
    SemiAutomatic,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Automatic => Mode::Automatic,
            ModeArg::Manual => Mode::Manual,
            ModeArg::SemiAutomatic => Mode::SemiAutomatic,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SessionArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// What to test, in plain words ("I want to test 10.10.1.5").
    #[arg(long)]
    pub target: Option<String>,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps_per_phase: Option<u32>,
    #[arg(long)]
    pub knowledge_dir: Option<PathBuf>,
    /// Sandbox scenario: a directory holding target.json (and optionally
    /// llm.json with scripted replies), or a target.json file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Scripted reply rules used instead of a live model.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, overrides_with = "no_rag")]
    pub rag: bool,
    #[arg(long, overrides_with = "rag")]
    pub no_rag: bool,
    /// Hold every generated command for operator approval.
    #[arg(long)]
    pub require_approval: bool,
    /// Append session events to this file (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Knowledge store file; loaded before and saved after the session.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Directory with plan_init.txt / task_init.txt / base_init.txt overrides.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    /// Print the final report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub log: PathBuf,
    /// Print events as JSON lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub knowledge_dir: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WORDS_PER_CHUNK)]
    pub words: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8700)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: std::net::IpAddr,
    #[command(flatten)]
    pub session: SessionArgs,
}

/// A session ready to run.
pub struct Prepared {
    pub config: SessionConfig,
    pub backend: Box<dyn ChatBackend>,
    pub channel: Box<dyn ShellChannel>,
    pub retriever: Option<MemoryRetriever>,
    pub prompts: PromptLibrary,
    pub log: Option<PathBuf>,
    pub store: Option<PathBuf>,
}

impl Prepared {
    pub fn journal(&self) -> anyhow::Result<Journal> {
        Ok(match &self.log {
            Some(path) => Journal::with_file(initial_snapshot(&self.config), path)?,
            None => Journal::new(initial_snapshot(&self.config)),
        })
    }

    pub fn run(mut self, journal: &Journal, operator: Option<&dyn OperatorChannel>) -> anyhow::Result<SessionReport> {
        let report = run_session(
            &self.config,
            SessionDeps {
                gateway: self.backend.as_ref(),
                channel: self.channel.as_mut(),
                retriever: self.retriever.as_ref(),
                operator,
                journal,
                prompts: &self.prompts,
            },
        )?;
        if let (Some(retriever), Some(path)) = (&self.retriever, &self.store) {
            retriever.store.save(path)?;
        }
        Ok(report)
    }
}

/// Scenario directory layout: `target.json` plus optional `llm.json`.
fn scenario_files(path: &Path) -> (PathBuf, Option<PathBuf>) {
    if path.is_dir() {
        let llm = path.join("llm.json");
        (path.join("target.json"), llm.exists().then_some(llm))
    } else {
        (path.to_path_buf(), None)
    }
}

fn embedder(cfg: &RetrievalSection) -> Box<dyn Embedder> {
    match &cfg.embed_url {
        Some(url) => Box::new(HttpEmbedder::new(
            url.clone(),
            cfg.embed_model.clone().unwrap_or_default(),
            cfg.embed_dimension.unwrap_or(768),
        )),
        None => Box::new(HashEmbedder::default()),
    }
}

fn reranker(cfg: &RetrievalSection) -> Box<dyn Reranker> {
    match &cfg.rerank_url {
        Some(url) => Box::new(HttpReranker::new(url.clone(), cfg.rerank_model.clone().unwrap_or_default())),
        None => Box::new(OverlapReranker),
    }
}

fn load_store(path: Option<&Path>) -> anyhow::Result<KnowledgeStore> {
    Ok(match path {
        Some(p) if p.exists() => KnowledgeStore::load(p)?,
        _ => KnowledgeStore::new(),
    })
}

/// Resolves file settings, flags and secrets into a runnable session.
pub fn prepare(args: &SessionArgs) -> anyhow::Result<Prepared> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let mut config = file.session_config();
    if let Some(mode) = args.mode {
        config.mode = mode.into();
    }
    if let Some(target) = &args.target {
        config.target_description = target.clone();
    }
    if let Some(steps) = args.steps_per_phase {
        config.per_phase_budget = steps;
    }
    if let Some(dir) = &args.knowledge_dir {
        config.knowledge_dir = Some(dir.clone());
    }
    if let Some(dir) = &args.templates {
        config.template_dir = Some(dir.clone());
    }
    if args.rag {
        config.retrieval_enabled = true;
    }
    if args.no_rag {
        config.retrieval_enabled = false;
    }
    config.require_approval |= args.require_approval;
    config.validate()?;

    let prompts = match &config.template_dir {
        Some(dir) => PromptLibrary::load_dir(dir)?,
        None => PromptLibrary::default(),
    };

    let scenario = args
        .scenario
        .clone()
        .or_else(|| (file.target.kind == TargetKind::Sandbox).then(|| file.target.scenario.clone()).flatten());
    let (scenario_target, scenario_llm) = match &scenario {
        Some(path) => {
            let (t, l) = scenario_files(path);
            (Some(t), l)
        }
        None => (None, None),
    };

    let script = args.script.clone().or_else(|| file.llm.script.clone()).or(scenario_llm);
    let backend: Box<dyn ChatBackend> = match (&script, &file.llm.base_url) {
        (Some(path), _) => Box::new(ScriptedBackend::from_file(path, ScriptMode::Strict).map_err(anyhow::Error::msg)?),
        (None, Some(url)) => {
            let mut live = LiveConfig::new(url.clone());
            live.api_key_env = Some(file.llm.api_key_env.clone());
            if let Some(p) = &file.llm.response_path {
                live.response_path = p.clone();
            }
            if let Some(t) = file.request_timeout() {
                live.request_timeout = t;
            }
            Box::new(LiveBackend::new(live))
        }
        (None, None) => bail!("no language model configured: set [llm] base_url in the config file or pass --script"),
    };

    let channel: Box<dyn ShellChannel> = match (&scenario_target, file.target.kind) {
        (Some(path), _) => Box::new(SandboxChannel::new(Scenario::from_file(path)?)),
        (None, TargetKind::Sandbox) => bail!("[target] kind = \"sandbox\" needs a scenario"),
        (None, TargetKind::Local) => Box::new(ProcessChannel::local_shell()),
        (None, TargetKind::Ssh) => {
            let t = &file.target;
            let (Some(host), Some(user)) = (&t.host, &t.user) else {
                bail!("[target] kind = \"ssh\" needs host and user");
            };
            let mut ssh = SshConfig::new(host.clone(), user.clone());
            ssh.port = t.port;
            ssh.key_path = t.key_path.clone();
            if ssh.key_path.is_none() && std::env::var_os(&t.key_env).is_some() {
                ssh.key_env = Some(t.key_env.clone());
            }
            let completion = match &t.prompt {
                Some(p) => Completion::prompt(p)?,
                None => Completion::Marker,
            };
            Box::new(ProcessChannel::ssh(&ssh, completion)?)
        }
    };

    let store_path = args.store.clone().or_else(|| file.retrieval.store.clone());
    let retriever = if config.retrieval_enabled {
        let store = load_store(store_path.as_deref())?;
        let embed = embedder(&file.retrieval);
        if let Some(dir) = &config.knowledge_dir {
            let n = ingest_dir(&store, dir, embed.as_ref(), DEFAULT_WORDS_PER_CHUNK)?;
            info!(chunks = n, dir = %dir.display(), "knowledge ingested");
        }
        let mut retriever = MemoryRetriever::new(store, embed);
        retriever.reranker = Some(reranker(&file.retrieval));
        Some(retriever)
    } else {
        None
    };

    Ok(Prepared {
        config,
        backend,
        channel,
        retriever,
        prompts,
        log: args.log.clone().or_else(|| file.session.log.clone()),
        store: store_path,
    })
}

fn exit_for(status: SessionStatus) -> ExitCode {
    match status {
        SessionStatus::Finished => ExitCode::SUCCESS,
        _ => ExitCode::from(1),
    }
}

pub fn render_report(report: &SessionReport) -> String {
    let mut out = format!("session {} after {} steps\n", report.status, report.total_steps);
    for p in &report.phases {
        out.push_str(&format!(
            "  {}: {}, {} steps",
            p.phase.title().to_lowercase(),
            if p.goal_met { "goal met" } else { "goal not met" },
            p.steps_used
        ));
        if let Some(note) = &p.failure_stage_note {
            out.push_str(&format!(" ({note})"));
        }
        out.push('\n');
    }
    out.push_str(&format!("shell state: {}\n", report.shell_state.describe()));
    out
}

fn needs_operator(config: &SessionConfig) -> bool {
    config.mode != Mode::Automatic || config.require_approval
}

pub fn run(args: RunArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let prepared = prepare(&args.session)?;
    let journal = prepared.journal()?;
    let terminal = needs_operator(&prepared.config)
        .then(|| TerminalOperator::new(BufReader::new(std::io::stdin()), std::io::stderr()));
    let report = prepared.run(&journal, terminal.as_ref().map(|t| t as &dyn OperatorChannel))?;
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        write!(out, "{}", render_report(&report))?;
    }
    Ok(exit_for(report.status))
}

fn brief(event: &SessionEvent) -> String {
    let p = &event.payload;
    let field = |k: &str| p.get(k).filter(|v| !v.is_null());
    let mut parts = Vec::new();
    if let Some(id) = field("task_id") {
        parts.push(format!("task {id}"));
    }
    for key in ["command", "success", "note", "status", "total_steps"] {
        if let Some(v) = field(key) {
            let text = match serde_json::from_value::<SessionStatus>(v.clone()) {
                Ok(status) => status.to_string(),
                Err(_) => v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()),
            };
            parts.push(format!("{key}={text}"));
        }
    }
    if let Some(n) = p.get("graph").and_then(|g| g.get("tasks")).and_then(|t| t.as_array()) {
        parts.push(format!("{} tasks", n.len()));
    }
    parts.join(" ")
}

pub fn replay_log(args: ReplayArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let events = match replay(&args.log) {
        Ok(events) => events,
        Err(e @ LogError::LogCorrupt { .. }) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(1));
        }
        Err(e) => return Err(e.into()),
    };
    for e in &events {
        if args.json {
            writeln!(out, "{}", serde_json::to_string(e)?)?;
        } else {
            let kind = serde_json::to_value(e.kind)?;
            let phase = e.phase.map(|p| p.title().to_lowercase()).unwrap_or_else(|| "-".into());
            writeln!(out, "{:>5} {:<17} {:<15} {}", e.seq, kind.as_str().unwrap_or_default(), phase, brief(e))?;
        }
    }
    if !args.json {
        writeln!(out, "{} events", events.len())?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ingest(args: IngestArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    if args.words == 0 {
        bail!("--words must be at least 1");
    }
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let store = load_store(Some(&args.store))?;
    let embed = embedder(&file.retrieval);
    let n = ingest_dir(&store, &args.knowledge_dir, embed.as_ref(), args.words)
        .with_context(|| format!("ingesting {}", args.knowledge_dir.display()))?;
    store.save(&args.store)?;
    writeln!(
        out,
        "ingested {n} chunks from {}; {} holds {} chunks",
        args.knowledge_dir.display(),
        args.store.display(),
        store.len()
    )?;
    Ok(ExitCode::SUCCESS)
}

pub fn serve(args: ServeArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let registry = Arc::new(Registry::new());
    let wants_session = args.session.target.is_some() || args.session.config.is_some() || args.session.scenario.is_some();
    if wants_session {
        let prepared = prepare(&args.session)?;
        let journal = prepared.journal()?;
        let handle = registry.create(prepared.config.clone(), Some(journal), prepared.log.clone());
        handle.start(move |h| prepared.run(&h.journal, Some(h.bridge.as_ref())))?;
        writeln!(out, "session {} started", handle.id)?;
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(SocketAddr::new(args.bind, args.port)).await?;
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        axum::serve(listener, api::router(registry))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(a) => run(a, out),
        Command::Replay(a) => replay_log(a, out),
        Command::Ingest(a) => ingest(a, out),
        Command::Serve(a) => serve(a, out),
    }
}
