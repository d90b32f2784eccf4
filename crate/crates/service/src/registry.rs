//! Sessions known to this process.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use anyhow::bail;
use breachgraph_core::events::Journal;
use breachgraph_core::phase_pipeline::{
    initial_snapshot, ConsoleBridge, PhaseName, SessionConfig, SessionReport, SessionStatus,
};
use serde::Serialize;

/// One session: its journal, its operator bridge and, once done, its report.
pub struct SessionHandle {
    pub id: String,
    pub config: SessionConfig,
    pub log_path: Option<PathBuf>,
    pub journal: Arc<Journal>,
    pub bridge: Arc<ConsoleBridge>,
    started: AtomicBool,
    report: Mutex<Option<SessionReport>>,
}

/// Row of `GET /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub config: SessionConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    #[serde(flatten)]
    pub status: SessionStatus,
    pub current_phase: Option<PhaseName>,
    pub total_steps: u32,
    pub last_seq: u64,
}

impl SessionHandle {
    pub fn record(&self) -> SessionRecord {
        let snap = self.journal.snapshot();
        SessionRecord {
            session_id: self.id.clone(),
            config: self.config.clone(),
            log: self.log_path.clone(),
            status: snap.status,
            current_phase: snap.current_phase,
            total_steps: snap.total_steps,
            last_seq: snap.last_seq,
        }
    }

    pub fn report(&self) -> Option<SessionReport> {
        self.report.lock().expect("report lock poisoned").clone()
    }

    /// Runs `body` on a new thread. A session runs at most once.
    pub fn start<F>(self: &Arc<Self>, body: F) -> anyhow::Result<JoinHandle<anyhow::Result<SessionReport>>>
    where
        F: FnOnce(&SessionHandle) -> anyhow::Result<SessionReport> + Send + 'static,
    {
        if self.started.swap(true, Ordering::SeqCst) {
            bail!("session {} has already been started", self.id);
        }
        let handle = self.clone();
        Ok(thread::Builder::new()
            .name(format!("session-{}", self.id))
            .spawn(move || {
                let report = body(&handle)?;
                *handle.report.lock().expect("report lock poisoned") = Some(report.clone());
                Ok(report)
            })?)
    }
}

#[derive(Default)]
pub struct Registry {
    sessions: RwLock<BTreeMap<String, Arc<SessionHandle>>>,
    next_id: AtomicU64,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a session; `journal` defaults to an in-memory one.
    pub fn create(&self, config: SessionConfig, journal: Option<Journal>, log_path: Option<PathBuf>) -> Arc<SessionHandle> {
        let id = (self.next_id.fetch_add(1, Ordering::SeqCst) + 1).to_string();
        let journal = journal.unwrap_or_else(|| Journal::new(initial_snapshot(&config)));
        let handle = Arc::new(SessionHandle {
            id: id.clone(),
            config,
            log_path,
            journal: Arc::new(journal),
            bridge: Arc::new(ConsoleBridge::new(None)),
            started: AtomicBool::new(false),
            report: Mutex::new(None),
        });
        self.sessions
            .write()
            .expect("registry lock poisoned")
            .insert(id, handle.clone());
        handle
    }

    pub fn get(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.read().expect("registry lock poisoned").get(id).cloned()
    }

    pub fn list(&self) -> Vec<SessionRecord> {
        let sessions = self.sessions.read().expect("registry lock poisoned");
        let mut rows: Vec<SessionRecord> = sessions.values().map(|s| s.record()).collect();
        rows.sort_by_key(|r| r.session_id.parse::<u64>().unwrap_or(u64::MAX));
        rows
    }
}
