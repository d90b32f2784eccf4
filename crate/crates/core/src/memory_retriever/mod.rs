//! Knowledge retrieval for the planner.
//!
//! Reference documents are split into fixed-size word chunks, embedded and
//! kept in a [`KnowledgeStore`] alongside the record of tasks that succeeded
//! earlier. A query keeps candidates whose cosine similarity clears the
//! threshold, takes the top `k`, and reorders them with a reranker.

mod embed;
mod store;

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

pub use embed::{cosine_similarity, tokenize, Embedder, HashEmbedder, HttpEmbedder, HttpReranker, OverlapReranker, Reranker};
pub use store::KnowledgeStore;

use crate::task_graph::TaskNode;

pub const DEFAULT_WORDS_PER_CHUNK: usize = 750;
pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Source document for recorded task experience.
pub const EXPERIENCE_SOURCE: &str = "experience";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("embedding dimension mismatch: store holds {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("only successful tasks are recorded (task {0} did not succeed)")]
    RejectUnsuccessful(u32),
    #[error("{path}:{line}: {reason}")]
    CorruptStore { path: String, line: usize, reason: String },
    #[error("io: {0}")]
    Io(String),
    #[error("retrieval service: {0}")]
    Service(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkId {
    pub source: String,
    pub index: u64,
}

impl ChunkId {
    pub fn new(source: impl Into<String>, index: u64) -> Self {
        Self { source: source.into(), index }
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.source, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkKind {
    Knowledge,
    Experience,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeChunk {
    pub chunk_id: ChunkId,
    pub kind: ChunkKind,
    pub text: String,
    pub embedding: Vec<f32>,
}

impl KnowledgeChunk {
    pub fn source_doc(&self) -> &str {
        &self.chunk_id.source
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk: KnowledgeChunk,
    pub similarity: f64,
    pub rerank_score: f64,
}

/// Splits on whitespace and regroups into chunks of `words_per_chunk` words;
/// only the last chunk may be shorter.
///
/// # Panics
/// If `words_per_chunk` is zero.
pub fn chunk_document(text: &str, words_per_chunk: usize) -> Vec<String> {
    assert!(words_per_chunk >= 1, "chunks need at least one word");
    let words: Vec<&str> = text.split_whitespace().collect();
    words.chunks(words_per_chunk).map(|c| c.join(" ")).collect()
}

/// Embeds `chunks` of `source` and upserts them; returns how many were stored.
pub fn embed_and_store(
    store: &KnowledgeStore,
    source: &str,
    chunks: &[String],
    embedder: &dyn Embedder,
) -> Result<usize, RetrievalError> {
    for (index, text) in chunks.iter().enumerate() {
        let embedding = embedder.embed(text)?;
        if embedding.len() != embedder.dimension() {
            return Err(RetrievalError::DimensionMismatch {
                expected: embedder.dimension(),
                got: embedding.len(),
            });
        }
        store.upsert(KnowledgeChunk {
            chunk_id: ChunkId::new(source, index as u64),
            kind: ChunkKind::Knowledge,
            text: text.clone(),
            embedding,
        })?;
    }
    Ok(chunks.len())
}

/// Ingests every `.md`/`.markdown`/`.txt` file below `dir`, in path order.
/// Returns the number of chunks stored.
pub fn ingest_dir(
    store: &KnowledgeStore,
    dir: &Path,
    embedder: &dyn Embedder,
    words_per_chunk: usize,
) -> Result<usize, RetrievalError> {
    let mut total = 0;
    let entries = WalkDir::new(dir).sort_by_file_name().into_iter();
    for entry in entries {
        let entry = entry.map_err(|e| RetrievalError::Io(e.to_string()))?;
        let path = entry.path();
        let wanted = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e, "md" | "markdown" | "txt"));
        if !entry.file_type().is_file() || !wanted {
            continue;
        }
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
        let source = path.strip_prefix(dir).unwrap_or(path).to_string_lossy().replace('\\', "/");
        total += embed_and_store(store, &source, &chunk_document(&text, words_per_chunk), embedder)?;
    }
    Ok(total)
}

/// Thresholded top-k by cosine similarity, then reranked.
///
/// Candidates need `similarity > threshold`. Without a reranker the
/// similarity order stands. Ties are broken by chunk id.
pub fn retrieve(
    store: &KnowledgeStore,
    query: &str,
    k: usize,
    threshold: f64,
    embedder: &dyn Embedder,
    reranker: Option<&dyn Reranker>,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if store.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let q = embedder.embed(query)?;
    // rank on ids first; only the survivors are cloned
    let mut ranked = store.scan(|chunk| {
        let similarity = cosine_similarity(&q, &chunk.embedding);
        (similarity > threshold).then(|| (similarity, chunk.chunk_id.clone()))
    });
    ranked.sort_by(|a, b| desc(a.0, b.0).then_with(|| a.1.cmp(&b.1)));
    ranked.truncate(k);
    let mut hits: Vec<RetrievalHit> = ranked
        .into_iter()
        .filter_map(|(similarity, id)| {
            store.get(&id).map(|chunk| RetrievalHit {
                chunk,
                similarity,
                rerank_score: similarity,
            })
        })
        .collect();
    if let Some(reranker) = reranker {
        for hit in &mut hits {
            hit.rerank_score = reranker.score(query, &hit.chunk.text)?;
        }
        hits.sort_by(|a, b| desc(a.rerank_score, b.rerank_score).then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id)));
    }
    Ok(hits)
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Stores a succeeded task as experience, keyed by task id.
pub fn record_successful_task(
    store: &KnowledgeStore,
    task: &TaskNode,
    embedder: &dyn Embedder,
) -> Result<ChunkId, RetrievalError> {
    if !task.is_completed() {
        return Err(RetrievalError::RejectUnsuccessful(task.id));
    }
    let result: String = task.result.as_deref().unwrap_or_default().chars().take(500).collect();
    let mut text = format!("Task: {}", task.instruction);
    if let Some(cmd) = &task.command {
        text.push_str(&format!("\nCommand: {cmd}"));
    }
    text.push_str(&format!("\nResult: {result}"));
    let chunk_id = ChunkId::new(EXPERIENCE_SOURCE, u64::from(task.id));
    store.upsert(KnowledgeChunk {
        chunk_id: chunk_id.clone(),
        kind: ChunkKind::Experience,
        embedding: embedder.embed(&text)?,
        text,
    })?;
    Ok(chunk_id)
}

/// A store plus the models and settings used to query it.
pub struct MemoryRetriever {
    pub store: KnowledgeStore,
    pub embedder: Box<dyn Embedder>,
    pub reranker: Option<Box<dyn Reranker>>,
    pub k: usize,
    pub threshold: f64,
}

impl MemoryRetriever {
    pub fn new(store: KnowledgeStore, embedder: Box<dyn Embedder>) -> Self {
        Self {
            store,
            embedder,
            reranker: Some(Box::new(OverlapReranker)),
            k: DEFAULT_TOP_K,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn query(&self, text: &str) -> Result<Vec<RetrievalHit>, RetrievalError> {
        retrieve(
            &self.store,
            text,
            self.k,
            self.threshold,
            self.embedder.as_ref(),
            self.reranker.as_deref(),
        )
    }

    pub fn remember(&self, task: &TaskNode) -> Result<ChunkId, RetrievalError> {
        record_successful_task(&self.store, task, self.embedder.as_ref())
    }
}
