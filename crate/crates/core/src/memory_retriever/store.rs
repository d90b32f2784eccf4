//! In-memory vector store with single-file persistence.
//!
//! File layout, one JSON document per line:
//!
//! ```text
//! {"format":"breachgraph-knowledge","version":1,"dimension":256,"count":2}
//! {"source":"hacktricks/ssh.md","index":0,"kind":"knowledge","text":"...","vector":[...]}
//! {"source":"experience","index":3,"kind":"experience","text":"...","vector":[...]}
//! ```
//!
//! Records are written in chunk-id order so the file is stable across runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{ChunkId, ChunkKind, KnowledgeChunk, RetrievalError};

const FORMAT: &str = "breachgraph-knowledge";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dimension: Option<usize>,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    source: String,
    index: u64,
    kind: ChunkKind,
    text: String,
    vector: Vec<f32>,
}

#[derive(Debug, Default)]
struct Inner {
    dimension: Option<usize>,
    chunks: BTreeMap<ChunkId, KnowledgeChunk>,
}

/// Readers run concurrently; writers take the store-wide lock.
#[derive(Debug, Default)]
pub struct KnowledgeStore {
    inner: RwLock<Inner>,
}

impl KnowledgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.read().chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dimension(&self) -> Option<usize> {
        self.read().dimension
    }

    pub fn get(&self, id: &ChunkId) -> Option<KnowledgeChunk> {
        self.read().chunks.get(id).cloned()
    }

    /// Inserts or replaces by chunk id. Every vector must share one dimension.
    pub fn upsert(&self, chunk: KnowledgeChunk) -> Result<(), RetrievalError> {
        let mut inner = self.inner.write().expect("store lock poisoned");
        let dim = chunk.embedding.len();
        match inner.dimension {
            Some(expected) if expected != dim => {
                return Err(RetrievalError::DimensionMismatch { expected, got: dim });
            }
            None => inner.dimension = Some(dim),
            _ => {}
        }
        inner.chunks.insert(chunk.chunk_id.clone(), chunk);
        Ok(())
    }

    /// Runs `f` over every chunk under the read lock.
    pub fn scan<T>(&self, mut f: impl FnMut(&KnowledgeChunk) -> Option<T>) -> Vec<T> {
        self.read().chunks.values().filter_map(&mut f).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let inner = self.read();
        let io = |e: std::io::Error| RetrievalError::Io(format!("{}: {e}", path.display()));
        // write beside the target and rename, so a crash never leaves half a store
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        let mut out = BufWriter::new(tmp);
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            dimension: inner.dimension,
            count: inner.chunks.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
        for chunk in inner.chunks.values() {
            let record = Record {
                source: chunk.chunk_id.source.clone(),
                index: chunk.chunk_id.index,
                kind: chunk.kind,
                text: chunk.text.clone(),
                vector: chunk.embedding.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(io)?;
        }
        let tmp = out.into_inner().map_err(|e| io(e.into_error()))?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let corrupt = |line: usize, why: String| RetrievalError::CorruptStore {
            path: path.display().to_string(),
            line,
            reason: why,
        };
        let file = fs::File::open(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| corrupt(1, "missing header".into()))?
            .map_err(|e| corrupt(1, e.to_string()))?;
        let header: Header = serde_json::from_str(&header_line).map_err(|e| corrupt(1, e.to_string()))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(corrupt(1, format!("unsupported format {} v{}", header.format, header.version)));
        }
        let store = KnowledgeStore::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| corrupt(lineno, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line).map_err(|e| corrupt(lineno, e.to_string()))?;
            if header.dimension.is_some_and(|d| d != r.vector.len()) {
                return Err(corrupt(lineno, "vector dimension differs from header".into()));
            }
            store.upsert(KnowledgeChunk {
                chunk_id: ChunkId::new(r.source, r.index),
                kind: r.kind,
                text: r.text,
                embedding: r.vector,
            })?;
        }
        if store.len() != header.count {
            return Err(corrupt(1, format!("header count {} but {} records", header.count, store.len())));
        }
        Ok(store)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().expect("store lock poisoned")
    }
}
