//! Embedders and rerankers.

use std::time::Duration;

use serde_json::{json, Value};

use super::RetrievalError;

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError>;
}

pub trait Reranker: Send + Sync {
    /// Higher is more relevant.
    fn score(&self, query: &str, text: &str) -> Result<f64, RetrievalError>;
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(PRIME);
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(PRIME);
    }
    hash
}

/// Signed feature hashing of the word multiset into a unit vector.
///
/// Deterministic across runs and platforms and insensitive to word order.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(256, 0x5eed)
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let mut v = vec![0f32; self.dimension];
        for token in tokenize(text) {
            let h = fnv1a(self.seed, token.as_bytes());
            let slot = (h % self.dimension as u64) as usize;
            v[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Fraction of distinct query words that also occur in the candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapReranker;

impl Reranker for OverlapReranker {
    fn score(&self, query: &str, text: &str) -> Result<f64, RetrievalError> {
        let query: std::collections::BTreeSet<String> = tokenize(query).collect();
        if query.is_empty() {
            return Ok(0.0);
        }
        let text: std::collections::BTreeSet<String> = tokenize(text).collect();
        Ok(query.intersection(&text).count() as f64 / query.len() as f64)
    }
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Embedding service reached over HTTP.
///
/// `POST {base_url}/embed` with `{"model", "input"}`; the vector is read from
/// `response_path` (default `embedding`).
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    dimension: usize,
    response_path: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, dimension: usize) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            dimension,
            response_path: "embedding".into(),
            agent: http_agent(),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let body = json!({"model": self.model, "input": text});
        let value = post_json(&self.agent, &self.base_url, "embed", &body)?;
        let vector = walk(&value, &self.response_path)
            .and_then(Value::as_array)
            .ok_or_else(|| RetrievalError::Service(format!("no vector at `{}`", self.response_path)))?;
        vector
            .iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| RetrievalError::Service("non-numeric embedding component".into()))
            })
            .collect()
    }
}

/// Reranking service reached over HTTP.
///
/// `POST {base_url}/rerank` with `{"model", "query", "documents": [text]}`;
/// the score is read from `scores.0`.
pub struct HttpReranker {
    base_url: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpReranker {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            agent: http_agent(),
        }
    }
}

impl Reranker for HttpReranker {
    fn score(&self, query: &str, text: &str) -> Result<f64, RetrievalError> {
        let body = json!({"model": self.model, "query": query, "documents": [text]});
        let value = post_json(&self.agent, &self.base_url, "rerank", &body)?;
        walk(&value, "scores.0")
            .and_then(Value::as_f64)
            .ok_or_else(|| RetrievalError::Service("no score at `scores.0`".into()))
    }
}

fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(60)))
        .build()
        .into()
}

fn post_json(agent: &ureq::Agent, base: &str, route: &str, body: &Value) -> Result<Value, RetrievalError> {
    let url = format!("{}/{route}", base.trim_end_matches('/'));
    let text = agent
        .post(&url)
        .header("Content-Type", "application/json")
        .send(body.to_string())
        .and_then(|mut r| r.body_mut().read_to_string())
        .map_err(|e| RetrievalError::Service(format!("{url}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| RetrievalError::Service(format!("{url}: {e}")))
}

fn walk<'v>(value: &'v Value, path: &str) -> Option<&'v Value> {
    path.split('.').try_fold(value, |v, seg| match v {
        Value::Array(items) => items.get(seg.parse::<usize>().ok()?),
        Value::Object(map) => map.get(seg),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedding_is_unit_and_order_insensitive() {
        let e = HashEmbedder::default();
        let a = e.embed("nmap open ports ssh").unwrap();
        let b = e.embed("ssh ports open NMAP").unwrap();
        assert_eq!(a, b);
        let norm: f32 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(a.len(), 256);
        assert!(e.embed("").unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine_similarity(&[3.0, 4.0], &[4.0, 3.0]) - 0.96).abs() < 1e-6);
    }

    #[test]
    fn overlap_reranker() {
        let r = OverlapReranker;
        assert_eq!(r.score("ssh brute force", "hydra brute force against ssh").unwrap(), 1.0);
        assert!((r.score("ssh brute force", "ssh banner").unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.score("", "x").unwrap(), 0.0);
    }
}
