//! Interaction embeddings: the provider abstraction, a deterministic
//! feature-hashing provider for offline use, and an HTTP provider.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_HASH_DIMENSION: usize = 256;
pub const DEFAULT_REMOTE_DIMENSION: usize = 1536;
pub const EMBED_API_KEY_ENV: &str = "SCM_EMBED_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("invalid embedding input: {0}")]
    Input(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding has non-finite component at position {0}")]
    NonFinite(usize),
    #[error("embedding provider failed: {message}")]
    Provider { message: String, retryable: bool },
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Provider { retryable: true, .. })
    }
}

/// A dense real vector. Providers always hand out unit-norm embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn basis(dim: usize, axis: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Embedding(v)
    }

    /// Scale to unit length. Fails on zero or non-finite input.
    pub fn normalized(mut self) -> Result<Self, EmbedError> {
        if let Some(pos) = self.0.iter().position(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite(pos));
        }
        let norm = self.norm();
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        for x in &mut self.0 {
            *x /= norm;
        }
        Ok(self)
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

pub type SharedEmbedder = Arc<dyn EmbeddingProvider>;

/// Text embedded for a memory item: the two summaries joined by one newline.
pub fn interaction_text(observation_summary: &str, response_summary: &str) -> String {
    format!("{observation_summary}\n{response_summary}")
}

pub fn embed_interaction(
    provider: &dyn EmbeddingProvider,
    observation_summary: &str,
    response_summary: &str,
) -> Result<Embedding, EmbedError> {
    if observation_summary.is_empty() && response_summary.is_empty() {
        return Err(EmbedError::Input(
            "observation and response summaries are both empty".into(),
        ));
    }
    provider.embed(&interaction_text(observation_summary, response_summary))
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Signed feature hashing over lowercase whitespace terms.
///
/// Each term lands in bucket `h % dimension`; the bit right above the bucket
/// (`(h / dimension) & 1`) picks the sign. Empty input maps to `e0`.
pub fn hash_embed(text: &str, dimension: usize) -> Embedding {
    assert!(dimension >= 8, "hash embedding dimension must be >= 8");
    let mut acc = vec![0.0f64; dimension];
    let dim = dimension as u64;
    for term in text.split_whitespace() {
        let h = fnv1a64(term.to_lowercase().as_bytes());
        let bucket = (h % dim) as usize;
        let sign = if (h / dim) & 1 == 1 { -1.0 } else { 1.0 };
        acc[bucket] += sign;
    }
    Embedding(acc)
        .normalized()
        .unwrap_or_else(|_| Embedding::basis(dimension, 0))
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbedError> {
        if dimension < 8 {
            return Err(EmbedError::Input(format!(
                "hash embedder needs dimension >= 8, got {dimension}"
            )));
        }
        Ok(Self { dimension })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_HASH_DIMENSION,
        }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        "hash"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        Ok(hash_embed(text, self.dimension))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub dimension: usize,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
    pub max_in_flight: usize,
}

impl RemoteEmbedderConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            dimension: DEFAULT_REMOTE_DIMENSION,
            api_key: std::env::var(EMBED_API_KEY_ENV).ok(),
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            request_timeout: Duration::from_secs(60),
            max_in_flight: 8,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a str,
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// Counting semaphore bounding concurrent HTTP requests.
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.limit {
            used = self.cv.wait(used).unwrap();
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

/// Embeddings over HTTP: POST `{"input", "model"}` and read `data[0].embedding`.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
    in_flight: InFlight,
    memo: Mutex<HashMap<String, Embedding>>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| EmbedError::Provider {
                message: e.to_string(),
                retryable: false,
            })?;
        let limit = config.max_in_flight.max(1);
        Ok(Self {
            config,
            client,
            in_flight: InFlight {
                limit,
                used: Mutex::new(0),
                cv: Condvar::new(),
            },
            memo: Mutex::new(HashMap::new()),
        })
    }

    fn request_once(&self, text: &str) -> Result<Embedding, EmbedError> {
        let _slot = self.in_flight.acquire();
        let mut req = self.client.post(&self.config.base_url).json(&EmbedRequest {
            input: text,
            model: &self.config.model,
        });
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Provider {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Provider {
                message: format!("HTTP {status}"),
                retryable: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        let body: EmbedResponse = resp.json().map_err(|e| EmbedError::Provider {
            message: format!("malformed embedding response: {e}"),
            retryable: false,
        })?;
        let first = body
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::Provider {
                message: "response carried no embedding".into(),
                retryable: false,
            })?;
        let v = Embedding(first.embedding);
        if v.dim() != self.config.dimension {
            return Err(EmbedError::Dimension {
                expected: self.config.dimension,
                got: v.dim(),
            });
        }
        v.normalized()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if let Some(hit) = self.memo.lock().unwrap().get(text) {
            return Ok(hit.clone());
        }
        let mut backoff = self.config.initial_backoff;
        let mut attempt = 1;
        let v = loop {
            match self.request_once(text) {
                Ok(v) => break v,
                Err(e) if e.is_retryable() && attempt < self.config.max_attempts => {
                    log::warn!("embedding attempt {attempt} failed: {e}; retrying");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        self.memo
            .lock()
            .unwrap()
            .insert(text.to_string(), v.clone());
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_maps_to_first_basis_vector() {
        let v = hash_embed("", 16);
        assert_eq!(v, Embedding::basis(16, 0));
        assert_eq!(hash_embed("   \n\t", 16), Embedding::basis(16, 0));
    }

    #[test]
    fn bag_of_words_ignores_order_and_case() {
        assert_eq!(hash_embed("run jog run", 256), hash_embed("jog run run", 256));
        assert_eq!(hash_embed("Run JOG", 256), hash_embed("run jog", 256));
    }

    #[test]
    fn hash_embedding_matches_manual_feature_hashing() {
        // independent recomputation of the signed bucket for a single term
        let h = fnv1a64(b"memory");
        let bucket = (h % 32) as usize;
        let sign = if (h / 32) % 2 == 1 { -1.0 } else { 1.0 };
        let v = hash_embed("MEMORY", 32);
        assert_eq!(v.0[bucket], sign);
        assert_eq!(v.0.iter().filter(|x| **x != 0.0).count(), 1);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -0.4, 0.5];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 0.6*0.8 + 0.8*0.6
        assert!((cosine(&[0.6, 0.8], &[0.8, 0.6]).unwrap() - 0.96).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbedError::ZeroVector));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(EmbedError::Dimension { .. })
        ));
    }

    #[test]
    fn interaction_embedding_is_deterministic() {
        let p = HashEmbedder::default();
        let a = embed_interaction(&p, "likes tea", "noted tea").unwrap();
        let b = embed_interaction(&p, "likes tea", "noted tea").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interaction_embedding_uses_newline_concatenation() {
        let p = HashEmbedder::default();
        let v = embed_interaction(&p, "likes tea", "noted tea").unwrap();
        assert_eq!(v, hash_embed("likes tea\nnoted tea", 256));
    }

    #[test]
    fn swapped_single_terms_embed_identically_under_bag_of_words() {
        // Hash provider oracle: "a\nb" and "b\na" carry the same term bag.
        let p = HashEmbedder::default();
        let ab = embed_interaction(&p, "a", "b").unwrap();
        let ba = embed_interaction(&p, "b", "a").unwrap();
        assert_eq!(ab, hash_embed("b a", 256));
        assert_eq!(ab, ba);
        // swapping texts that differ in content still changes nothing, while
        // changing the term multiset does
        let other = embed_interaction(&p, "a", "c").unwrap();
        assert_ne!(ab, other);
    }

    #[test]
    fn both_empty_is_an_input_error() {
        let p = HashEmbedder::default();
        assert!(matches!(
            embed_interaction(&p, "", ""),
            Err(EmbedError::Input(_))
        ));
        assert!(embed_interaction(&p, "", "only response").is_ok());
    }

    #[test]
    fn hash_embedder_rejects_tiny_dimensions() {
        assert!(HashEmbedder::new(4).is_err());
        assert!(HashEmbedder::new(8).is_ok());
    }

    #[test]
    fn disjoint_vocabularies_stay_nearly_orthogonal() {
        let corpus = [
            "my first sport was running in the park",
            "i adopted a grey cat named pixel",
            "the quarterly budget review is on friday",
            "we should book flights to lisbon soon",
            "please recommend a science fiction novel",
            "my sister studies marine biology abroad",
            "the kitchen faucet keeps dripping water",
            "learning rust ownership takes practice",
        ];
        for (i, a) in corpus.iter().enumerate() {
            for b in &corpus[i + 1..] {
                let shares = a
                    .split_whitespace()
                    .any(|t| b.split_whitespace().any(|u| u == t));
                if shares {
                    continue;
                }
                let c = cosine(hash_embed(a, 256).as_slice(), hash_embed(b, 256).as_slice())
                    .unwrap();
                assert!(c.abs() <= 0.5, "{a:?} vs {b:?}: {c}");
            }
        }
        let same = cosine(
            hash_embed("pixel the cat", 256).as_slice(),
            hash_embed("cat pixel the", 256).as_slice(),
        )
        .unwrap();
        assert!((same - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hash_embedding_is_unit_norm(text in "[a-z ]{1,60}", dim in 8usize..512) {
            let v = hash_embed(&text, dim);
            prop_assert_eq!(v.dim(), dim);
            prop_assert!((v.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_is_symmetric(a in proptest::collection::vec(-1.0f64..1.0, 6),
                               b in proptest::collection::vec(-1.0f64..1.0, 6)) {
            prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
            let ab = cosine(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
