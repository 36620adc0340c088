//! Embedding providers and cosine similarity.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f32>>;

    /// Identifies the provider and its settings; stored with every index.
    fn fingerprint(&self) -> String;

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// `u·v / (‖u‖‖v‖)` computed in f64. A zero vector has similarity 0.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Parameter(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

pub fn is_zero_vector(v: &[f32]) -> bool {
    v.iter().all(|x| *x == 0.0)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
}

/// Deterministic bag-of-tokens embedding: each token hashes (FNV-1a) into one of
/// `dimension` buckets, then the count vector is L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut counts = vec![0f64; self.dimension];
        for tok in tokenize(text) {
            counts[(fnv1a(tok.as_bytes()) % self.dimension as u64) as usize] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(vec![0.0; self.dimension]);
        }
        Ok(counts.into_iter().map(|c| (c / norm) as f32).collect())
    }

    fn fingerprint(&self) -> String {
        format!("hashing-fnv1a/dim={}", self.dimension)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for &T {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        (**self).embed(text)
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<T> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        (**self).embed(text)
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

/// Memoizes a non-deterministic provider so repeated texts get their first embedding.
pub struct CachedEmbedder<P> {
    inner: P,
    cache: Mutex<HashMap<String, Vec<f32>>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        Ok(self
            .cache
            .lock()
            .unwrap()
            .entry(text.to_string())
            .or_insert(v)
            .clone())
    }

    fn fingerprint(&self) -> String {
        format!("cached({})", self.inner.fingerprint())
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    /// Name of the environment variable holding the bearer credential.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

/// Client for an embeddings endpoint (`{"model", "input"}` in, `data[0].embedding` out).
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Result<Self> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(Self {
            config,
            api_key,
            client,
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut req = self.client.post(&self.config.endpoint).json(&EmbeddingRequest {
            model: &self.config.model,
            input: text,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Error::transport(format!("embedding request: {e}"), true))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::transport(
                format!("embedding endpoint returned {status}"),
                status.is_server_error() || status.as_u16() == 429,
            ));
        }
        let body: EmbeddingResponse = resp
            .json()
            .map_err(|e| Error::transport(format!("embedding response: {e}"), false))?;
        let v = body
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| Error::transport("embedding response has no data", false))?;
        if v.len() != self.config.dimension {
            return Err(Error::transport(
                format!(
                    "embedding has dimension {}, expected {}",
                    v.len(),
                    self.config.dimension
                ),
                false,
            ));
        }
        Ok(v)
    }

    fn fingerprint(&self) -> String {
        format!(
            "http/{}/{}/dim={}",
            self.config.endpoint, self.config.model, self.config.dimension
        )
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_reference_values() {
        let u = [1.0, 2.0, 3.0];
        assert_eq!(cosine_similarity(&u, &u).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine_similarity(&u, &[4.0, 5.0, 6.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.974632).abs() < 1e-6);
    }

    #[test]
    fn cosine_zero_and_mismatch() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hashing_embedder_identity_and_overlap() {
        let e = HashingEmbedder::new(64);
        let a = e.embed("Hemoglobin trend low").unwrap();
        assert_eq!(a, e.embed("hemoglobin, TREND low").unwrap());
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        let b = e.embed("hemoglobin").unwrap();
        let c = e.embed("zzzqqq").unwrap();
        assert!(cosine_similarity(&a, &b).unwrap() > cosine_similarity(&a, &c).unwrap());
        assert!(is_zero_vector(&e.embed("  ... ").unwrap()));
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant_and_symmetric(
            u in proptest::collection::vec(-10.0f32..10.0, 8),
            v in proptest::collection::vec(-10.0f32..10.0, 8),
            a in 0.1f32..10.0,
            b in 0.1f32..10.0,
        ) {
            prop_assume!(!is_zero_vector(&u) && !is_zero_vector(&v));
            let base = cosine_similarity(&u, &v).unwrap();
            let su: Vec<f32> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f32> = v.iter().map(|x| x * b).collect();
            prop_assert!((cosine_similarity(&su, &sv).unwrap() - base).abs() < 1e-5);
            prop_assert_eq!(cosine_similarity(&v, &u).unwrap(), base);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
