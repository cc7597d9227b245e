//! Semantic similarity between an original sentence and a rewrite.
//!
//! Providers return scores in `[-1, 1]`. The engine only ever asks for the
//! similarity of candidates to the original sentence, so providers may
//! specialise [`SimilarityProvider::similarity_batch`] to encode the original
//! once per call.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{Rank, Vocabulary};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimilarityError {
    #[error("similarity provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("malformed embedding response: {0}")]
    MalformedResponse(String),
    #[error("vector dimensions differ ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine of an all-zero vector is undefined")]
    ZeroVector,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("{0:?} requires an endpoint")]
    MissingEndpoint(ProviderKind),
    #[error("{0:?} does not take an endpoint")]
    UnexpectedEndpoint(ProviderKind),
    #[error("bag-of-tokens similarity needs a vocabulary")]
    MissingVocabulary,
}

pub trait SimilarityProvider: Send + Sync {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError>;

    /// Similarity of every candidate to `original`, in order.
    fn similarity_batch(
        &self,
        original: &str,
        candidates: &[&str],
    ) -> Result<Vec<f64>, SimilarityError> {
        candidates
            .iter()
            .map(|c| self.similarity(original, c))
            .collect()
    }

    fn name(&self) -> &str;
}

/// `dot(u, v) / (‖u‖·‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>();
    let nv = v.iter().map(|a| a * a).sum::<f64>();
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// 1 for byte-identical strings, else 0.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExactMatch;

impl SimilarityProvider for ExactMatch {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        Ok(if a == b { 1.0 } else { 0.0 })
    }

    fn name(&self) -> &str {
        "exact_match"
    }
}

/// Admits every rewrite.
#[derive(Debug, Default, Clone, Copy)]
pub struct AlwaysOne;

impl SimilarityProvider for AlwaysOne {
    fn similarity(&self, _: &str, _: &str) -> Result<f64, SimilarityError> {
        Ok(1.0)
    }

    fn name(&self) -> &str {
        "always_one"
    }
}

/// What a bag-of-tokens vector counts.
#[derive(Debug, Clone)]
pub enum BagUnit {
    /// Whitespace-separated words.
    Whitespace,
    /// Subword tokens of a BPE vocabulary.
    Subword(Arc<Vocabulary>),
}

/// Cosine of token-count vectors.
///
/// Word order is invisible to this measure: `"a b"` and `"b a"` score 1.
#[derive(Debug, Clone)]
pub struct BagOfTokens {
    unit: BagUnit,
}

type Bag<K> = HashMap<K, f64>;

fn bag_of<K: Hash + Eq>(items: impl Iterator<Item = K>) -> Bag<K> {
    let mut bag = HashMap::new();
    for k in items {
        *bag.entry(k).or_insert(0.0) += 1.0;
    }
    bag
}

fn bag_cosine<K: Hash + Eq>(a: &Bag<K>, b: &Bag<K>) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(k, x)| large.get(k).map(|y| x * y))
        .sum();
    // Counts are small integers, so these sums are exact and order-independent.
    let na = a.values().map(|x| x * x).sum::<f64>();
    let nb = b.values().map(|x| x * x).sum::<f64>();
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Token ids of every whitespace-separated word, each encoded with a leading
/// space. A word then contributes the same ids wherever it sits, so removing
/// the first word of a sentence does not also change the second word's tokens.
fn word_tokens<'a>(vocab: &'a Vocabulary, text: &'a str) -> impl Iterator<Item = Rank> + 'a {
    let mut buf = String::new();
    text.split_whitespace().flat_map(move |w| {
        buf.clear();
        buf.push(' ');
        buf.push_str(w);
        vocab.encode(&buf).ids
    })
}

impl BagOfTokens {
    pub fn new(unit: BagUnit) -> Self {
        BagOfTokens { unit }
    }

    pub fn whitespace() -> Self {
        Self::new(BagUnit::Whitespace)
    }

    pub fn subword(vocab: Arc<Vocabulary>) -> Self {
        Self::new(BagUnit::Subword(vocab))
    }

    fn score_all(&self, original: &str, candidates: &[&str]) -> Vec<f64> {
        match &self.unit {
            BagUnit::Whitespace => {
                let base = bag_of(original.split_whitespace());
                candidates
                    .iter()
                    .map(|c| bag_cosine(&base, &bag_of(c.split_whitespace())))
                    .collect()
            }
            BagUnit::Subword(vocab) => {
                let base = bag_of(word_tokens(vocab, original));
                candidates
                    .iter()
                    .map(|c| bag_cosine(&base, &bag_of(word_tokens(vocab, c))))
                    .collect()
            }
        }
    }
}

impl SimilarityProvider for BagOfTokens {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        Ok(self.score_all(a, &[b])[0])
    }

    fn similarity_batch(
        &self,
        original: &str,
        candidates: &[&str],
    ) -> Result<Vec<f64>, SimilarityError> {
        Ok(self.score_all(original, candidates))
    }

    fn name(&self) -> &str {
        "local_bag_of_tokens"
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

/// Counting semaphore for blocking callers.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

const CACHE_LIMIT: usize = 8192;

/// Client for the `/embed` protocol: `POST {"texts": [...]}` →
/// `{"dim": D, "embeddings": [[...], ...]}`.
///
/// Embeddings are cached by text, so the original sentence of an
/// abstraction run is sent once rather than once per iteration.
pub struct RemoteEmbedding {
    url: String,
    agent: ureq::Agent,
    permits: Permits,
    cache: Mutex<HashMap<String, Arc<Vec<f64>>>>,
}

impl std::fmt::Debug for RemoteEmbedding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEmbedding").field("url", &self.url).finish()
    }
}

impl RemoteEmbedding {
    pub fn new(endpoint: &str, timeout: Duration, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteEmbedding {
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            agent,
            permits: Permits::new(max_in_flight),
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Embed `texts` without touching the cache. Vectors come back unit-normalized.
    pub fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, SimilarityError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let _permit = self.permits.acquire();
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| SimilarityError::ProviderUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(SimilarityError::ProviderUnavailable(format!(
                "{} answered {status}",
                self.url
            )));
        }
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| SimilarityError::MalformedResponse(e.to_string()))?;
        if body.embeddings.len() != texts.len() {
            return Err(SimilarityError::MalformedResponse(format!(
                "{} embeddings for {} texts",
                body.embeddings.len(),
                texts.len()
            )));
        }
        body.embeddings
            .into_iter()
            .map(|v| {
                if v.len() != body.dim {
                    return Err(SimilarityError::MalformedResponse(format!(
                        "vector of length {} in a response of dim {}",
                        v.len(),
                        body.dim
                    )));
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(SimilarityError::MalformedResponse("zero or non-finite vector".into()));
                }
                Ok(v.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    }

    fn embed_cached(&self, texts: &[&str]) -> Result<Vec<Arc<Vec<f64>>>, SimilarityError> {
        let mut missing: Vec<&str> = {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t))
                .collect()
        };
        missing.sort_unstable();
        missing.dedup();
        let fresh = self.embed(&missing)?;
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if cache.len() + fresh.len() > CACHE_LIMIT {
            cache.clear();
        }
        let mut out_of_cache: HashMap<&str, Arc<Vec<f64>>> = HashMap::new();
        for (text, vec) in missing.into_iter().zip(fresh) {
            let vec = Arc::new(vec);
            cache.insert(text.to_string(), vec.clone());
            out_of_cache.insert(text, vec);
        }
        Ok(texts
            .iter()
            .map(|t| {
                out_of_cache
                    .get(t)
                    .cloned()
                    .or_else(|| cache.get(*t).cloned())
                    .expect("every text was embedded or cached")
            })
            .collect())
    }
}

impl SimilarityProvider for RemoteEmbedding {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, SimilarityError> {
        let v = self.embed_cached(&[a, b])?;
        cosine(&v[0], &v[1])
    }

    fn similarity_batch(
        &self,
        original: &str,
        candidates: &[&str],
    ) -> Result<Vec<f64>, SimilarityError> {
        let mut texts = Vec::with_capacity(candidates.len() + 1);
        texts.push(original);
        texts.extend_from_slice(candidates);
        let vecs = self.embed_cached(&texts)?;
        vecs[1..].iter().map(|v| cosine(&vecs[0], v)).collect()
    }

    fn name(&self) -> &str {
        "remote_embedding"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteEmbedding,
    LocalBagOfTokens,
    ExactMatch,
    AlwaysOne,
}

/// Serializable description of a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityProviderSpec {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// `"whitespace"` counts words; anything else (or nothing) counts subword
    /// tokens of the engine's vocabulary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_ref: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_max_in_flight() -> usize {
    8
}

impl SimilarityProviderSpec {
    pub fn of_kind(kind: ProviderKind) -> Self {
        SimilarityProviderSpec {
            kind,
            endpoint: None,
            vocab_ref: None,
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        SimilarityProviderSpec {
            endpoint: Some(endpoint.into()),
            ..Self::of_kind(ProviderKind::RemoteEmbedding)
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        match (self.kind, &self.endpoint) {
            (ProviderKind::RemoteEmbedding, None) => Err(SpecError::MissingEndpoint(self.kind)),
            (ProviderKind::RemoteEmbedding, Some(_)) => Ok(()),
            (kind, Some(_)) => Err(SpecError::UnexpectedEndpoint(kind)),
            (_, None) => Ok(()),
        }
    }

    /// Instantiate the provider. `vocab` backs subword bag-of-tokens scoring.
    pub fn build(
        &self,
        vocab: Option<Arc<Vocabulary>>,
    ) -> Result<Arc<dyn SimilarityProvider>, SpecError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::ExactMatch => Arc::new(ExactMatch),
            ProviderKind::AlwaysOne => Arc::new(AlwaysOne),
            ProviderKind::LocalBagOfTokens => {
                if self.vocab_ref.as_deref() == Some("whitespace") {
                    Arc::new(BagOfTokens::whitespace())
                } else {
                    Arc::new(BagOfTokens::subword(vocab.ok_or(SpecError::MissingVocabulary)?))
                }
            }
            ProviderKind::RemoteEmbedding => Arc::new(RemoteEmbedding::new(
                self.endpoint.as_deref().unwrap_or_default(),
                Duration::from_millis(self.timeout_ms),
                self.max_in_flight,
            )),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_match() {
        assert_eq!(ExactMatch.similarity("x", "x").unwrap(), 1.0);
        assert_eq!(ExactMatch.similarity("x", "y").unwrap(), 0.0);
    }

    #[test]
    fn always_one() {
        assert_eq!(AlwaysOne.similarity("x", "completely different").unwrap(), 1.0);
    }

    #[test]
    fn whitespace_bag_cosine() {
        // Counts (1,1,1) against (1,1,0): 2 / (√3·√2).
        let expected = 2.0 / (3f64.sqrt() * 2f64.sqrt());
        let got = BagOfTokens::whitespace().similarity("a b c", "a b").unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn bag_ignores_order() {
        assert_eq!(BagOfTokens::whitespace().similarity("a b", "b a").unwrap(), 1.0);
    }

    #[test]
    fn bag_empty_inputs() {
        let p = BagOfTokens::whitespace();
        assert_eq!(p.similarity("", "").unwrap(), 1.0);
        assert_eq!(p.similarity("", "a").unwrap(), 0.0);
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 2.0, 3.0], &[5.0, 10.0, 15.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        assert_eq!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(SimilarityError::DimensionMismatch { left: 1, right: 2 })
        );
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), Err(SimilarityError::ZeroVector));
    }

    #[test]
    fn spec_validation() {
        assert!(SimilarityProviderSpec::of_kind(ProviderKind::RemoteEmbedding)
            .validate()
            .is_err());
        let mut spec = SimilarityProviderSpec::of_kind(ProviderKind::ExactMatch);
        spec.endpoint = Some("http://x".into());
        assert_eq!(
            spec.validate(),
            Err(SpecError::UnexpectedEndpoint(ProviderKind::ExactMatch))
        );
        assert!(SimilarityProviderSpec::remote("http://x").validate().is_ok());
        assert!(matches!(
            SimilarityProviderSpec::of_kind(ProviderKind::LocalBagOfTokens).build(None),
            Err(SpecError::MissingVocabulary)
        ));
    }

    #[test]
    fn spec_json_shape() {
        let spec: SimilarityProviderSpec =
            serde_json::from_str(r#"{"kind":"local_bag_of_tokens","vocab_ref":"whitespace"}"#)
                .unwrap();
        assert_eq!(spec.kind, ProviderKind::LocalBagOfTokens);
        assert!(serde_json::from_str::<SimilarityProviderSpec>(r#"{"kind":"exact_match","bogus":1}"#)
            .is_err());
    }

    #[test]
    fn unreachable_remote_is_unavailable() {
        // Port 9 (discard) on localhost is closed in the test environment.
        let remote = RemoteEmbedding::new("http://127.0.0.1:9", Duration::from_millis(500), 2);
        assert!(matches!(
            remote.similarity("a", "b"),
            Err(SimilarityError::ProviderUnavailable(_))
        ));
        assert_eq!(remote.embed(&[]).unwrap(), Vec::<Vec<f64>>::new());
    }

    proptest! {
        #[test]
        fn providers_symmetric_and_reflexive(a in "[a-z ]{0,24}", b in "[a-z ]{0,24}") {
            let providers: Vec<Box<dyn SimilarityProvider>> = vec![
                Box::new(ExactMatch),
                Box::new(AlwaysOne),
                Box::new(BagOfTokens::whitespace()),
            ];
            for p in &providers {
                let ab = p.similarity(&a, &b).unwrap();
                let ba = p.similarity(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&ab));
                prop_assert!(p.similarity(&a, &a).unwrap() >= 1.0 - 1e-6);
            }
        }
    }
}
