//! The `/embed` client against an in-process mock sidecar.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::routing::post;
use axum::{Json, Router};
use mondrian_core::engine::{apply_edit, render, tokenize_items};
use mondrian_core::similarity::{
    cosine, ProviderKind, RemoteEmbedding, SimilarityError, SimilarityProvider, SimilarityProviderSpec,
};
use serde_json::{json, Value};

/// Serve `app` on a background runtime and return its base URL.
fn serve(app: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

/// Letter-frequency embedding over a..z, so cosines are easy to predict.
fn letters(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 26];
    for c in text.to_ascii_lowercase().bytes().filter(u8::is_ascii_lowercase) {
        v[(c - b'a') as usize] += 1.0;
    }
    v
}

fn mock(calls: Arc<AtomicUsize>, texts_seen: Arc<AtomicUsize>) -> Router {
    Router::new().route(
        "/embed",
        post(move |Json(body): Json<Value>| {
            let calls = calls.clone();
            let texts_seen = texts_seen.clone();
            async move {
                calls.fetch_add(1, Ordering::SeqCst);
                let texts: Vec<String> = serde_json::from_value(body["texts"].clone()).unwrap();
                texts_seen.fetch_add(texts.len(), Ordering::SeqCst);
                let embeddings: Vec<Vec<f64>> = texts.iter().map(|t| letters(t)).collect();
                Json(json!({"dim": 26, "embeddings": embeddings}))
            }
        }),
    )
}

#[test]
fn cosine_of_returned_vectors() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(AtomicUsize::new(0));
    let url = serve(mock(calls.clone(), seen.clone()));
    let p = RemoteEmbedding::new(&url, Duration::from_secs(5), 4);
    assert!((p.similarity("ab", "ab").unwrap() - 1.0).abs() < 1e-12);
    assert!(p.similarity("ab", "cd").unwrap().abs() < 1e-12);
    // (1,1)·(1,0) / (√2 · 1)
    let s = p.similarity("ab", "a").unwrap();
    assert!((s - 1.0 / 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn embeddings_are_cached() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(AtomicUsize::new(0));
    let url = serve(mock(calls.clone(), seen.clone()));
    let p = RemoteEmbedding::new(&url, Duration::from_secs(5), 4);
    let scores = p.similarity_batch("abc", &["ab", "bc", "ab"]).unwrap();
    assert_eq!(scores.len(), 3);
    assert_eq!(scores[0], scores[2]);
    assert_eq!(seen.load(Ordering::SeqCst), 3);
    p.similarity_batch("abc", &["ab", "bc"]).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    p.similarity("abc", "c").unwrap();
    assert_eq!(seen.load(Ordering::SeqCst), 4);
}

#[test]
fn concurrent_callers_share_the_client() {
    let calls = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(AtomicUsize::new(0));
    let url = serve(mock(calls, seen));
    let p = Arc::new(RemoteEmbedding::new(&url, Duration::from_secs(5), 2));
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let p = p.clone();
            std::thread::spawn(move || p.similarity("hello", &"hello".repeat(i + 1)).unwrap())
        })
        .collect();
    for h in handles {
        assert!((h.join().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let p = RemoteEmbedding::new("http://127.0.0.1:9", Duration::from_millis(500), 1);
    assert!(matches!(p.similarity("a", "b"), Err(SimilarityError::ProviderUnavailable(_))));
}

#[test]
fn malformed_responses_are_rejected() {
    let app = Router::new()
        .route("/short/embed", post(|| async { Json(json!({"dim": 2, "embeddings": [[1.0, 0.0]]})) }))
        .route("/dim/embed", post(|| async { Json(json!({"dim": 3, "embeddings": [[1.0, 0.0], [0.0, 1.0]]})) }))
        .route("/zero/embed", post(|| async { Json(json!({"dim": 2, "embeddings": [[0.0, 0.0], [0.0, 1.0]]})) }))
        .route("/junk/embed", post(|| async { "not json" }));
    let url = serve(app);
    for path in ["short", "dim", "zero", "junk"] {
        let p = RemoteEmbedding::new(&format!("{url}/{path}"), Duration::from_secs(5), 1);
        assert!(
            matches!(p.similarity("x", "y"), Err(SimilarityError::MalformedResponse(_))),
            "{path}"
        );
    }
    let p = RemoteEmbedding::new(&format!("{url}/missing"), Duration::from_secs(5), 1);
    assert!(matches!(p.similarity("x", "y"), Err(SimilarityError::ProviderUnavailable(_))));
}

#[test]
fn spec_builds_a_remote_provider() {
    let spec = SimilarityProviderSpec::remote("http://127.0.0.1:9");
    assert_eq!(spec.kind, ProviderKind::RemoteEmbedding);
    let provider = spec.build(None).unwrap();
    assert_eq!(provider.name(), "remote_embedding");
    assert!(SimilarityProviderSpec::of_kind(ProviderKind::RemoteEmbedding).validate().is_err());
}

#[test]
fn abstraction_passes_through_when_remote_is_down() {
    let mut config = mondrian_core::AbstractionConfig::default();
    config.provider = SimilarityProviderSpec {
        timeout_ms: 300,
        ..SimilarityProviderSpec::remote("http://127.0.0.1:9")
    };
    let engine = mondrian_core::Abstractor::new(config, common::cl100k(), Arc::new(mondrian_core::Lexicon::empty())).unwrap();
    let text = "Please tell me a story about a brave little dog.";
    let result = engine.abstract_query(text);
    assert_eq!(result.abstracted, text);
    assert!(result.passed_through);
    assert!(result.warning.is_some());
}

#[test]
fn abstraction_uses_the_remote_scores() {
    let url = serve(mock(Arc::default(), Arc::default()));
    let mut config = mondrian_core::AbstractionConfig::default();
    config.alpha = 0.9;
    config.provider = SimilarityProviderSpec::remote(url);
    let engine = mondrian_core::Abstractor::new(config, common::cl100k(), Arc::new(mondrian_core::Lexicon::empty())).unwrap();
    let result = engine.abstract_query("the quick brown fox jumps over the lazy dog");
    assert!(!result.trace.is_empty());
    assert!(result.abstracted_tokens < result.original_tokens);
    let original = "the quick brown fox jumps over the lazy dog";
    let mut items = tokenize_items(original);
    for t in &result.trace {
        items = apply_edit(&items, &t.op);
        let expected = cosine(&letters(original), &letters(&render(&items))).unwrap();
        assert!((expected - t.similarity).abs() < 1e-9);
        assert!(t.similarity >= 0.9);
    }
    assert_eq!(render(&items), result.abstracted);
}
