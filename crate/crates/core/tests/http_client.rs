mod common;

use std::net::TcpListener;
use std::time::Duration;

use seqrec::http::{HttpError, RetryPolicy};
use seqrec::llm::{complete, CompletionParams, HttpChatBackend, LlmError, ResponseCache};
use seqrec::prompts::{ChatMessage, PromptBundle, Role};
use seqrec::retrieval::{embed, embed_many, EmbeddingCache, EmbeddingProvider, HttpEmbedder, MockEmbedder};

use common::{chat_reply, serve};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        initial_backoff: Duration::from_millis(5),
        multiplier: 2.0,
    }
}

fn bundle(text: &str) -> PromptBundle {
    PromptBundle {
        messages: vec![ChatMessage {
            role: Role::User,
            content: text.into(),
        }],
        token_estimate: text.len().div_ceil(4),
        presented_candidates: vec![],
    }
}

fn backend(url: &str) -> HttpChatBackend {
    HttpChatBackend::new(url, Some("test-key".into()), Duration::from_secs(5), fast_retry()).unwrap()
}

#[test]
fn rate_limited_twice_then_ok() {
    let server = serve(|n, _| match n {
        0 | 1 => (429, "{\"error\":\"slow down\"}".into()),
        _ => (200, chat_reply("1. Heat")),
    });
    let record = complete(&bundle("rank"), &CompletionParams::default(), &backend(&server.url), None).unwrap();
    assert_eq!(record.retry_count, 2);
    assert_eq!(record.response, "1. Heat");
    assert!(record.latency_ms.is_some());
    assert!(record.provider.starts_with("http:"));
}

#[test]
fn request_carries_model_and_messages() {
    let server = serve(|_, body| {
        assert_eq!(body["model"], "gpt-3.5-turbo");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 1024);
        assert_eq!(body["messages"][0]["role"], "user");
        (200, chat_reply(body["messages"][0]["content"].as_str().unwrap()))
    });
    let record = complete(&bundle("echo me"), &CompletionParams::default(), &backend(&server.url), None).unwrap();
    assert_eq!(record.response, "echo me");
}

#[test]
fn unreachable_host_fails_after_three_attempts() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let err = complete(
        &bundle("x"),
        &CompletionParams::default(),
        &backend(&format!("http://127.0.0.1:{port}")),
        None,
    )
    .unwrap_err();
    match err {
        LlmError::Http(HttpError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn server_errors_exhaust_retries_with_last_status() {
    let server = serve(|_, _| (500, "{}".into()));
    let err = complete(&bundle("x"), &CompletionParams::default(), &backend(&server.url), None).unwrap_err();
    match err {
        LlmError::Http(e) => {
            assert_eq!(e.status(), Some(500));
            assert!(matches!(e, HttpError::Status { attempts: 3, .. }));
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert_eq!(server.hits.load(std::sync::atomic::Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(|_, _| (401, "{\"error\":\"bad key\"}".into()));
    let err = complete(&bundle("x"), &CompletionParams::default(), &backend(&server.url), None).unwrap_err();
    assert!(matches!(err, LlmError::Http(HttpError::Status { status: 401, attempts: 1, .. })));
}

#[test]
fn response_cache_avoids_second_request() {
    let server = serve(|_, _| (200, chat_reply("1. Cached")));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("responses.jsonl");
    let b = backend(&server.url);
    let params = CompletionParams::default();
    {
        let cache = ResponseCache::open(&path).unwrap();
        assert!(!complete(&bundle("p"), &params, &b, Some(&cache)).unwrap().cached);
    }
    let cache = ResponseCache::open(&path).unwrap();
    let again = complete(&bundle("p"), &params, &b, Some(&cache)).unwrap();
    assert!(again.cached);
    assert_eq!(again.response, "1. Cached");
    assert_eq!(server.hits.load(std::sync::atomic::Ordering::SeqCst), 1);
}

#[test]
fn http_embedder_respects_indices() {
    let server = serve(|_, body| {
        let n = body["input"].as_array().unwrap().len();
        let data: Vec<_> = (0..n)
            .rev()
            .map(|i| serde_json::json!({"index": i, "embedding": [i as f64 + 1.0, 1.0]}))
            .collect();
        (200, serde_json::json!({ "data": data }).to_string())
    });
    let e = HttpEmbedder::new(format!("{}/embeddings", server.url), "emb", None, Duration::from_secs(5), fast_retry())
        .unwrap();
    let v = e.embed_batch(&["a".into(), "b".into(), "c".into()]).unwrap();
    assert_eq!(v, vec![vec![1.0, 1.0], vec![2.0, 1.0], vec![3.0, 1.0]]);
}

#[test]
fn embedding_cache_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vectors.jsonl");
    let texts: Vec<String> = (0..10).map(|i| format!("Film {i}, Film {}", i + 1)).collect();
    let provider = MockEmbedder::new(16, 3);
    let first = {
        let cache = EmbeddingCache::open(&path).unwrap();
        embed_many(&texts, &provider, &cache, 4, 2).unwrap()
    };
    let calls = provider.calls();
    let cache = EmbeddingCache::open(&path).unwrap();
    assert_eq!(cache.len(), 10);
    for (t, v) in texts.iter().zip(&first) {
        assert_eq!(&embed(t, &provider, &cache).unwrap(), v);
    }
    assert_eq!(provider.calls(), calls);
}
