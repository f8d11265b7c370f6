mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use schema_linker::llm::{
    render_src_dst_prompt, Completion, CompletionBackend, CompletionRequest, HttpBackend,
    LlmEndpointExtractor, LlmError, ReplayCache,
};
use schema_linker::pathfinder::EndpointOracle;
use schema_linker::{ingest_sqlite, Schema};

fn shop() -> (tempfile::TempDir, Schema) {
    let dir = tempfile::tempdir().unwrap();
    let root = common::build_shop(dir.path());
    let schema = ingest_sqlite(&root.join("shop/shop.sqlite"))
        .unwrap()
        .schema;
    (dir, schema)
}

fn request(user: &str) -> CompletionRequest {
    CompletionRequest {
        model_name: "m".into(),
        system_text: "sys".into(),
        user_text: user.into(),
        temperature: 0.2,
    }
}

/// Serves a fixed sequence of (status, body) responses, one per connection.
fn scripted_http(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://{}/v1/chat/completions",
        listener.local_addr().unwrap()
    );
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        let mut responses = responses.into_iter();
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            counter.fetch_add(1, Ordering::SeqCst);
            let Some((status, payload)) = responses.next() else {
                break;
            };
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    (url, hits)
}

fn chat_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3}
    })
    .to_string()
}

#[test]
fn http_backend_retries_server_errors() {
    let (url, hits) = scripted_http(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, chat_body("src=a, dst=b")),
    ]);
    let backend = HttpBackend::new(url, Some("k".into()))
        .unwrap()
        .with_backoff(Duration::from_millis(5));
    let c = backend.complete(&request("hi")).unwrap();
    assert_eq!(c.text, "src=a, dst=b");
    assert_eq!(c.usage.unwrap().input_tokens, 11);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn http_backend_gives_up() {
    let (url, hits) = scripted_http(vec![
        (500, "{}".into()),
        (500, "{}".into()),
        (500, "{}".into()),
    ]);
    let backend = HttpBackend::new(url, None)
        .unwrap()
        .with_backoff(Duration::from_millis(5));
    assert!(matches!(
        backend.complete(&request("hi")),
        Err(LlmError::Backend(_))
    ));
    assert_eq!(hits.load(Ordering::SeqCst), 3);

    let (url, hits) = scripted_http(vec![(401, "{\"error\": \"bad key\"}".into())]);
    let backend = HttpBackend::new(url, None)
        .unwrap()
        .with_backoff(Duration::from_millis(5));
    let err = backend.complete(&request("hi")).unwrap_err();
    assert!(err.to_string().contains("401"));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

/// Counts calls and returns the user text reversed.
#[derive(Default)]
struct Echo {
    calls: AtomicUsize,
}

impl CompletionBackend for Echo {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(2));
        Ok(Completion::text(
            request.user_text.chars().rev().collect::<String>(),
        ))
    }
}

#[test]
fn concurrent_recording_keeps_one_entry_per_digest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let cache = ReplayCache::record(&path, Box::new(Echo::default())).unwrap();
    let prompts: Vec<String> = (0..200).map(|i| format!("prompt {}", i % 25)).collect();
    let replies: Vec<String> = prompts
        .par_iter()
        .map(|p| cache.complete(&request(p)).unwrap().text)
        .collect();
    for (p, r) in prompts.iter().zip(&replies) {
        assert_eq!(&r.chars().rev().collect::<String>(), p);
    }
    assert_eq!(cache.len(), 25);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 25);

    let replay = ReplayCache::replay(&path).unwrap();
    assert_eq!(
        replay.complete(&request("prompt 3")).unwrap().text,
        "3 tpmorp"
    );
    assert!(matches!(
        replay.complete(&request("novel")),
        Err(LlmError::CacheMiss(_))
    ));
}

#[test]
fn digest_ignores_line_endings_only() {
    let a = request("line one\nline two");
    let b = request("line one\r\nline two");
    assert_eq!(a.digest(), b.digest());
    let mut c = a.clone();
    c.temperature = 0.3;
    assert_ne!(a.digest(), c.digest());
    let mut d = a.clone();
    d.model_name = "other".into();
    assert_ne!(a.digest(), d.digest());
}

#[test]
fn corrupt_cache_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    std::fs::write(&path, "\n{not json}\n").unwrap();
    match ReplayCache::replay(&path) {
        Err(LlmError::CacheCorrupt { line, .. }) => assert_eq!(line, 2),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("corrupt cache accepted"),
    }
    assert!(ReplayCache::replay(dir.path().join("absent.jsonl")).is_err());
}

/// Replies from a fixed list, in order.
struct Sequence(Mutex<Vec<&'static str>>, Mutex<Vec<String>>);

impl CompletionBackend for Sequence {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        self.1.lock().unwrap().push(request.user_text.clone());
        Ok(Completion::text(self.0.lock().unwrap().remove(0)))
    }
}

#[test]
fn extractor_retries_then_degrades() {
    let (_dir, schema) = shop();
    let backend = Sequence(
        Mutex::new(vec!["I think orders.", "src=orders, dst=customers"]),
        Mutex::default(),
    );
    let ex = LlmEndpointExtractor::new(&backend, "m")
        .extract("q?", None, &schema)
        .unwrap();
    assert_eq!(ex.sources, ["orders"]);
    assert_eq!(ex.destinations, ["customers"]);
    assert!(!ex.degraded);
    let seen = backend.1.lock().unwrap();
    assert!(!seen[0].contains("could not be parsed"));
    assert!(seen[1].contains("could not be parsed"));

    let backend = Sequence(
        Mutex::new(vec!["no idea", "still no idea"]),
        Mutex::default(),
    );
    let ex = LlmEndpointExtractor::new(&backend, "m")
        .extract("q?", None, &schema)
        .unwrap();
    assert!(ex.degraded);
    assert_eq!(ex.sources.len(), 6);
    assert_eq!(ex.sources, ex.destinations);
}

#[test]
fn extraction_prompt_lists_the_schema() {
    let (_dir, schema) = shop();
    let req = render_src_dst_prompt("How many orders?", &schema, Some("  "), "m", 0.2);
    assert_eq!(req.user_text.matches("CREATE TABLE").count(), 6);
    assert!(req.user_text.ends_with("Question: How many orders?\n"));
    let with = render_src_dst_prompt("How many orders?", &schema, Some("x = 1"), "m", 0.2);
    assert!(with.user_text.ends_with("Evidence: x = 1\n"));
}
