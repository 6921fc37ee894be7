use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use insets_core::gateway::{BackendError, ChatRequest, Gateway, GatewayError, HttpBackend, Journal, ModelProfile};
use rayon::prelude::*;

fn profile(name: &str, max_concurrent: usize) -> ModelProfile {
    ModelProfile {
        max_concurrent,
        ..ModelProfile::mock(name)
    }
}

#[test]
fn limiter_caps_in_flight_calls() {
    let live = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (l, p) = (live.clone(), peak.clone());
    let backend = move |_: &ModelProfile, r: &ChatRequest| -> Result<String, BackendError> {
        let now = l.fetch_add(1, Ordering::SeqCst) + 1;
        p.fetch_max(now, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(3));
        l.fetch_sub(1, Ordering::SeqCst);
        Ok(r.user_text.clone())
    };
    let mut gw = Gateway::new();
    gw.register(profile("slow", 3), Arc::new(backend)).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(16).build().unwrap();
    let texts: Vec<String> = pool.install(|| {
        (0..200)
            .into_par_iter()
            .map(|i| gw.complete("slow", &ChatRequest::new(format!("q{i}"))).unwrap().text)
            .collect()
    });
    assert_eq!(texts.len(), 200);
    assert!(texts.iter().enumerate().all(|(i, t)| *t == format!("q{i}")));
    assert!(peak.load(Ordering::SeqCst) <= 3);
    assert_eq!(gw.peak_in_flight("slow"), Some(peak.load(Ordering::SeqCst)));
}

/// Serves `statuses` in order, one per connection, and counts requests.
fn scripted_server(statuses: Vec<(u16, &'static str)>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    thread::spawn(move || {
        for (status, body) in statuses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&buf).unwrap();
            assert_eq!(req["model"], "wire-name");
            h.fetch_add(1, Ordering::SeqCst);
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, hits)
}

fn http_profile(url: &str, retries: u32) -> ModelProfile {
    ModelProfile {
        endpoint: url.to_string(),
        model: Some("wire-name".into()),
        max_retries: retries,
        timeout_secs: 5,
        ..ModelProfile::mock("remote")
    }
}

#[test]
fn http_backend_retries_server_errors() {
    let ok = r#"{"choices":[{"message":{"content":"fine"}}]}"#;
    let (url, hits) = scripted_server(vec![(503, "busy"), (429, "slow down"), (200, ok)]);
    let p = http_profile(&url, 2);
    let mut gw = Gateway::new().with_backoff(Duration::from_millis(1));
    gw.register(p.clone(), Arc::new(HttpBackend::for_profile(&p).unwrap())).unwrap();
    let r = gw.complete("remote", &ChatRequest::new("hello")).unwrap();
    assert_eq!(r.text, "fine");
    assert_eq!(r.attempt, 3);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn http_backend_gives_up_after_retries() {
    let (url, hits) = scripted_server(vec![(500, "a"), (500, "b")]);
    let p = http_profile(&url, 1);
    let mut gw = Gateway::new().with_backoff(Duration::from_millis(1));
    gw.register(p.clone(), Arc::new(HttpBackend::for_profile(&p).unwrap())).unwrap();
    let err = gw.complete("remote", &ChatRequest::new("hello")).unwrap_err();
    assert!(matches!(err, GatewayError::ExhaustedRetries { attempts: 2, .. }), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn http_client_error_is_not_retried() {
    let (url, hits) = scripted_server(vec![(400, "bad request")]);
    let p = http_profile(&url, 3);
    let mut gw = Gateway::new().with_backoff(Duration::from_millis(1));
    gw.register(p.clone(), Arc::new(HttpBackend::for_profile(&p).unwrap())).unwrap();
    let err = gw.complete("remote", &ChatRequest::new("hello")).unwrap_err();
    assert!(matches!(err, GatewayError::Rejected { .. }), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn missing_api_key_is_reported_with_the_variable() {
    let mut p = http_profile("http://127.0.0.1:9/none", 0);
    p.api_key_env = Some("INSETS_TEST_KEY_THAT_IS_NEVER_SET".into());
    let mut gw = Gateway::new();
    gw.register(p.clone(), Arc::new(HttpBackend::for_profile(&p).unwrap())).unwrap();
    match gw.complete("remote", &ChatRequest::new("hello")) {
        Err(GatewayError::AuthMissing { env_var, .. }) => assert_eq!(env_var, "INSETS_TEST_KEY_THAT_IS_NEVER_SET"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn journal_answers_repeated_requests_across_gateways() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal/requests.jsonl");
    let calls = Arc::new(AtomicUsize::new(0));
    let make = |calls: Arc<AtomicUsize>| {
        let mut gw = Gateway::new().with_journal(Journal::open(&path).unwrap());
        let backend = move |_: &ModelProfile, r: &ChatRequest| -> Result<String, BackendError> {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(format!("answer to {} at seed {:?}", r.user_text, r.seed))
        };
        gw.register(ModelProfile::mock("m"), Arc::new(backend)).unwrap();
        gw
    };
    let requests: Vec<ChatRequest> = (0..20).map(|i| ChatRequest::new(format!("q{}", i % 10)).with_seed(i / 10)).collect();
    let first: Vec<String> = {
        let gw = make(calls.clone());
        requests.iter().map(|r| gw.complete("m", r).unwrap().text).collect()
    };
    assert_eq!(calls.load(Ordering::SeqCst), 20);
    let gw = make(calls.clone());
    let again: Vec<_> = requests.iter().map(|r| gw.complete("m", r).unwrap()).collect();
    assert_eq!(calls.load(Ordering::SeqCst), 20);
    assert!(again.iter().all(|r| r.from_journal));
    assert_eq!(again.into_iter().map(|r| r.text).collect::<Vec<_>>(), first);
}
