use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use insets_core::config::{Annotator, ReviewConfig};
use insets_core::{Config, Pipeline};
use insets_review::{router, Ack, ConsensusView, Progress, ReviewState, TaskResponse};
use serde_json::json;

fn make_corpus(dir: &Path, n: u32) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = image::RgbImage::from_fn(10, 8, |x, y| {
            image::Rgb([(i * 41 % 256) as u8, (x * 19 + i) as u8, (y * 23 + i / 5) as u8])
        });
        img.save(dir.join(format!("p{i:02}.png"))).unwrap();
    }
}

fn review_config() -> ReviewConfig {
    ReviewConfig {
        annotators: (1..=5)
            .map(|i| Annotator {
                id: format!("a{i}"),
                token: format!("tok{i}"),
            })
            .collect(),
        ..ReviewConfig::default()
    }
}

/// Mock run over 30 images with a 20-statement benchmark.
fn prepared(root: &Path) -> Pipeline {
    let corpus = root.join("corpus");
    make_corpus(&corpus, 30);
    let cfg = Config {
        seed: 5,
        corpus_dir: corpus,
        out_dir: root.join("out"),
        mock: true,
        backoff_ms: 0,
        review: review_config(),
        ..Config::default()
    };
    let p = Pipeline::from_config(cfg).unwrap();
    p.ingest(None).unwrap();
    p.tag().unwrap();
    p.construct().unwrap();
    p.sample(Some(20)).unwrap();
    p
}

struct Server {
    base: String,
    http: reqwest::Client,
    state: Arc<ReviewState>,
}

async fn start(out: &Path, idle: Option<Duration>) -> Server {
    let cfg = review_config();
    let mut state = ReviewState::open(out, &cfg).unwrap();
    if let Some(t) = idle {
        state = state.with_idle_timeout(t);
    }
    let state = Arc::new(state);
    let app = router(state.clone(), &cfg.allowed_origins).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server {
        base: format!("http://{addr}"),
        http: reqwest::Client::new(),
        state,
    }
}

impl Server {
    async fn task(&self, token: &str) -> reqwest::Response {
        self.http
            .get(format!("{}/api/task?token={token}", self.base))
            .send()
            .await
            .unwrap()
    }

    async fn judge(&self, token: &str, id: &str, verdict: bool) -> reqwest::Response {
        self.http
            .post(format!("{}/api/judgment", self.base))
            .json(&json!({"token": token, "statement_id": id, "verdict": verdict}))
            .send()
            .await
            .unwrap()
    }

    async fn get<T: serde::de::DeserializeOwned>(&self, path: &str) -> T {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        assert_eq!(r.status(), 200, "{path}");
        r.json().await.unwrap()
    }
}

/// Spread of agree counts: statement i gets `i % 6` agreeing annotators.
fn verdict(annotator: usize, statement: usize) -> bool {
    annotator < statement % 6
}

#[tokio::test(flavor = "multi_thread")]
async fn five_annotators_complete_queue_and_consensus_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let srv = start(p.out_dir(), None).await;
    let ids: Vec<String> = srv.state.statements().iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids.len(), 20);
    assert!(ids.windows(2).all(|w| w[0] < w[1]));

    let empty: Progress = srv.get("/api/progress").await;
    assert_eq!((empty.judgments, empty.complete, empty.required), (0, 0, 100));
    let view: ConsensusView = srv.get("/api/consensus").await;
    assert_eq!(view.report.total.statements, 0);
    assert_eq!(view.report.total.counts, [0; 6]);
    assert!(view.outcomes.is_empty());

    // annotators interleave; each walks the queue in id order
    let mut cursors = [0usize; 5];
    for round in 0..20 {
        for a in 0..5 {
            let tok = format!("tok{}", a + 1);
            let t: TaskResponse = srv.task(&tok).await.json().await.unwrap();
            assert!(!t.done);
            assert_eq!(t.remaining, 20 - round);
            let task = t.task.unwrap();
            assert_eq!(task.statement_id, ids[cursors[a]]);
            assert!(task.image_url.starts_with("/api/image/"));
            let r = srv.judge(&tok, &task.statement_id, verdict(a, cursors[a])).await;
            assert_eq!(r.status(), 200);
            let ack: Ack = r.json().await.unwrap();
            assert_eq!(ack.remaining, 19 - round);
            cursors[a] += 1;
        }
    }
    for a in 1..=5 {
        let t: TaskResponse = srv.task(&format!("tok{a}")).await.json().await.unwrap();
        assert!(t.done);
        assert!(t.task.is_none());
    }

    let progress: Progress = srv.get("/api/progress").await;
    assert_eq!((progress.judgments, progress.complete), (100, 20));
    assert!(progress.per_annotator.values().all(|&n| n == 20));

    // the log the service wrote is what the pipeline reads
    let (report, outcomes, pending) = p.consensus(None).unwrap();
    let view: ConsensusView = srv.get("/api/consensus").await;
    assert_eq!(view.report, report);
    assert_eq!(view.outcomes, outcomes);
    assert_eq!(view.pending, pending);
    let expected: Vec<usize> = (0..20).map(|i| i % 6).collect();
    let got: Vec<usize> = ids
        .iter()
        .map(|id| outcomes.iter().find(|o| &o.statement_id == id).unwrap().agree_count)
        .collect();
    assert_eq!(got, expected);

    for d in ["scene_context", "perception_subjectivity"] {
        let (report, _, _) = p.consensus(insets_core::Dimension::parse(d)).unwrap();
        let view: ConsensusView = srv.get(&format!("/api/consensus?dimension={d}")).await;
        assert_eq!(view.report, report, "{d}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn duplicates_unknowns_and_bad_tokens_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let srv = start(p.out_dir(), None).await;
    let id = srv.state.statements()[0].id.clone();

    assert_eq!(srv.judge("tok1", &id, true).await.status(), 200);
    assert_eq!(srv.judge("tok1", &id, false).await.status(), 409);
    assert_eq!(srv.judge("tok1", "nope", true).await.status(), 404);
    assert_eq!(srv.judge("stolen", &id, true).await.status(), 401);
    assert_eq!(srv.task("stolen").await.status(), 401);
    let r = srv.http.get(format!("{}/api/task", srv.base)).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let r = srv
        .http
        .get(format!("{}/api/consensus?dimension=mood", srv.base))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);

    // judged statement is skipped for tok1 only
    let t: TaskResponse = srv.task("tok1").await.json().await.unwrap();
    assert_ne!(t.task.unwrap().statement_id, id);
    let t: TaskResponse = srv.task("tok2").await.json().await.unwrap();
    assert_eq!(t.task.unwrap().statement_id, id);
    assert_eq!(srv.state.judgments().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn judgments_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let ids: Vec<String> = {
        let srv = start(p.out_dir(), None).await;
        let ids: Vec<String> = srv.state.statements().iter().map(|s| s.id.clone()).collect();
        for id in &ids[..3] {
            assert_eq!(srv.judge("tok3", id, true).await.status(), 200);
        }
        ids
    };
    let srv = start(p.out_dir(), None).await;
    assert_eq!(srv.judge("tok3", &ids[0], true).await.status(), 409);
    let t: TaskResponse = srv.task("tok3").await.json().await.unwrap();
    assert_eq!(t.task.unwrap().statement_id, ids[3]);
    assert_eq!(t.remaining, 17);
}

#[tokio::test(flavor = "multi_thread")]
async fn idle_session_expires_then_reopens() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let srv = start(p.out_dir(), Some(Duration::from_millis(150))).await;
    assert_eq!(srv.task("tok1").await.status(), 200);
    tokio::time::sleep(Duration::from_millis(300)).await;
    let r = srv.task("tok1").await;
    assert_eq!(r.status(), 401);
    let body: serde_json::Value = r.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("expired"));
    assert_eq!(srv.task("tok1").await.status(), 200);
}

#[tokio::test(flavor = "multi_thread")]
async fn image_bytes_and_cors() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared(dir.path());
    let srv = start(p.out_dir(), None).await;
    let t: TaskResponse = srv.task("tok1").await.json().await.unwrap();
    let url = t.task.unwrap().image_url;
    let r = srv
        .http
        .get(format!("{}{url}?token=tok1", srv.base))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(r.headers()["content-type"], "image/png");
    assert!(r.bytes().await.unwrap().starts_with(b"\x89PNG"));
    let r = srv.http.get(format!("{}{url}", srv.base)).send().await.unwrap();
    assert_eq!(r.status(), 401);
    let r = srv
        .http
        .get(format!("{}/api/image/deadbeef?token=tok1", srv.base))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 404);

    let r = srv
        .http
        .get(format!("{}/api/progress", srv.base))
        .header("origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert_eq!(r.headers()["access-control-allow-origin"], "http://localhost:5173");
    let r = srv
        .http
        .get(format!("{}/api/progress", srv.base))
        .header("origin", "http://evil.example")
        .send()
        .await
        .unwrap();
    assert!(r.headers().get("access-control-allow-origin").is_none());
}
