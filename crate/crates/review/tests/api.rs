use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mislabel_core::dataset::{generate_synthetic_corpus, SyntheticConfig};
use mislabel_core::eval::precision_at_k;
use mislabel_core::pipeline::NoiseAssessment;
use mislabel_core::review::{resolve_consensus, sample_review_set, ReviewSetOptions};
use mislabel_core::{ConsensusResult, Dataset, SuspectSample, Verdict};
use mislabel_review::{router, serve, ReviewConfig, ReviewState, ServiceError, UI_CONDITION};
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixture() -> (Vec<SuspectSample>, Dataset) {
    let ds = generate_synthetic_corpus(&SyntheticConfig {
        n_per_class: vec![700, 300],
        dim: 8,
        seed: 2,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let n = ds.len();
    let assessments: Vec<NoiseAssessment> = ds
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rank = (i * 389) % n;
            NoiseAssessment {
                sample_id: r.sample_id.clone(),
                given_label: r.given_label,
                aggregated_loss: 0.3,
                p_i: 0.9,
                proposed_label: 1 - r.given_label,
                corrected_loss: 0.1,
                p_i_c: 0.1,
                r_i: 1.0 - rank as f64 / n as f64,
                rank_by_r: rank + 1,
            }
        })
        .collect();
    let set = sample_review_set(&assessments, &ds, &ReviewSetOptions::default()).unwrap();
    assert_eq!(set.items.len(), 100);
    (set.items, ds)
}

fn state(log: &Path) -> Arc<ReviewState> {
    let (suspects, ds) = fixture();
    Arc::new(ReviewState::open(suspects, ds, ReviewConfig::new(log)).unwrap())
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post_json(app: &Router, body: Value) -> (StatusCode, Value) {
    post_raw(app, body.to_string()).await
}

async fn post_raw(app: &Router, body: String) -> (StatusCode, Value) {
    let req = Request::post("/api/adjudications")
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let (s, b) = call(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

#[tokio::test]
async fn first_page_is_rank_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(&dir.path().join("log.jsonl"));
    let app = router(st.clone());
    let (s, page) = get_json(&app, "/api/suspects?offset=0&limit=10").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(page["total"], 100);
    let ids: Vec<&str> = page["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["sample_id"].as_str().unwrap())
        .collect();
    let want: Vec<&str> = st.suspects()[..10].iter().map(|s| s.sample_id.as_str()).collect();
    assert_eq!(ids, want);
    let ranks: Vec<u64> = page["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["rank"].as_u64().unwrap())
        .collect();
    assert!(ranks.windows(2).all(|w| w[0] < w[1]));

    let (_, tail) = get_json(&app, "/api/suspects?offset=95&limit=10").await;
    assert_eq!(tail["items"].as_array().unwrap().len(), 5);
    let (_, past) = get_json(&app, "/api/suspects?offset=500").await;
    assert!(past["items"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn thumbnails_are_png() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(&dir.path().join("log.jsonl"));
    let app = router(st.clone());
    let id = &st.suspects()[0].sample_id;
    let resp = app
        .clone()
        .oneshot(
            Request::get(format!("/api/samples/{id}/thumbnail"))
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");

    let (s, _) = call(&app, Request::get("/api/samples/nope/thumbnail").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn posting_decrements_pending() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(&dir.path().join("log.jsonl"));
    let app = router(st.clone());
    let (_, before) = get_json(&app, "/api/progress?reviewer_id=ana").await;
    assert_eq!((before["done"].as_u64(), before["pending"].as_u64()), (Some(0), Some(100)));

    for s in &st.suspects()[..10] {
        let (code, body) = post_json(
            &app,
            json!({"sample_id": s.sample_id, "reviewer_id": "ana", "verdict": "correct"}),
        )
        .await;
        assert_eq!(code, StatusCode::OK);
        assert_eq!(body, json!({"accepted": true}));
    }
    let (_, after) = get_json(&app, "/api/progress?reviewer_id=ana").await;
    assert_eq!((after["done"].as_u64(), after["pending"].as_u64()), (Some(10), Some(90)));
    let (_, other) = get_json(&app, "/api/progress?reviewer_id=ben").await;
    assert_eq!(other["done"], 0);
}

#[tokio::test]
async fn malformed_adjudications_are_rejected_with_reason() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(&dir.path().join("log.jsonl"));
    let app = router(st.clone());
    let id = st.suspects()[0].sample_id.clone();
    let cases = [
        json!({"sample_id": id, "reviewer_id": "ana"}).to_string(),
        json!({"sample_id": id, "reviewer_id": "ana", "verdict": "maybe"}).to_string(),
        json!({"sample_id": id, "reviewer_id": "ana", "verdict": "mislabel"}).to_string(),
        json!({"sample_id": id, "reviewer_id": "ana", "verdict": "mislabel", "revised_label": 7}).to_string(),
        json!({"sample_id": id, "reviewer_id": "", "verdict": "correct"}).to_string(),
        json!({"sample_id": "zzz", "reviewer_id": "ana", "verdict": "correct"}).to_string(),
        "{not json".to_string(),
    ];
    for body in cases {
        let (code, resp) = post_raw(&app, body.clone()).await;
        assert_eq!(code, StatusCode::BAD_REQUEST, "{body}");
        assert!(!resp["error"].as_str().unwrap().is_empty());
    }
    assert!(st.adjudications().is_empty());
}

fn planted(sample: usize, reviewer: usize) -> bool {
    // 78 of the 100 samples end up with a mislabel majority.
    let majority = sample % 50 < 39;
    let dissent = (sample + reviewer).is_multiple_of(3);
    if majority { !(dissent && reviewer == 2) } else { dissent && reviewer == 0 }
}

#[tokio::test]
async fn three_reviewers_reach_brute_force_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(&dir.path().join("log.jsonl"));
    let app = router(st.clone());
    let ids: Vec<String> = st.suspects().iter().map(|s| s.sample_id.clone()).collect();
    for r in 0..3 {
        for (i, id) in ids.iter().enumerate() {
            let m = planted(i, r);
            let body = if m {
                json!({"sample_id": id, "reviewer_id": format!("r{r}"), "verdict": "mislabel", "revised_label": 1})
            } else {
                json!({"sample_id": id, "reviewer_id": format!("r{r}"), "verdict": "correct"})
            };
            assert_eq!(post_json(&app, body).await.0, StatusCode::OK);
        }
    }
    let (_, consensus) = get_json(&app, "/api/consensus").await;
    let results: Vec<ConsensusResult> = serde_json::from_value(consensus).unwrap();
    assert_eq!(results.len(), 100);
    let by_id: HashMap<&str, &ConsensusResult> =
        results.iter().map(|c| (c.sample_id.as_str(), c)).collect();
    let mut oracle = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        let votes = (0..3).filter(|&r| planted(i, r)).count();
        let want = if votes >= 2 { Verdict::Mislabel } else { Verdict::Correct };
        assert_eq!(by_id[id.as_str()].final_verdict, want, "{id}");
        oracle.insert(id.clone(), want);
    }
    let expected = precision_at_k(&ids, &oracle, 100).unwrap();
    assert_eq!(expected, 78.0);
    let (code, p) = get_json(&app, "/api/precision?k=100").await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(p["precision"].as_f64().unwrap(), expected);
    assert_eq!(
        resolve_consensus(&st.adjudications(), 3).unwrap(),
        results
    );
}

#[tokio::test]
async fn precision_needs_full_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(&dir.path().join("log.jsonl"));
    let app = router(st);
    let (code, body) = get_json(&app, "/api/precision?k=10").await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert!(body["error"].as_str().unwrap().contains("lack consensus"));
    let (code, _) = get_json(&app, "/api/precision?k=0").await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn resubmission_supersedes() {
    let dir = tempfile::tempdir().unwrap();
    let st = state(&dir.path().join("log.jsonl"));
    let app = router(st.clone());
    let id = st.suspects()[3].sample_id.clone();
    for r in ["a", "b", "c"] {
        post_json(&app, json!({"sample_id": id, "reviewer_id": r, "verdict": "correct"})).await;
    }
    for r in ["a", "b"] {
        post_json(
            &app,
            json!({"sample_id": id, "reviewer_id": r, "verdict": "mislabel", "revised_label": 0}),
        )
        .await;
    }
    let results = st.consensus();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].final_verdict, Verdict::Mislabel);
    assert_eq!((results[0].mislabel_votes, results[0].correct_votes), (2, 1));
    let (_, prog) = get_json(&app, "/api/progress?reviewer_id=a").await;
    assert_eq!(prog["done"], 1);
}

#[tokio::test]
async fn restart_replays_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let before = {
        let st = state(&log);
        let app = router(st.clone());
        for s in &st.suspects()[..25] {
            post_json(&app, json!({"sample_id": s.sample_id, "reviewer_id": "ana", "verdict": "correct"})).await;
        }
        st.adjudications()
    };
    let st = state(&log);
    assert_eq!(st.adjudications(), before);
    let (_, prog) = get_json(&router(st), "/api/progress?reviewer_id=ana").await;
    assert_eq!(prog["done"], 25);
}

#[tokio::test]
async fn concurrent_posts_are_all_logged_once() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let st = state(&log);
    let app = router(st.clone());
    let mut tasks = Vec::new();
    for r in 0..3 {
        for s in st.suspects().iter().take(40) {
            let app = app.clone();
            let body = json!({"sample_id": s.sample_id, "reviewer_id": format!("r{r}"), "verdict": "correct"});
            tasks.push(tokio::spawn(async move { post_json(&app, body).await.0 }));
        }
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    assert_eq!(st.adjudications().len(), 120);
    let lines = std::fs::read_to_string(&log).unwrap().lines().count();
    assert_eq!(lines, 120);
}

#[tokio::test]
async fn meta_reports_display_condition() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(&dir.path().join("log.jsonl")));
    let (_, meta) = get_json(&app, "/api/meta").await;
    assert_eq!(meta["ui_condition"], UI_CONDITION);
    assert_eq!(meta["reviewers_required"], 3);
    assert_eq!(meta["class_names"], json!(["normal", "anomaly"]));
}

#[tokio::test]
async fn static_assets_are_served_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let assets = dir.path().join("ui");
    std::fs::create_dir(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<html>review</html>").unwrap();
    let (suspects, ds) = fixture();
    let cfg = ReviewConfig {
        static_dir: Some(assets),
        ..ReviewConfig::new(dir.path().join("log.jsonl"))
    };
    let app = router(Arc::new(ReviewState::open(suspects, ds, cfg).unwrap()));
    let (code, body) = call(&app, Request::get("/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body, b"<html>review</html>");
}

#[tokio::test]
async fn occupied_port_is_a_bind_error() {
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let err = serve(state(&dir.path().join("log.jsonl")), addr, async {})
        .await
        .unwrap_err();
    assert!(matches!(err, ServiceError::Bind { .. }), "{err}");
}
