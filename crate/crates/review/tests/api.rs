use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use uqseg_core::phantom::{self, DatasetConfig};
use uqseg_core::pipeline::{self, RunConfig, RunOptions};
use uqseg_core::{Modality, Provenance};
use uqseg_review::{router, AppState, DecisionLog};

struct Fixture {
    _tmp: tempfile::TempDir,
    results: PathBuf,
    log: PathBuf,
}

fn fixture(count: usize) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let results = tmp.path().join("results");
    phantom::generate_dataset(Modality::Head, count, 3, &DatasetConfig::default(), &data).unwrap();
    let options = RunOptions {
        method: Provenance::Tta,
        samples: 2,
        seed: 1,
    };
    pipeline::run(&data, &results, &RunConfig::default(), &options).unwrap();
    let log = tmp.path().join("review").join("decisions.ndjson");
    Fixture { _tmp: tmp, results, log }
}

fn app(results: &Path, log: &Path) -> Router {
    router(Arc::new(AppState::load(results, log).unwrap()), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn tree_snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[tokio::test]
async fn health_and_empty_state() {
    let f = fixture(1);
    let app = app(&f.results, &f.log);
    assert_eq!(call(&app, "GET", "/api/health", None).await, (StatusCode::OK, json!({"status": "ok"})));
    assert_eq!(call(&app, "GET", "/api/decisions", None).await, (StatusCode::OK, json!([])));

    let tmp = tempfile::tempdir().unwrap();
    let empty = app_for_empty(tmp.path());
    assert_eq!(call(&empty, "GET", "/api/cases", None).await, (StatusCode::OK, json!([])));
}

fn app_for_empty(dir: &Path) -> Router {
    app(dir, &dir.join("log.ndjson"))
}

#[tokio::test]
async fn cases_sorted_by_uncertainty_descending_by_default() {
    let f = fixture(4);
    let app = app(&f.results, &f.log);
    let (status, body) = call(&app, "GET", "/api/cases", None).await;
    assert_eq!(status, StatusCode::OK);
    let rows = body.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let scores: Vec<f64> = rows.iter().map(|r| r["uncertainty_score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
    for r in rows {
        assert_eq!(r["decision_status"], "pending");
        assert_eq!(r["modality"], "head");
        assert_eq!(r["method"], "tta");
        assert!(r["measurement_mm"].as_f64().unwrap() > 0.0);
        assert!(r["ood_flag"].is_boolean());
    }

    let (_, asc) = call(&app, "GET", "/api/cases?sort=uncertainty&order=asc", None).await;
    let asc_scores: Vec<f64> = asc.as_array().unwrap().iter().map(|r| r["uncertainty_score"].as_f64().unwrap()).collect();
    let mut reversed = scores.clone();
    reversed.reverse();
    assert_eq!(asc_scores, reversed);

    let (_, by_id) = call(&app, "GET", "/api/cases?sort=case_id", None).await;
    let ids: Vec<&str> = by_id.as_array().unwrap().iter().map(|r| r["case_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["head_0000", "head_0001", "head_0002", "head_0003"]);

    let (_, by_m) = call(&app, "GET", "/api/cases?sort=measurement&order=asc", None).await;
    let m: Vec<f64> = by_m.as_array().unwrap().iter().map(|r| r["measurement_mm"].as_f64().unwrap()).collect();
    assert!(m.windows(2).all(|w| w[0] <= w[1]));

    assert_eq!(call(&app, "GET", "/api/cases?sort=size", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/api/cases?order=up", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/api/cases?status=done", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn case_record_and_layers() {
    let f = fixture(1);
    let app = app(&f.results, &f.log);
    let (status, record) = call(&app, "GET", "/api/cases/head_0000", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(record["case_id"], "head_0000");
    assert!(record["measurement"]["value_mm"].as_f64().unwrap() > 0.0);
    assert_eq!(record["decision"], json!({"status": "pending"}));
    assert_eq!(record["last_decision"], Value::Null);

    let (w, h) = (record["width"].as_u64().unwrap(), record["height"].as_u64().unwrap());
    for layer in uqseg_review::LAYERS {
        let (status, body) = call(&app, "GET", &format!("/api/cases/head_0000/layers/{layer}"), None).await;
        assert_eq!(status, StatusCode::OK, "{layer}");
        assert_eq!(body["width"].as_u64().unwrap(), w);
        assert_eq!(body["height"].as_u64().unwrap(), h);
        assert_eq!(body["values"].as_array().unwrap().len() as u64, w * h);
    }
    let (_, mask) = call(&app, "GET", "/api/cases/head_0000/layers/mask", None).await;
    assert!(mask["values"].as_array().unwrap().iter().all(|v| v == 0.0 || v == 1.0));

    assert_eq!(call(&app, "GET", "/api/cases/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/api/cases/nope/layers/image", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/api/cases/head_0000/layers/sample_00", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn decisions_update_state_and_validate() {
    let f = fixture(3);
    let before = tree_snapshot(&f.results);
    let app = app(&f.results, &f.log);

    let (status, body) = call(&app, "POST", "/api/cases/head_0000/decision", Some(json!({"action": "accept", "reviewer": "r1"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["decision_status"], "accepted");
    let (_, rec) = call(&app, "GET", "/api/cases/head_0000", None).await;
    assert_eq!(rec["decision"]["status"], "accepted");

    let (status, body) = call(
        &app,
        "POST",
        "/api/cases/head_0001/decision",
        Some(json!({"action": "override", "value_mm": 31.2, "note": "re-measured"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["decision"]["value_mm"], 31.2);
    let (_, rec) = call(&app, "GET", "/api/cases/head_0001", None).await;
    assert_eq!(rec["decision"], json!({"status": "overridden", "value_mm": 31.2, "note": "re-measured"}));

    for bad in [
        json!({"action": "override"}),
        json!({"action": "override", "value_mm": -1.0}),
        json!({"action": "override", "value_mm": 0.0}),
        json!({"action": "accept", "value_mm": 3.0}),
        json!({"action": "approve"}),
        json!({"action": "accept", "extra": true}),
        json!({"action": "accept", "case_id": "head_0002"}),
    ] {
        let (status, body) = call(&app, "POST", "/api/cases/head_0000/decision", Some(bad.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert!(body["error"].is_string());
    }
    let (status, _) = call(&app, "POST", "/api/cases/missing/decision", Some(json!({"action": "accept"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (_, accepted) = call(&app, "GET", "/api/cases?status=accepted", None).await;
    let ids: Vec<&str> = accepted.as_array().unwrap().iter().map(|r| r["case_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["head_0000"]);
    let (_, pending) = call(&app, "GET", "/api/cases?status=pending", None).await;
    assert_eq!(pending.as_array().unwrap().len(), 1);

    // identical re-submission is idempotent
    let (_, again) = call(&app, "POST", "/api/cases/head_0000/decision", Some(json!({"action": "accept", "reviewer": "r1"}))).await;
    assert_eq!(again["decision_status"], "accepted");
    let (_, log) = call(&app, "GET", "/api/decisions", None).await;
    assert_eq!(log.as_array().unwrap().len(), 2);

    // latest wins
    call(&app, "POST", "/api/cases/head_0000/decision", Some(json!({"action": "reject", "note": "blurry"}))).await;
    let (_, rec) = call(&app, "GET", "/api/cases/head_0000", None).await;
    assert_eq!(rec["decision"]["status"], "rejected");

    assert_eq!(tree_snapshot(&f.results), before, "result tree must stay untouched");
}

#[tokio::test]
async fn decision_log_replays_after_restart() {
    let f = fixture(2);
    {
        let app = app(&f.results, &f.log);
        for body in [
            json!({"action": "accept", "timestamp": "2026-01-01T10:00:00Z"}),
            json!({"action": "override", "value_mm": 150.5, "timestamp": "2026-01-01T10:05:00Z"}),
        ] {
            assert_eq!(call(&app, "POST", "/api/cases/head_0000/decision", Some(body)).await.0, StatusCode::OK);
        }
        let body = json!({"action": "reject", "timestamp": "2026-01-01T09:00:00Z"});
        assert_eq!(call(&app, "POST", "/api/cases/head_0001/decision", Some(body)).await.0, StatusCode::OK);
    }
    let app = app(&f.results, &f.log);
    let (_, rec) = call(&app, "GET", "/api/cases/head_0000", None).await;
    assert_eq!(rec["decision"]["status"], "overridden");
    assert_eq!(rec["decision"]["value_mm"], 150.5);
    let (_, log) = call(&app, "GET", "/api/decisions", None).await;
    let stamps: Vec<&str> = log.as_array().unwrap().iter().map(|d| d["timestamp"].as_str().unwrap()).collect();
    assert_eq!(stamps, ["2026-01-01T09:00:00Z", "2026-01-01T10:00:00Z", "2026-01-01T10:05:00Z"]);

    let raw = fs::read_to_string(&f.log).unwrap();
    assert_eq!(raw.lines().count(), 3);
    assert!(raw.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[tokio::test]
async fn concurrent_posts_keep_whole_lines() {
    let f = fixture(3);
    let app = app(&f.results, &f.log);
    let mut tasks = Vec::new();
    for i in 0..30 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            let id = format!("head_{:04}", i % 3);
            let body = json!({"action": "override", "value_mm": 100.0 + i as f64, "note": "x".repeat(2000)});
            call(&app, "POST", &format!("/api/cases/{id}/decision"), Some(body)).await.0
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let raw = fs::read_to_string(&f.log).unwrap();
    assert_eq!(raw.lines().count(), 30);
    for line in raw.lines() {
        serde_json::from_str::<uqseg_review::Decision>(line).unwrap();
    }
}

#[test]
fn torn_log_tail_is_ignored_and_sealed() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("log.ndjson");
    fs::write(
        &path,
        "{\"case_id\":\"a\",\"action\":\"accept\",\"note\":\"\",\"timestamp\":\"2026-01-01T00:00:00Z\",\"reviewer\":\"\"}\n{\"case_id\":\"b\",\"act",
    )
    .unwrap();
    let log = DecisionLog::open(&path).unwrap();
    assert_eq!(log.entries_by_time().len(), 1);
    assert_eq!(log.state("a").label(), "accepted");
    assert!(fs::read_to_string(&path).unwrap().ends_with('\n'));

    fs::write(&path, "garbage\n{}\n").unwrap();
    assert!(DecisionLog::open(&path).is_err());
}

#[test]
fn missing_results_dir_fails_to_load() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(AppState::load(&tmp.path().join("absent"), &tmp.path().join("log")).is_err());
}
