use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use circlefuse::fusion::{categorize, ColorMap, FusedDetection};
use circlefuse::geojson_io::import_geojson_str;
use circlefuse::{Circle, Detection};
use circlefuse_review::state::EditLog;
use circlefuse_review::{router, serve, App, BackgroundImage, ReviewState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// 45 fused circles: 40 seen by all five models, three by two, two by one.
fn fixture() -> Vec<FusedDetection> {
    let mut out = Vec::new();
    let mut push = |i: usize, count: usize, score: f64| {
        let circle = Circle::new(100.0 + 150.0 * (i % 9) as f64, 100.0 + 150.0 * (i / 9) as f64, 40.0 + (i % 7) as f64)
            .unwrap();
        let members = (0..count)
            .map(|k| Detection::new(circle.translated(k as f64 * 0.5, 0.0), score, format!("model_{}", k + 1)))
            .collect();
        out.push(FusedDetection { circle, score, count, members, category: String::new(), color: String::new() });
    };
    for i in 0..40 {
        push(i, 5, 0.6 + 0.01 * i as f64);
    }
    for (j, s) in [0.5, 0.7, 0.92].into_iter().enumerate() {
        push(40 + j, 2, s);
    }
    for (j, s) in [0.95, 0.4].into_iter().enumerate() {
        push(43 + j, 1, s);
    }
    categorize(&mut out, &ColorMap::default());
    out
}

fn setup(cfg: impl FnOnce(&mut ServiceConfig)) -> (Arc<App>, Router, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ServiceConfig::new("slide_a", dir.path().join("out/reviewed.geojson"));
    c.width = Some(2000);
    c.height = Some(1000);
    cfg(&mut c);
    let app = App::new(c, fixture());
    (app.clone(), router(app), dir)
}

async fn call(r: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_with(r, method, uri, body, None).await
}

async fn call_with(r: &Router, method: Method, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = r.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

fn op(kind: &str, target: Option<&str>, payload: Value) -> Value {
    let mut v = json!({
        "op": kind,
        "payload": payload,
        "actor": "reviewer-1",
        "timestamp": "2024-05-01T12:00:00Z",
    });
    if let Some(t) = target {
        v["target_id"] = json!(t);
    }
    v
}

fn ids(v: &Value) -> Vec<String> {
    v["detections"].as_array().unwrap().iter().map(|d| d["id"].as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn slide_metadata_reports_fixture_counts() {
    let (_, r, _d) = setup(|_| {});
    let (s, v) = call(&r, Method::GET, "/api/slide", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["counts"], json!({"consensus_5": 40, "consensus_2": 3, "consensus_1": 2}));
    assert_eq!(v["total"], 45);
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(2000), Some(1000)));
    assert_eq!(v["image_available"], false);

    let empty = App::new(ServiceConfig::new("empty", "/nonexistent/out.geojson"), Vec::new());
    let (_, v) = call(&router(empty), Method::GET, "/api/slide", None).await;
    assert_eq!(v["counts"], json!({}));
    assert_eq!((v["total"].as_u64(), v["width"].as_u64()), (Some(0), Some(0)));
}

#[tokio::test]
async fn filters_select_and_reject_malformed_values() {
    let (_, r, _d) = setup(|_| {});
    let fx = fixture();

    let (_, all) = call(&r, Method::GET, "/api/detections", None).await;
    assert_eq!(all["count"], 45);
    assert!(all["detections"].as_array().unwrap().iter().all(|d| d["status"] == "pending"));

    let (_, low) = call(&r, Method::GET, "/api/detections?max_count=2", None).await;
    assert_eq!(ids(&low), ["f40", "f41", "f42", "f43", "f44"]);

    // Low consensus but confident: computed independently over the fixture.
    let expected: Vec<String> = fx
        .iter()
        .enumerate()
        .filter(|(_, f)| f.score >= 0.9 && f.count <= 1)
        .map(|(i, _)| format!("f{i}"))
        .collect();
    let (_, rescued) = call(&r, Method::GET, "/api/detections?min_score=0.9&max_count=1", None).await;
    assert_eq!(ids(&rescued), expected);
    assert_eq!(expected, ["f43"]);

    let (_, mid) = call(&r, Method::GET, "/api/detections?min_count=2&max_count=4", None).await;
    assert_eq!(mid["count"], 3);

    for (q, field) in [
        ("min_count=abc", "min_count"),
        ("max_count=-1", "max_count"),
        ("min_score=high", "min_score"),
        ("min_score=NaN", "min_score"),
        ("status=done", "status"),
    ] {
        let (s, v) = call(&r, Method::GET, &format!("/api/detections?{q}"), None).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{q}");
        assert_eq!(v["field"], field, "{q}");
    }
}

#[tokio::test]
async fn edits_round_trip_through_the_service() {
    let (app, r, _d) = setup(|_| {});

    let (s, v) = call(&r, Method::POST, "/api/edits", Some(op("reject", Some("f44"), json!({})))).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("rejected")));
    let (_, slide) = call(&r, Method::GET, "/api/slide", None).await;
    assert_eq!(slide["counts"]["consensus_1"], 1);

    let (_, v) = call(&r, Method::POST, "/api/edits", Some(op("accept", Some("f43"), json!({})))).await;
    assert_eq!(v["status"], "accepted");

    let (_, before) = call(&r, Method::GET, "/api/detections/f40", None).await;
    let (_, v) = call(&r, Method::POST, "/api/edits", Some(op("move", Some("f40"), json!({"dx": 5.0, "dy": -3.0})))).await;
    assert_eq!(v["cx"].as_f64().unwrap(), before["cx"].as_f64().unwrap() + 5.0);
    assert_eq!(v["cy"].as_f64().unwrap(), before["cy"].as_f64().unwrap() - 3.0);
    assert_eq!((v["r"].clone(), v["status"].as_str()), (before["r"].clone(), Some("edited")));

    let (_, v) = call(&r, Method::POST, "/api/edits", Some(op("resize", Some("f41"), json!({"new_r": 63.0})))).await;
    assert_eq!((v["r"].as_f64(), v["status"].as_str()), (Some(63.0), Some("edited")));

    let (_, v) = call(&r, Method::POST, "/api/edits", Some(op("relabel", Some("f42"), json!({"label": "sclerotic"})))).await;
    assert_eq!(v["category"], "sclerotic");

    let (s, added) = call(
        &r,
        Method::POST,
        "/api/edits",
        Some(op("add", None, json!({"cx": 400.0, "cy": 400.0, "r": 35.0}))),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let (_, fetched) = call(&r, Method::GET, &format!("/api/detections/{}", added["id"].as_str().unwrap()), None).await;
    assert_eq!(fetched, added);
    assert_eq!((fetched["cx"].as_f64(), fetched["cy"].as_f64(), fetched["r"].as_f64()), (Some(400.0), Some(400.0), Some(35.0)));
    assert_eq!((fetched["status"].as_str(), fetched["category"].as_str(), fetched["count"].as_u64()), (Some("human_added"), Some("human"), Some(0)));

    // Every edited record equals a fresh GET of the same id.
    for id in ["f40", "f41", "f42", "f43", "f44"] {
        let (_, v) = call(&r, Method::GET, &format!("/api/detections/{id}"), None).await;
        assert_eq!(v["revision"], 1, "{id}");
    }
    assert_eq!(app.snapshot().await.log().len(), 6);
}

#[tokio::test]
async fn edit_errors_map_to_status_codes_and_change_nothing() {
    let (app, r, _d) = setup(|_| {});
    let before = app.snapshot().await;
    let cases = [
        (op("reject", Some("f999"), json!({})), StatusCode::NOT_FOUND),
        (op("resize", Some("f0"), json!({"new_r": 0.0})), StatusCode::BAD_REQUEST),
        (op("resize", Some("f0"), json!({"new_r": -4.0})), StatusCode::BAD_REQUEST),
        (op("add", None, json!({"cx": 1.0, "cy": 2.0})), StatusCode::BAD_REQUEST),
        (op("move", Some("f0"), json!({})), StatusCode::BAD_REQUEST),
        (json!({"op": "explode", "actor": "x", "timestamp": "2024-05-01T12:00:00Z"}), StatusCode::BAD_REQUEST),
        (json!({"op": "accept", "target_id": "f0"}), StatusCode::BAD_REQUEST),
    ];
    for (body, want) in cases {
        let (s, v) = call(&r, Method::POST, "/api/edits", Some(body.clone())).await;
        assert_eq!(s, want, "{body}");
        assert!(v["error"].is_string());
    }
    assert_eq!(app.snapshot().await, before);
}

#[tokio::test]
async fn conflicting_edits_with_the_same_revision() {
    let (app, r, _d) = setup(|_| {});
    let mut first = op("move", Some("f3"), json!({"dx": 1.0}));
    first["revision"] = json!(0);
    let mut second = op("reject", Some("f3"), json!({}));
    second["revision"] = json!(0);
    let (s1, v1) = call(&r, Method::POST, "/api/edits", Some(first)).await;
    let (s2, _) = call(&r, Method::POST, "/api/edits", Some(second)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::CONFLICT));
    assert_eq!(v1["revision"], 1);

    // Racing writers: exactly one wins.
    let mut tasks = Vec::new();
    for k in 0..32 {
        let r = r.clone();
        tasks.push(tokio::spawn(async move {
            let mut o = op("resize", Some("f7"), json!({"new_r": 10.0 + k as f64}));
            o["revision"] = json!(0);
            call(&r, Method::POST, "/api/edits", Some(o)).await.0
        }));
    }
    let mut ok = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::OK => ok += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    assert_eq!(ok, 1);
    assert_eq!(app.snapshot().await.log().len(), 2);
}

#[tokio::test]
async fn export_writes_geojson_and_a_replayable_log() {
    let (app, r, _d) = setup(|_| {});

    let (s, v) = call(&r, Method::POST, "/api/export", None).await;
    assert_eq!((s, v["features"].as_u64()), (StatusCode::OK, Some(45)));
    let text = std::fs::read_to_string(v["geojson"].as_str().unwrap()).unwrap();
    let imported = import_geojson_str(&text).unwrap();
    assert!(imported.errors.is_empty());
    assert_eq!(imported.fused().len(), 45);
    for (a, b) in imported.fused().iter().zip(fixture().iter()) {
        assert!((a.circle.cx - b.circle.cx).abs() < 1e-9 && (a.circle.r - b.circle.r).abs() < 1e-9);
        assert_eq!((a.count, a.score, &a.category), (b.count, b.score, &b.category));
        assert_eq!(a.members, b.members);
    }

    for body in [
        op("reject", Some("f43"), json!({})),
        op("move", Some("f0"), json!({"dx": 5.0, "dy": -3.0})),
        op("add", None, json!({"cx": 400.0, "cy": 400.0, "r": 35.0})),
        op("resize", Some("h0"), json!({"new_r": 20.0})),
        op("reject", Some("f44"), json!({})),
        op("accept", Some("f44"), json!({})),
    ] {
        let (s, _) = call(&r, Method::POST, "/api/edits", Some(body)).await;
        assert_eq!(s, StatusCode::OK);
    }

    let (_, v) = call(&r, Method::POST, "/api/export", Some(json!({}))).await;
    assert_eq!(v["features"], 45, "45 - 1 rejected + 1 added");
    let text = std::fs::read_to_string(v["geojson"].as_str().unwrap()).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    let feature_ids: Vec<&str> = doc["features"].as_array().unwrap().iter().map(|f| f["id"].as_str().unwrap()).collect();
    assert!(!feature_ids.contains(&"f43") && feature_ids.contains(&"h0"));

    let log: EditLog = serde_json::from_str(&std::fs::read_to_string(v["edit_log"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(log.schema, "circlefuse-edits/1");
    assert_eq!(log.ops.len(), 6);
    let replayed = ReviewState::replay(fixture(), ColorMap::default(), &log.ops).unwrap();
    assert_eq!(replayed, app.snapshot().await);

    let (_, v) = call(&r, Method::POST, "/api/export", Some(json!({"include_rejected": true}))).await;
    assert_eq!(v["features"], 46);
    let (s, _) = call(&r, Method::POST, "/api/export", Some(json!({"include_rejected": "yes"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn export_after_one_rejection_has_44_features() {
    let (_, r, _d) = setup(|_| {});
    call(&r, Method::POST, "/api/edits", Some(op("reject", Some("f10"), json!({})))).await;
    let (_, v) = call(&r, Method::POST, "/api/export", None).await;
    let text = std::fs::read_to_string(v["geojson"].as_str().unwrap()).unwrap();
    assert_eq!(import_geojson_str(&text).unwrap().features.len(), 44);
}

#[tokio::test]
async fn export_failure_is_a_500_with_reason() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let app = App::new(ServiceConfig::new("s", blocker.join("sub/out.geojson")), fixture());
    let (s, v) = call(&router(app), Method::POST, "/api/export", None).await;
    assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
    assert!(v["error"].as_str().unwrap().contains("sub"));
}

#[tokio::test]
async fn bearer_token_guards_every_endpoint() {
    let (_, r, _d) = setup(|c| c.token = Some("s3cret".into()));
    for uri in ["/api/slide", "/api/detections", "/api/image"] {
        let (s, _) = call(&r, Method::GET, uri, None).await;
        assert_eq!(s, StatusCode::UNAUTHORIZED, "{uri}");
        let (s, _) = call_with(&r, Method::GET, uri, None, Some("wrong")).await;
        assert_eq!(s, StatusCode::UNAUTHORIZED, "{uri}");
    }
    let (s, _) = call_with(&r, Method::GET, "/api/slide", None, Some("s3cret")).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn background_image_is_served_with_its_type() {
    let (_, r, _d) = setup(|_| {});
    assert_eq!(call(&r, Method::GET, "/api/image", None).await.0, StatusCode::NOT_FOUND);

    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("thumb.png");
    let bytes = b"\x89PNG\r\n\x1a\nrest-of-file".to_vec();
    std::fs::write(&png, &bytes).unwrap();
    let txt = dir.path().join("thumb.txt");
    std::fs::write(&txt, "hello").unwrap();
    assert!(BackgroundImage::load(&txt).is_err());

    let (_, r, _d2) = setup(|c| {
        c.image = Some(BackgroundImage::load(&png).unwrap());
        c.downsample = 16.0;
    });
    let (_, slide) = call(&r, Method::GET, "/api/slide", None).await;
    assert_eq!((slide["image_available"].as_bool(), slide["downsample"].as_f64()), (Some(true), Some(16.0)));
    let resp = r
        .clone()
        .oneshot(Request::builder().uri("/api/image").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");
    assert_eq!(resp.into_body().collect().await.unwrap().to_bytes().to_vec(), bytes);
}

#[tokio::test]
async fn graceful_shutdown_persists_state() {
    let dir = tempfile::tempdir().unwrap();
    let app = App::new(ServiceConfig::new("slide_b", dir.path().join("slide_b.reviewed.geojson")), fixture());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let handle = tokio::spawn(serve(app.clone(), listener, async {
        rx.await.ok();
    }));
    app.apply(serde_json::from_value(op("reject", Some("f0"), json!({}))).unwrap()).await.unwrap();
    tx.send(()).unwrap();
    let result = handle.await.unwrap().unwrap();
    assert_eq!(result.features, 44);
    assert!(dir.path().join("slide_b.reviewed.geojson").exists());
    assert!(dir.path().join("slide_b.reviewed.edits.json").exists());
}
