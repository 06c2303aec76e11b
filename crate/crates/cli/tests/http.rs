use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use clap::Parser;
use http_body_util::BodyExt;
use orchard_cli::commands::{run, Cli};
use orchard_cli::server::{router, AppState};
use orchard_core::data_io::{
    load_clicks, load_color_model, load_manifest, read_lines, save_clicks, save_curves, write_report, DetectionRecord,
};
use orchard_core::detect::{ClickRecord, FruitLabel};
use orchard_core::eval::{metrics_over_iou_grid, FrameBoxes};
use orchard_core::imaging::{BinaryMask, BoundingBox};
use orchard_core::rle::Rle;
use orchard_core::yieldmap::YieldReport;
use serde_json::{json, Value};
use tower::ServiceExt;

/// One simulated dataset shared by every test; each test makes its own
/// sessions, which never collide.
fn data_root() -> &'static Path {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let sim = dir.path().join("datasets/sim");
        cli(&["simulate", "--seed", "2024", "--occlusion-rate", "0.02", "--out", sim.to_str().unwrap()]);
        dir
    })
    .path()
}

fn cli(args: &[&str]) {
    let cli = Cli::try_parse_from(std::iter::once("orchard").chain(args.iter().copied())).unwrap();
    run(cli).unwrap();
}

fn app() -> Router {
    router(Arc::new(AppState::open(data_root()).unwrap()))
}

struct Resp {
    status: StatusCode,
    bytes: Vec<u8>,
    content_type: Option<String>,
}

impl Resp {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|_| panic!("not JSON: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> Resp {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("Idempotency-Key", k);
    }
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let content_type = res
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Resp {
        status,
        bytes,
        content_type,
    }
}

fn train_frames() -> Vec<String> {
    let m = load_manifest(data_root().join("datasets/sim/train_manifest.json")).unwrap();
    m.frames.into_iter().map(|f| f.id).collect()
}

fn recorded_clicks() -> Vec<ClickRecord> {
    load_clicks(data_root().join("datasets/sim/clicks.jsonl")).unwrap()
}

async fn open_session(app: &Router, key: Option<&str>) -> String {
    let r = call(app, "POST", "/v1/sessions", Some(json!({"dataset": "sim", "frames": train_frames()})), key).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.bytes));
    r.json()["session_id"].as_str().unwrap().to_string()
}

async fn click_and_label(app: &Router, session: &str, c: &ClickRecord) -> Value {
    let r = call(
        app,
        "POST",
        &format!("/v1/sessions/{session}/click"),
        Some(json!({"frame": c.frame, "x": c.x, "y": c.y})),
        None,
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let component = r.json()["component_id"].clone();
    let r = call(
        app,
        "POST",
        &format!("/v1/sessions/{session}/label"),
        Some(json!({"component_id": component, "label": c.label})),
        None,
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    r.json()
}

#[tokio::test]
async fn session_lifecycle() {
    let app = app();
    let s = open_session(&app, None).await;
    let c = &recorded_clicks()[0];
    let uri = format!("/v1/sessions/{s}/click");
    let body = json!({"frame": c.frame, "x": c.x, "y": c.y});
    let a = call(&app, "POST", &uri, Some(body.clone()), None).await.json();
    let b = call(&app, "POST", &uri, Some(body), None).await.json();
    assert_eq!(a["component_id"], b["component_id"]);
    let rle: Rle = serde_json::from_value(a["highlight_mask_rle"].clone()).unwrap();
    let mask = rle.decode().unwrap();
    assert!(mask.get(c.x, c.y), "highlight covers the clicked pixel");

    let labeled = call(
        &app,
        "POST",
        &format!("/v1/sessions/{s}/label"),
        Some(json!({"component_id": a["component_id"], "label": "apple"})),
        None,
    )
    .await;
    assert_eq!(labeled.status, StatusCode::OK);
    assert_eq!(labeled.json()["labels"][0]["label"], "apple");

    let fin = call(&app, "POST", &format!("/v1/sessions/{s}/finalize"), None, None).await;
    assert_eq!(fin.status, StatusCode::OK);
    let model = fin.json()["model_id"].as_str().unwrap().to_string();

    let view = call(&app, "GET", &format!("/v1/sessions/{s}"), None, None).await.json();
    assert_eq!(view["state"], "finalized");
    assert_eq!(view["model_id"], model.as_str());

    for (uri, body) in [
        (format!("/v1/sessions/{s}/click"), Some(json!({"frame": c.frame, "x": c.x, "y": c.y}))),
        (format!("/v1/sessions/{s}/label"), Some(json!({"component_id": 0, "label": "background"}))),
        (format!("/v1/sessions/{s}/finalize"), None),
    ] {
        assert_eq!(call(&app, "POST", &uri, body, None).await.status, StatusCode::CONFLICT, "{uri}");
    }

    let det = call(&app, "POST", &format!("/v1/models/{model}/detect?frame={}", c.frame), None, None).await;
    assert_eq!(det.status, StatusCode::OK);
    assert_eq!(det.json()["frame"], c.frame.as_str());
}

#[tokio::test]
async fn finalize_without_apple_labels_is_rejected() {
    let app = app();
    let s = open_session(&app, None).await;
    let fin = call(&app, "POST", &format!("/v1/sessions/{s}/finalize"), None, None).await;
    assert_eq!(fin.status, StatusCode::UNPROCESSABLE_ENTITY);

    let mut c = recorded_clicks()[0].clone();
    c.label = FruitLabel::Background;
    click_and_label(&app, &s, &c).await;
    let fin = call(&app, "POST", &format!("/v1/sessions/{s}/finalize"), None, None).await;
    assert_eq!(fin.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(fin.json()["error"]["code"], "invalid");
    // A rejected finalize leaves the session open.
    let view = call(&app, "GET", &format!("/v1/sessions/{s}"), None, None).await.json();
    assert_eq!(view["state"], "open");
}

#[tokio::test]
async fn unknown_ids_and_bad_input() {
    let app = app();
    let s = open_session(&app, None).await;
    let frame = &train_frames()[0];
    let cases: Vec<(&str, String, Option<Value>, StatusCode)> = vec![
        ("GET", "/v1/sessions/nope".into(), None, StatusCode::NOT_FOUND),
        ("POST", "/v1/sessions/nope/click".into(), Some(json!({"frame": frame, "x": 1, "y": 1})), StatusCode::NOT_FOUND),
        ("POST", "/v1/sessions/nope/finalize".into(), None, StatusCode::NOT_FOUND),
        ("POST", "/v1/models/nope/detect?frame=x".into(), None, StatusCode::NOT_FOUND),
        ("GET", "/v1/frames/nope".into(), None, StatusCode::NOT_FOUND),
        ("GET", "/v1/reports/nope".into(), None, StatusCode::NOT_FOUND),
        ("POST", "/v1/sessions".into(), Some(json!({"dataset": "nope"})), StatusCode::NOT_FOUND),
        ("POST", "/v1/sessions".into(), Some(json!({"dataset": "sim", "frames": ["nope"]})), StatusCode::NOT_FOUND),
        (
            "POST",
            "/v1/sessions".into(),
            Some(json!({"dataset": "sim", "range": {"start": 0, "count": 100000}})),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        ("POST", "/v1/sessions".into(), Some(json!({"datset": "sim"})), StatusCode::UNPROCESSABLE_ENTITY),
        (
            "POST",
            format!("/v1/sessions/{s}/click"),
            Some(json!({"frame": "nope", "x": 1, "y": 1})),
            StatusCode::NOT_FOUND,
        ),
        (
            "POST",
            format!("/v1/sessions/{s}/click"),
            Some(json!({"frame": frame, "x": 5000, "y": 1})),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            "POST",
            format!("/v1/sessions/{s}/label"),
            Some(json!({"component_id": 9999, "label": "apple"})),
            StatusCode::NOT_FOUND,
        ),
        (
            "POST",
            format!("/v1/sessions/{s}/label"),
            Some(json!({"component_id": 0, "label": "pear"})),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
    ];
    for (method, uri, body, expected) in cases {
        let r = call(&app, method, &uri, body, None).await;
        assert_eq!(r.status, expected, "{method} {uri}: {}", String::from_utf8_lossy(&r.bytes));
    }
    // Failed mutations are not logged.
    let log = data_root().join("sessions").join(&s).join("events.jsonl");
    assert!(!log.exists() || std::fs::read_to_string(&log).unwrap().is_empty());
}

#[tokio::test]
async fn idempotency_keys_replay_responses() {
    let app = app();
    let a = open_session(&app, Some("create-1")).await;
    let b = open_session(&app, Some("create-1")).await;
    assert_eq!(a, b);
    assert_ne!(a, open_session(&app, Some("create-2")).await);

    let c = &recorded_clicks()[0];
    let click = call(
        &app,
        "POST",
        &format!("/v1/sessions/{a}/click"),
        Some(json!({"frame": c.frame, "x": c.x, "y": c.y})),
        Some("k1"),
    )
    .await
    .json();
    let label = |key: &'static str| {
        let app = app.clone();
        let uri = format!("/v1/sessions/{a}/label");
        let body = json!({"component_id": click["component_id"], "label": "apple"});
        async move { call(&app, "POST", &uri, Some(body), Some(key)).await }
    };
    let first = label("k2").await;
    let again = label("k2").await;
    assert_eq!(first.status, StatusCode::OK);
    assert_eq!(first.bytes, again.bytes);
    let log = data_root().join("sessions").join(&a).join("events.jsonl");
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);

    let fin = call(&app, "POST", &format!("/v1/sessions/{a}/finalize"), None, Some("f")).await;
    let fin_again = call(&app, "POST", &format!("/v1/sessions/{a}/finalize"), None, Some("f")).await;
    assert_eq!(fin.status, StatusCode::OK);
    assert_eq!(fin.bytes, fin_again.bytes);
    let unkeyed = call(&app, "POST", &format!("/v1/sessions/{a}/finalize"), None, None).await;
    assert_eq!(unkeyed.status, StatusCode::CONFLICT);

    // Replies survive a restart.
    let restarted = self::app();
    assert_eq!(open_session(&restarted, Some("create-1")).await, a);
    let fin_restarted = call(&restarted, "POST", &format!("/v1/sessions/{a}/finalize"), None, Some("f")).await;
    assert_eq!(fin_restarted.bytes, fin.bytes);
}

#[tokio::test]
async fn sessions_are_rebuilt_from_their_log() {
    let app = app();
    let s = open_session(&app, None).await;
    for c in recorded_clicks().iter().take(3) {
        click_and_label(&app, &s, c).await;
    }
    let before = call(&app, "GET", &format!("/v1/sessions/{s}"), None, None).await.json();
    drop(app);

    let app = self::app();
    let after = call(&app, "GET", &format!("/v1/sessions/{s}"), None, None).await.json();
    assert_eq!(before, after);
    let fin = call(&app, "POST", &format!("/v1/sessions/{s}/finalize"), None, None).await;
    assert_eq!(fin.status, StatusCode::OK);
    let model = fin.json()["model_id"].clone();

    let app = self::app();
    let view = call(&app, "GET", &format!("/v1/sessions/{s}"), None, None).await.json();
    assert_eq!(view["state"], "finalized");
    assert_eq!(view["model_id"], model);
}

#[tokio::test]
async fn frames_are_served_as_png() {
    let app = app();
    let id = &train_frames()[0];
    let r = call(&app, "GET", &format!("/v1/frames/{id}"), None, None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type.as_deref(), Some("image/png"));
    let on_disk = std::fs::read(data_root().join(format!("datasets/sim/frames/{id}.png"))).unwrap();
    assert_eq!(r.bytes, on_disk);
    let r = call(&app, "GET", &format!("/v1/frames/{id}?dataset=sim"), None, None).await;
    assert_eq!(r.status, StatusCode::OK);
}

#[tokio::test]
async fn reports_combine_yield_and_metrics() {
    let root = tempfile::tempdir().unwrap();
    let app = router(Arc::new(AppState::open(root.path()).unwrap()));
    assert_eq!(call(&app, "GET", "/v1/reports/d1", None, None).await.status, StatusCode::NOT_FOUND);

    let dir = root.path().join("reports/d1");
    let report = YieldReport {
        dataset: "d1".into(),
        method: "GMM".into(),
        front_sum: 200,
        back_sum: 148,
        single_side_sum: 348,
        merged: 256,
        harvested: Some(270),
        merged_accuracy: Some(94.81),
        single_side_accuracy: Some(128.89),
    };
    write_report(dir.join("yield"), &[report]).unwrap();
    let r = call(&app, "GET", "/v1/reports/d1", None, None).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["yield"][0]["merged"], 256);
    assert!(v["metrics"].is_null());

    let frames = [FrameBoxes {
        frame: "f".into(),
        detections: vec![BoundingBox::new(0, 0, 4, 4)],
        ground_truth: vec![BoundingBox::new(0, 0, 4, 4)],
    }];
    save_curves(dir.join("metrics.json"), &[metrics_over_iou_grid("d1", "GMM", &frames).unwrap()]).unwrap();
    let v = call(&app, "GET", "/v1/reports/d1", None, None).await.json();
    assert_eq!(v["metrics"][0]["points"].as_array().unwrap().len(), 99);
}

/// The scripted annotator's apple clicks, padded to 20 with background
/// clicks on pixels well away from any apple.
fn twenty_clicks(root: &Path) -> Vec<ClickRecord> {
    let mut clicks = recorded_clicks();
    'frames: for id in train_frames() {
        let truth = BinaryMask::load_png(root.join(format!("datasets/sim/truth/{id}.png"))).unwrap();
        for y in (8..truth.height() - 8).step_by(17) {
            for x in (8..truth.width() - 8).step_by(23) {
                if clicks.len() == 20 {
                    break 'frames;
                }
                let near_apple = (y - 8..=y + 8).any(|yy| (x - 8..=x + 8).any(|xx| truth.get(xx, yy)));
                if !near_apple {
                    clicks.push(ClickRecord {
                        frame: id.clone(),
                        x,
                        y,
                        label: FruitLabel::Background,
                    });
                    break;
                }
            }
        }
    }
    assert_eq!(clicks.len(), 20);
    clicks
}

#[tokio::test]
async fn api_reproduces_batch_cli_bit_exactly() {
    let root = data_root();
    let work = tempfile::tempdir().unwrap();
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    let sim = root.join("datasets/sim");
    let clicks = twenty_clicks(root);
    let clicks_path = work.path().join("clicks20.jsonl");
    save_clicks(&clicks_path, &clicks).unwrap();

    let model_path = work.path().join("model.json");
    let det_dir = work.path().join("det");
    let cfg = s(&sim.join("config.json"));
    cli(&[
        "train-color-model",
        "--manifest",
        &s(&sim.join("train_manifest.json")),
        "--clicks",
        &s(&clicks_path),
        "--config",
        &cfg,
        "--out",
        &s(&model_path),
    ]);
    cli(&["detect", "--manifest", &s(&sim.join("manifest.json")), "--model", &s(&model_path), "--config", &cfg, "--out", &s(&det_dir)]);

    let app = app();
    let session = open_session(&app, None).await;
    for c in &clicks {
        click_and_label(&app, &session, c).await;
    }
    let fin = call(&app, "POST", &format!("/v1/sessions/{session}/finalize"), None, None).await;
    assert_eq!(fin.status, StatusCode::OK);
    let model_id = fin.json()["model_id"].as_str().unwrap().to_string();
    assert_eq!(
        load_color_model(root.join(format!("models/{model_id}/model.json"))).unwrap(),
        load_color_model(&model_path).unwrap()
    );

    let cli_records: Vec<DetectionRecord> = read_lines(det_dir.join("detections.jsonl")).unwrap();
    let manifest = load_manifest(sim.join("manifest.json")).unwrap();
    let mut api_records = Vec::new();
    let mut foreground = 0;
    for f in &manifest.frames {
        let r = call(&app, "POST", &format!("/v1/models/{model_id}/detect?frame={}", f.id), None, None).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        let api_mask = serde_json::from_value::<Rle>(v["mask_rle"].clone()).unwrap().decode().unwrap();
        let cli_mask = BinaryMask::load_png(det_dir.join(format!("masks/{}.png", f.id))).unwrap();
        assert_eq!(api_mask, cli_mask, "frame {}", f.id);
        foreground += api_mask.count();
        api_records.extend(serde_json::from_value::<Vec<DetectionRecord>>(v["detections"].clone()).unwrap());
    }
    assert!(foreground > 0);
    assert_eq!(api_records, cli_records);
}
