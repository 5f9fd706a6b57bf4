use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use leafscan_api::{load_state, router, ServeConfig, StartupError, DEFAULT_MAX_BODY_BYTES};
use leafscan_core::checkpoint;
use leafscan_core::image::{encode_ppm, ImageRgb8};
use leafscan_core::kb::KnowledgeBase;
use leafscan_core::model::{BackboneConfig, ConvBlock, Model};
use leafscan_core::pipeline::DetectOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

const LABELS: [&str; 4] = ["Tomato___Early_blight", "Tomato___Late_blight", "Tomato___healthy", "Mystery___spots"];

fn seed_kb() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/kb.json")
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: ServeConfig,
}

fn fixture(detector: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = BackboneConfig {
        blocks: vec![
            ConvBlock {
                out_channels: 4,
                stride: 1,
                pool: true,
            },
            ConvBlock {
                out_channels: 6,
                stride: 1,
                pool: true,
            },
        ],
        embedding_dim: 8,
        num_classes: LABELS.len(),
        input_size: 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Model::init(config, LABELS.iter().map(|s| s.to_string()).collect(), &mut rng).unwrap();
    if detector {
        model.init_detector(4, &mut rng).unwrap();
    }
    let model_path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &model_path).unwrap();
    let config = ServeConfig {
        host: "127.0.0.1".into(),
        port: 0,
        model: model_path,
        kb: seed_kb(),
        store: dir.path().join("requests.jsonl"),
        max_body_bytes: DEFAULT_MAX_BODY_BYTES,
        detect: DetectOptions {
            confidence_threshold: 0.0,
            ..DetectOptions::default()
        },
    };
    Fixture { _dir: dir, config }
}

fn app(config: &ServeConfig) -> Router {
    router(Arc::new(load_state(config).unwrap().0))
}

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON body: {bytes:?}"));
    (status, value)
}

fn leaf_ppm() -> Vec<u8> {
    let (w, h) = (40, 30);
    let pixels = (0..w * h)
        .flat_map(|i| {
            let (x, y) = (i % w, i / w);
            let inside = (x as f32 - 20.0).powi(2) / 196.0 + (y as f32 - 15.0).powi(2) / 100.0 < 1.0;
            if inside {
                [40, 160, 50]
            } else {
                [150, 140, 130]
            }
        })
        .collect();
    encode_ppm(&ImageRgb8::new(w, h, pixels).unwrap())
}

#[tokio::test]
async fn health_reports_versions() {
    let f = fixture(false);
    let app = app(&f.config);
    let (status, body) = call(&app, "GET", "/healthz", vec![]).await;
    assert_eq!(status, StatusCode::OK);
    let (_, crc) = checkpoint::load(&f.config.model).unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["model_version"], format!("{crc:08x}"));
    assert_eq!(body["kb_version"], KnowledgeBase::load(&seed_kb()).unwrap().version());
}

#[tokio::test]
async fn diagnose_contract() {
    for detector in [false, true] {
        let f = fixture(detector);
        let app = app(&f.config);
        let (status, body) = call(&app, "POST", "/api/diagnose?k=4", leaf_ppm()).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let top: Vec<f64> = body["top_k"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["probability"].as_f64().unwrap())
            .collect();
        assert_eq!(top.len(), 4);
        assert!((top.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(top.windows(2).all(|w| w[0] >= w[1]));
        assert!(top.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(body["detections"].as_array().unwrap().is_empty(), !detector);

        let label = body["top_k"][0]["label"].as_str().unwrap();
        let expected = match label {
            "Tomato___healthy" => "healthy",
            "Mystery___spots" => "unmapped",
            _ => "mapped",
        };
        assert_eq!(body["disease"]["status"], expected);
        assert_eq!(body["disease"]["label"], label);

        let (status, body) = call(&app, "POST", "/api/diagnose", leaf_ppm()).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["top_k"].as_array().unwrap().len(), 3);
    }
}

#[tokio::test]
async fn diagnose_errors() {
    let f = fixture(false);
    let app = app(&f.config);
    let (status, body) = call(&app, "POST", "/api/diagnose", b"not an image".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "bad_image");
    assert!(body["message"].is_string());
    for k in ["0", "5", "x"] {
        let (status, body) = call(&app, "POST", &format!("/api/diagnose?k={k}"), leaf_ppm()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(body["code"], "invalid_k");
    }

    let mut small = f.config.clone();
    small.max_body_bytes = 100;
    let app = self::app(&small);
    let (status, body) = call(&app, "POST", "/api/diagnose", leaf_ppm()).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(body["code"], "payload_too_large");
}

#[tokio::test]
async fn oversized_default_limit() {
    let f = fixture(false);
    let app = app(&f.config);
    let (status, _) = call(&app, "POST", "/api/diagnose", vec![0u8; DEFAULT_MAX_BODY_BYTES + 1]).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn kb_routes() {
    let f = fixture(false);
    let app = app(&f.config);
    let (status, body) = call(&app, "GET", "/api/kb/diseases?query=zzzz", vec![]).await;
    assert_eq!((status, body), (StatusCode::OK, json!([])));
    let (_, body) = call(&app, "GET", "/api/kb/diseases?query=", vec![]).await;
    assert_eq!(body, json!([]));
    let (status, body) = call(&app, "GET", "/api/kb/diseases?query=late%20blight", vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body[0]["id"], "tomato-late-blight");
    let (status, body) = call(&app, "GET", "/api/kb/diseases/tomato-late-blight", vec![]).await;
    assert_eq!(status, StatusCode::OK);
    for field in ["id", "name", "crop_ids", "causes", "symptoms", "treatments", "image_refs", "model_labels"] {
        assert!(body.get(field).is_some(), "{field}");
    }
    let (status, body) = call(&app, "GET", "/api/kb/diseases/nope", vec![]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
    let (status, body) = call(&app, "GET", "/api/kb/crops", vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.as_array().unwrap().len() >= 11);
}

fn json_body(v: Value) -> Vec<u8> {
    serde_json::to_vec(&v).unwrap()
}

#[tokio::test]
async fn request_lifecycle() {
    let f = fixture(false);
    let app = app(&f.config);
    let (status, created) = call(
        &app,
        "POST",
        "/api/requests",
        json_body(json!({"kind": "expert_contact", "channel": "text", "message": "yellow spots"})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["status"], "open");
    let id = created["id"].as_u64().unwrap();
    let (status, fetched) = call(&app, "GET", &format!("/api/requests/{id}"), vec![]).await;
    assert_eq!((status, &fetched), (StatusCode::OK, &created));

    let (status, _) = call(&app, "POST", &format!("/api/requests/{id}/close"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&app, "POST", &format!("/api/requests/{id}/close"), vec![]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "already_closed");

    let (status, body) = call(&app, "GET", "/api/requests/999", vec![]).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (status, _) = call(&app, "POST", "/api/requests/999/close", vec![]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/requests/abc", vec![]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn request_validation_and_listing() {
    let f = fixture(false);
    let app = app(&f.config);
    let (status, body) = call(
        &app,
        "POST",
        "/api/requests",
        json_body(json!({"kind": "product_order", "product": "seed", "quantity": 0})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "validation_failed");
    assert!(body["fields"]["quantity"].is_string());
    let (status, body) = call(&app, "POST", "/api/requests", b"{".to_vec()).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_json")));

    for body in [
        json!({"kind": "product_order", "product": "seed", "quantity": 4}),
        json!({"kind": "loan_application", "applicant": "Rupa", "amount": 15000}),
        json!({"kind": "product_order", "product": "fertilizer", "quantity": 1}),
    ] {
        assert_eq!(call(&app, "POST", "/api/requests", json_body(body)).await.0, StatusCode::CREATED);
    }
    let (_, orders) = call(&app, "GET", "/api/requests?kind=product_order", vec![]).await;
    let ids: Vec<u64> = orders.as_array().unwrap().iter().map(|r| r["id"].as_u64().unwrap()).collect();
    assert_eq!(ids, [1, 3]);
    let (_, all) = call(&app, "GET", "/api/requests", vec![]).await;
    assert_eq!(all.as_array().unwrap().len(), 3);
    let (status, body) = call(&app, "GET", "/api/requests?kind=barter", vec![]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["fields"]["kind"].is_string());
}

#[tokio::test]
async fn requests_persist_across_restart() {
    let f = fixture(false);
    {
        let app = app(&f.config);
        for q in 1..=3 {
            let body = json_body(json!({"kind": "product_order", "product": "pesticide", "quantity": q}));
            assert_eq!(call(&app, "POST", "/api/requests", body).await.0, StatusCode::CREATED);
        }
        call(&app, "POST", "/api/requests/2/close", vec![]).await;
    }
    let app = app(&f.config);
    for id in 1..=3 {
        let (status, body) = call(&app, "GET", &format!("/api/requests/{id}"), vec![]).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["status"], if id == 2 { "closed" } else { "open" });
    }
    let body = json_body(json!({"kind": "loan_application", "applicant": "Ali", "amount": 1.5}));
    assert_eq!(call(&app, "POST", "/api/requests", body).await.1["id"], 4);
}

#[tokio::test]
async fn unknown_route_is_json_404() {
    let f = fixture(false);
    let app = app(&f.config);
    let (status, body) = call(&app, "GET", "/api/nothing", vec![]).await;
    assert_eq!((status, body["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (status, _) = call(&app, "DELETE", "/api/kb/crops", vec![]).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
}

#[test]
fn startup_fails_fast() {
    let f = fixture(false);
    let mut missing = f.config.clone();
    missing.model = missing.model.with_file_name("absent.ckpt");
    assert!(matches!(load_state(&missing), Err(StartupError::MissingCheckpoint(_))));

    let mut bytes = std::fs::read(&f.config.model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let corrupt = f.config.model.with_file_name("corrupt.ckpt");
    std::fs::write(&corrupt, bytes).unwrap();
    let mut bad = f.config.clone();
    bad.model = corrupt;
    assert!(matches!(load_state(&bad), Err(StartupError::Checkpoint(_))));
}

#[test]
fn startup_audit_classifies_labels() {
    let f = fixture(false);
    let (_, audit) = load_state(&f.config).unwrap();
    assert_eq!(audit.mapped, ["Tomato___Early_blight", "Tomato___Late_blight"]);
    assert_eq!(audit.healthy, ["Tomato___healthy"]);
    assert_eq!(audit.unmapped, ["Mystery___spots"]);
}
