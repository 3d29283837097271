use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use erase_core::backbone::BackboneSpec;
use erase_core::bfe::BfeConfig;
use erase_core::clients::{FixtureTag2Mask, FixtureVisionClient};
use erase_core::fixtures::FixtureSet;
use erase_core::io;
use erase_core::scene::{generate_scene, SyntheticScene};
use erase_core::segment::LocalSegmenter;
use erase_core::types::Label;
use erase_service::{router, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    app: Router,
    scene: SyntheticScene,
    _dir: tempfile::TempDir,
}

fn app(seed: u64) -> Fixture {
    let scene = generate_scene(seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    scene.write_to(dir.path()).unwrap();
    let fixtures = FixtureSet::load(&dir.path().join("fixtures.jsonl")).unwrap();
    let config = ServiceConfig {
        backbone: BackboneSpec::default(),
        mllm: Some(Arc::new(FixtureVisionClient {
            kind: "mllm".into(),
            fixtures: fixtures.clone(),
        })),
        tag2mask: Arc::new(FixtureTag2Mask { fixtures }),
        segmenter: Arc::new(LocalSegmenter::default()),
        bfe: BfeConfig::default(),
    };
    Fixture {
        app: router(config),
        scene,
        _dir: dir,
    }
}

async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Body,
    content_type: &str,
) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, content_type)
        .body(body)
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec(),
    )
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map_or(Body::empty(), |v| Body::from(v.to_string()));
    let (status, bytes) = call(app, method, uri, body, "application/json").await;
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

async fn new_session(f: &Fixture) -> String {
    let png = io::encode_image(&f.scene.image).unwrap();
    let (status, v) = send(
        &f.app,
        Method::POST,
        "/sessions",
        Some(json!({ "image": B64.encode(png) })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_owned()
}

async fn put_target(f: &Fixture, id: &str) {
    let mask = B64.encode(io::encode_binary_mask(&f.scene.target_mask));
    let (status, v) = send(
        &f.app,
        Method::PUT,
        &format!("/sessions/{id}/mask"),
        Some(json!({ "mask": mask })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
}

async fn wait_for_job(app: &Router, id: &str) -> Value {
    for _ in 0..600 {
        let (_, v) = send(
            app,
            Method::GET,
            &format!("/sessions/{id}/jobs/current"),
            None,
        )
        .await;
        if v["status"] != "running" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job did not finish");
}

#[tokio::test]
async fn session_upload_validation() {
    let f = app(0);
    let id = new_session(&f).await;
    let (status, v) = send(&f.app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        (v["width"].as_u64(), v["mask_area"].as_u64()),
        (Some(64), Some(0))
    );
    assert_eq!(v["job"]["status"], "idle");

    let (status, v) = send(
        &f.app,
        Method::POST,
        "/sessions",
        Some(json!({ "image": "***" })),
    )
    .await;
    assert_eq!(
        (status, code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "bad_base64")
    );
    let (status, v) = send(
        &f.app,
        Method::POST,
        "/sessions",
        Some(json!({ "image": B64.encode(b"not a png") })),
    )
    .await;
    assert_eq!(
        (status, code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "bad_image")
    );
    let (status, v) = send(
        &f.app,
        Method::POST,
        "/sessions",
        Some(json!({ "picture": "" })),
    )
    .await;
    assert_eq!(
        (status, code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "bad_json")
    );
    let (status, v) = send(&f.app, Method::GET, "/sessions/nope", None).await;
    assert_eq!((status, code(&v)), (StatusCode::NOT_FOUND, "not_found"));

    let boundary = "XyZ";
    let mut body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"a.png\"\r\nContent-Type: image/png\r\n\r\n"
    )
    .into_bytes();
    body.extend(io::encode_image(&f.scene.image).unwrap());
    body.extend(format!("\r\n--{boundary}--\r\n").into_bytes());
    let (status, bytes) = call(
        &f.app,
        Method::POST,
        "/sessions",
        Body::from(body),
        &format!("multipart/form-data; boundary={boundary}"),
    )
    .await;
    assert_eq!(
        status,
        StatusCode::CREATED,
        "{}",
        String::from_utf8_lossy(&bytes)
    );
}

#[tokio::test]
async fn prompts_edit_the_mask() {
    let f = app(1);
    let id = new_session(&f).await;
    let g = &f.scene.geometry;
    let (cx, cy) = (g.target_x + 8, g.target_y + 8);
    let uri = format!("/sessions/{id}/prompts");
    let (status, v) = send(
        &f.app,
        Method::POST,
        &uri,
        Some(json!({"kind": "point", "x": cx, "y": cy, "polarity": "include"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert!(v["mask_area"].as_u64().unwrap() >= 200, "{v}");

    let (status, v) = send(
        &f.app,
        Method::POST,
        &uri,
        Some(json!({"kind": "point", "x": 999, "y": 0, "polarity": "include"})),
    )
    .await;
    assert_eq!(
        (status, code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_input")
    );
    let (status, v) = send(&f.app, Method::POST, &uri, Some(json!({"kind": "lasso"}))).await;
    assert_eq!(
        (status, code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "bad_json")
    );

    let (status, v) = send(
        &f.app,
        Method::POST,
        &uri,
        Some(json!({"kind": "point", "x": cx, "y": cy, "polarity": "exclude"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["mask_area"], 0);

    put_target(&f, &id).await;
    let (status, bytes) = call(
        &f.app,
        Method::GET,
        &format!("/sessions/{id}/mask"),
        Body::empty(),
        "",
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(io::decode_binary_mask(&bytes).unwrap(), f.scene.target_mask);
}

#[tokio::test]
async fn tags_inferred_then_edited() {
    let f = app(2);
    let id = new_session(&f).await;
    let (status, v) = send(&f.app, Method::GET, &format!("/sessions/{id}/tags"), None).await;
    assert_eq!((status, code(&v)), (StatusCode::NOT_FOUND, "tags_not_set"));
    let (status, v) = send(&f.app, Method::POST, &format!("/sessions/{id}/bfe"), None).await;
    assert_eq!(
        (status, code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "no_target")
    );

    put_target(&f, &id).await;
    let (status, v) = send(&f.app, Method::POST, &format!("/sessions/{id}/bfe"), None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["target"], "red box");
    assert_eq!(v["background"], json!(["grass", "brick wall"]));
    let (_, labels) = call(
        &f.app,
        Method::GET,
        &format!("/sessions/{id}/labels"),
        Body::empty(),
        "",
    )
    .await;
    assert_eq!(io::decode_label_mask(&labels).unwrap(), f.scene.labels);

    let uri = format!("/sessions/{id}/tags");
    let (status, v) = send(
        &f.app,
        Method::PUT,
        &uri,
        Some(json!({"target": "red box", "non_target": ["Grass"], "background": ["grass"]})),
    )
    .await;
    assert_eq!(
        (status, code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "tag_overlap")
    );

    // dropping the ball from the non-target list turns its pixels into background
    let (status, v) = send(
        &f.app,
        Method::PUT,
        &uri,
        Some(json!({"target": "red box", "non_target": [], "background": []})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["warnings"].as_array().unwrap().len(), 1);
    let (_, labels) = call(
        &f.app,
        Method::GET,
        &format!("/sessions/{id}/labels"),
        Body::empty(),
        "",
    )
    .await;
    assert_eq!(
        io::decode_label_mask(&labels)
            .unwrap()
            .count(Label::NonTarget),
        0
    );

    let (status, v) = send(
        &f.app,
        Method::PUT,
        &uri,
        Some(json!({"target": "red box", "non_target": ["blue ball"], "background": ["grass"]})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["warnings"].as_array().unwrap().is_empty());
    let (_, labels) = call(
        &f.app,
        Method::GET,
        &format!("/sessions/{id}/labels"),
        Body::empty(),
        "",
    )
    .await;
    assert_eq!(io::decode_label_mask(&labels).unwrap(), f.scene.labels);
}

#[tokio::test]
async fn job_lifecycle() {
    let f = app(3);
    let id = new_session(&f).await;
    let (status, v) = send(&f.app, Method::GET, &format!("/sessions/{id}/result"), None).await;
    assert_eq!((status, code(&v)), (StatusCode::CONFLICT, "not_ready"));
    put_target(&f, &id).await;
    send(&f.app, Method::POST, &format!("/sessions/{id}/bfe"), None).await;

    let jobs = format!("/sessions/{id}/jobs");
    let (status, v) = send(&f.app, Method::POST, &jobs, Some(json!({"rank": 0}))).await;
    assert_eq!(
        (status, code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_input")
    );
    let (status, v) = send(
        &f.app,
        Method::POST,
        &jobs,
        Some(json!({"iterations": 400, "sampling_steps": 2})),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    assert_eq!(
        (v["status"].as_str(), v["total"].as_u64()),
        (Some("running"), Some(400))
    );
    let (status, v) = send(&f.app, Method::POST, &jobs, Some(json!({}))).await;
    assert_eq!((status, code(&v)), (StatusCode::CONFLICT, "job_running"));

    let done = wait_for_job(&f.app, &id).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["iteration"], 400);
    assert!(done["losses"]["l_total"].as_f64().unwrap().is_finite());

    let (status, png) = call(
        &f.app,
        Method::GET,
        &format!("/sessions/{id}/result"),
        Body::empty(),
        "",
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(io::decode_image(&png).unwrap().dims(), (64, 64));
    let (status, adapter) = call(
        &f.app,
        Method::GET,
        &format!("/sessions/{id}/adapter"),
        Body::empty(),
        "",
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let lora = erase_core::lora::LoraState::from_archive(&adapter).unwrap();

    let (_, snap) = send(
        &f.app,
        Method::GET,
        &format!("/sessions/{id}/snapshot"),
        None,
    )
    .await;
    assert_eq!(snap["lora_digest"], lora.digest());
    assert_eq!(snap["result_sha256"], done["result_sha256"]);
    assert_eq!(snap["trace"].as_array().unwrap().len(), 400);
    assert_eq!(snap["config"]["learning_rate"], 0.01);
    assert_eq!(snap["tags"]["non_target"], json!(["blue ball"]));
}

#[tokio::test]
async fn degenerate_labels_fail_the_job() {
    let f = app(4);
    let id = new_session(&f).await;
    let full = B64.encode(io::encode_binary_mask(
        &erase_core::types::BinaryMask::from_fn(64, 64, |_, _| true),
    ));
    send(
        &f.app,
        Method::PUT,
        &format!("/sessions/{id}/mask"),
        Some(json!({ "mask": full })),
    )
    .await;
    let (status, _) = send(
        &f.app,
        Method::POST,
        &format!("/sessions/{id}/jobs"),
        Some(json!({"iterations": 2})),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let v = wait_for_job(&f.app, &id).await;
    assert_eq!(v["status"], "failed");
    assert_eq!(v["error"]["code"], "degenerate_labels");
    // a failed job can be replaced
    send(
        &f.app,
        Method::DELETE,
        &format!("/sessions/{id}/mask"),
        None,
    )
    .await;
    put_target(&f, &id).await;
    let (status, _) = send(
        &f.app,
        Method::POST,
        &format!("/sessions/{id}/jobs"),
        Some(json!({"iterations": 2, "sampling_steps": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(wait_for_job(&f.app, &id).await["status"], "done");
}
