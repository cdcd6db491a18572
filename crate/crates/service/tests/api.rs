use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use nanolens::checkpoint::save_checkpoint;
use nanolens::{build_autoencoder, build_classifier, AutoencoderConfig, ClassifierConfig};
use nanolens_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    _dir: TempDir,
    cfg: ServiceConfig,
    app: Router,
}

fn write_models(dir: &Path) {
    let ae = AutoencoderConfig {
        input_size: 16,
        channel_schedule: vec![4, 4],
        ..Default::default()
    };
    save_checkpoint(&build_autoencoder(&ae, 3).unwrap(), dir.join("cae.ckpt")).unwrap();
    let cls = ClassifierConfig {
        input_size: 16,
        conv_channels: vec![4, 6],
        hidden_units: 8,
        ..Default::default()
    };
    save_checkpoint(&build_classifier(&cls, 4).unwrap(), dir.join("cls.ckpt")).unwrap();
    std::fs::write(dir.join("broken.ckpt"), b"NLNS but not really").unwrap();
    std::fs::write(dir.join("notes.txt"), b"ignored").unwrap();
}

fn app_for(cfg: &ServiceConfig) -> Router {
    router(Arc::new(AppState::open(cfg).unwrap()), cfg.static_dir.clone())
}

fn fixture_with(limit: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("models");
    std::fs::create_dir(&ckpt).unwrap();
    write_models(&ckpt);
    let stat = dir.path().join("static");
    std::fs::create_dir(&stat).unwrap();
    std::fs::write(stat.join("index.html"), "<html>explorer</html>").unwrap();
    let mut cfg = ServiceConfig::new(&ckpt, dir.path().join("data"));
    cfg.static_dir = Some(stat);
    cfg.workers = 2;
    cfg.max_upload_bytes = limit;
    let app = app_for(&cfg);
    Fixture { _dir: dir, cfg, app }
}

fn fixture() -> Fixture {
    fixture_with(nanolens_service::DEFAULT_MAX_UPLOAD)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let ct = res
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ct, bytes)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Option<String>, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, _, bytes) = send(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn sample_png(seed: u8) -> Vec<u8> {
    let img = image::GrayImage::from_fn(24, 20, |x, y| {
        image::Luma([((x * 11 + y * 7) as u8).wrapping_mul(seed | 1)])
    });
    let mut out = Vec::new();
    image::DynamicImage::ImageLuma8(img)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .unwrap();
    out
}

async fn upload(app: &Router, bytes: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::post("/api/images")
        .header(header::CONTENT_TYPE, "image/png")
        .body(Body::from(bytes))
        .unwrap();
    let (status, _, body) = send(app, req).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn wait_for_job(app: &Router, id: &str) -> Value {
    for _ in 0..600 {
        let (status, _, body) = get(app, &format!("/api/jobs/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        let job = json_of(&body);
        match job["state"].as_str().unwrap() {
            "done" | "failed" => return job,
            "queued" | "running" => tokio::time::sleep(Duration::from_millis(50)).await,
            other => panic!("unexpected state {other}"),
        }
    }
    panic!("job {id} did not finish");
}

#[tokio::test]
async fn health_and_static_assets() {
    let f = fixture();
    let (status, _, body) = get(&f.app, "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    let health = json_of(&body);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["models"], 2);

    let (status, ct, body) = get(&f.app, "/index.html").await;
    assert_eq!(status, StatusCode::OK);
    assert!(ct.unwrap().starts_with("text/html"));
    assert_eq!(body, b"<html>explorer</html>");

    let (status, _, body) = get(&f.app, "/api/nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["code"], "not_found");
}

#[tokio::test]
async fn catalog_lists_valid_models_and_diagnostics() {
    let f = fixture();
    let (status, _, body) = get(&f.app, "/api/models").await;
    assert_eq!(status, StatusCode::OK);
    let models = json_of(&body);
    let models = models.as_array().unwrap();
    assert_eq!(models.len(), 2);
    assert_eq!(models[0]["id"], "cae");
    assert_eq!(models[1]["id"], "cls");

    let (_, _, body) = get(&f.app, "/api/models/invalid").await;
    let invalid = json_of(&body);
    assert_eq!(invalid.as_array().unwrap().len(), 1);
    assert_eq!(invalid[0]["file"], "broken.ckpt");
    assert!(!invalid[0]["reason"].as_str().unwrap().is_empty());

    // Layer table matches shape propagation of the stored model.
    let model = nanolens::checkpoint::load_checkpoint(f.cfg.ckpt_dir.join("cls.ckpt")).unwrap();
    let shapes = model.layer_shapes(1).unwrap();
    let rows = models[1]["layers"].as_array().unwrap();
    assert_eq!(rows.len(), model.len());
    for (row, [_, c, h, w]) in rows.iter().zip(shapes) {
        assert_eq!(row["output_shape"], json!([c, h, w]));
    }
    assert_eq!(rows[0]["filters"], 4);
    assert_eq!(rows[1]["filters"], Value::Null);
    assert_eq!(models[1]["max_depth"], model.len());
    assert_eq!(models[0]["encoder_len"], 4);
    assert_eq!(models[0]["max_depth"], 4);
}

#[tokio::test]
async fn empty_checkpoint_dir_is_an_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m");
    std::fs::create_dir(&ckpt).unwrap();
    let app = app_for(&ServiceConfig::new(&ckpt, dir.path().join("d")));
    let (status, _, body) = get(&app, "/api/models").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body), json!([]));
}

#[test]
fn missing_checkpoint_dir_fails_to_open() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig::new(dir.path().join("absent"), dir.path().join("d"));
    assert!(AppState::open(&cfg).is_err());
}

#[tokio::test]
async fn uploads_are_content_addressed() {
    let f = fixture();
    let png = sample_png(3);
    let (status, first) = upload(&f.app, png.clone()).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(first["width"], 24);
    assert_eq!(first["height"], 20);
    let (status, second) = upload(&f.app, png).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["image_id"], second["image_id"]);

    let (_, other) = upload(&f.app, sample_png(5)).await;
    assert_ne!(first["image_id"], other["image_id"]);
}

#[tokio::test]
async fn multipart_upload_matches_raw_upload() {
    let f = fixture();
    let png = sample_png(7);
    let boundary = "XBOUNDARYX";
    let mut body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"a.png\"\r\nContent-Type: image/png\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(&png);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let req = Request::post("/api/images")
        .header(
            header::CONTENT_TYPE,
            format!("multipart/form-data; boundary={boundary}"),
        )
        .body(Body::from(body))
        .unwrap();
    let (status, _, bytes) = send(&f.app, req).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, raw) = upload(&f.app, png).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&bytes)["image_id"], raw["image_id"]);
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let f = fixture_with(4096);
    let (status, body) = upload(&f.app, b"just some text, not an image".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "bad_request");

    let (status, _) = upload(&f.app, Vec::new()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = upload(&f.app, vec![0u8; 5000]).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(body["code"], "payload_too_large");
    assert_eq!(body["details"]["limit"], 4096);
}

async fn lens_grid(app: &Router, model: &str, image: &Value, depth: usize) -> (StatusCode, Value) {
    post_json(
        app,
        "/api/lens",
        json!({"model_id": model, "image_id": image, "depth": depth}),
    )
    .await
}

#[tokio::test]
async fn lens_depth_sweep_gives_distinct_grids() {
    let f = fixture();
    let (_, up) = upload(&f.app, sample_png(9)).await;
    let image = &up["image_id"];
    let mut grids = Vec::new();
    for depth in 1..=4 {
        let (status, res) = lens_grid(&f.app, "cae", image, depth).await;
        assert_eq!(status, StatusCode::OK, "{res}");
        assert_eq!(res["layer"], depth - 1);
        let (status, ct, png) =
            get(&f.app, &format!("/api/artifacts/{}", res["grid_artifact"].as_str().unwrap())).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(ct.as_deref(), Some("image/png"));
        let img = image::load_from_memory(&png).unwrap();
        let (cols, rows, gutter) = (
            res["cols"].as_u64().unwrap() as u32,
            res["rows"].as_u64().unwrap() as u32,
            res["gutter"].as_u64().unwrap() as u32,
        );
        let tw = res["tile_width"].as_u64().unwrap() as u32;
        let th = res["tile_height"].as_u64().unwrap() as u32;
        assert_eq!(img.width(), cols * tw + (cols - 1) * gutter);
        assert_eq!(img.height(), rows * th + (rows - 1) * gutter);
        assert_eq!(res["tiles"].as_array().unwrap().len(), 4);
        let (_, ct, _) =
            get(&f.app, &format!("/api/artifacts/{}", res["csv_artifact"].as_str().unwrap())).await;
        assert!(ct.unwrap().starts_with("text/csv"));
        grids.push(png);
    }
    for i in 0..grids.len() {
        for j in i + 1..grids.len() {
            assert_ne!(grids[i], grids[j], "depths {} and {} rendered the same grid", i + 1, j + 1);
        }
    }
}

#[tokio::test]
async fn lens_rejects_bad_depth_with_range() {
    let f = fixture();
    let (_, up) = upload(&f.app, sample_png(9)).await;
    for depth in [0, 5, 99] {
        let (status, res) = lens_grid(&f.app, "cae", &up["image_id"], depth).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(res["code"], "invalid_depth");
        assert_eq!(res["details"]["min"], 1);
        assert_eq!(res["details"]["max"], 4);
        let msg = res["message"].as_str().unwrap();
        assert!(msg.contains('1') && msg.contains('4'), "{msg}");
    }
    let (status, res) = lens_grid(&f.app, "missing", &up["image_id"], 1).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(res["details"]["kind"], "model");
    let (status, res) = lens_grid(&f.app, "cae", &json!("0".repeat(64)), 1).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(res["details"]["kind"], "image");
}

#[tokio::test]
async fn lens_is_pure_across_requests_restarts_and_concurrency() {
    let f = fixture();
    let (_, up) = upload(&f.app, sample_png(11)).await;
    let (_, a) = lens_grid(&f.app, "cls", &up["image_id"], 3).await;
    let (_, b) = lens_grid(&f.app, "cls", &up["image_id"], 3).await;
    assert_eq!(a, b);

    // A fresh server over the same directories sees the same bytes.
    let restarted = app_for(&f.cfg);
    let (status, c) = lens_grid(&restarted, "cls", &up["image_id"], 3).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a, c);

    let tasks: Vec<_> = (0..6)
        .map(|_| {
            let app = f.app.clone();
            let id = up["image_id"].clone();
            tokio::spawn(async move { lens_grid(&app, "cls", &id, 3).await.1 })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), a);
    }
}

#[tokio::test]
async fn filter_job_lifecycle() {
    let f = fixture();
    let request = json!({"model_id": "cls", "layer": 2, "filter": 1, "steps": 8, "seed": 5});
    let (status, job) = post_json(&f.app, "/api/filters", request.clone()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(job["kind"], "filter");
    assert!(matches!(job["state"].as_str(), Some("queued" | "running")));
    assert_eq!(job["request"]["steps"], 8);
    let id = job["id"].as_str().unwrap().to_string();

    let done = wait_for_job(&f.app, &id).await;
    assert_eq!(done["state"], "done", "{done}");
    assert!(done["error"].is_null());
    // Polling a finished job is idempotent.
    let (_, _, again) = get(&f.app, &format!("/api/jobs/{id}")).await;
    assert_eq!(json_of(&again), done);

    let png_id = done["artifacts"]["png"].as_str().unwrap();
    let (status, ct, png) = get(&f.app, &format!("/api/artifacts/{png_id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("image/png"));
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));

    let (_, _, csv) = get(
        &f.app,
        &format!("/api/artifacts/{}", done["artifacts"]["csv"].as_str().unwrap()),
    )
    .await;
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with(nanolens::viz::CSV_HEADER));
    assert_eq!(csv.lines().count(), 2);

    // Same request, same seed: a new job with identical artifacts.
    let (_, second) = post_json(&f.app, "/api/filters", request).await;
    assert_ne!(second["id"], job["id"]);
    let second = wait_for_job(&f.app, second["id"].as_str().unwrap()).await;
    assert_eq!(second["artifacts"], done["artifacts"]);
}

#[tokio::test]
async fn atlas_job_covers_every_filter() {
    let f = fixture();
    let (status, job) = post_json(
        &f.app,
        "/api/filters",
        json!({"model_id": "cae", "layer": 0, "steps": 4}),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(job["kind"], "atlas");
    let done = wait_for_job(&f.app, job["id"].as_str().unwrap()).await;
    assert_eq!(done["state"], "done", "{done}");
    let (_, _, csv) = get(
        &f.app,
        &format!("/api/artifacts/{}", done["artifacts"]["csv"].as_str().unwrap()),
    )
    .await;
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 4);
}

#[tokio::test]
async fn filter_requests_are_validated_up_front() {
    let f = fixture();
    let cases = [
        (json!({"model_id": "nope", "layer": 0}), StatusCode::NOT_FOUND, "not_found"),
        (json!({"model_id": "cls", "layer": 1}), StatusCode::UNPROCESSABLE_ENTITY, "not_conv_layer"),
        (json!({"model_id": "cls", "layer": 0, "filter": 4}), StatusCode::UNPROCESSABLE_ENTITY, "invalid_filter"),
        (json!({"model_id": "cls", "layer": 0, "steps": 0}), StatusCode::UNPROCESSABLE_ENTITY, "invalid_config"),
    ];
    for (req, status, code) in cases {
        let (got, body) = post_json(&f.app, "/api/filters", req.clone()).await;
        assert_eq!(got, status, "{req}");
        assert_eq!(body["code"], code, "{req}");
    }
    let (status, _, _) = get(&f.app, "/api/jobs/job-999999").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = get(&f.app, "/api/artifacts/not-an-id").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
