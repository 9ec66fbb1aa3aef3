mod common;

use std::sync::Arc;

use aesust::imageio;
use aesust::request::Limits;
use aesust::service::{router, AppState};
use aesust_core::AesUst;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::*;
use tower::ServiceExt;

fn app(model: AesUst<f32>, body_limit: usize) -> Router {
    router(Arc::new(AppState::new(model, "desk.aesu", Limits::default(), 2)), body_limit)
}

async fn call(app: Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

fn post(fields: &[(&str, Vec<u8>)]) -> Request<Body> {
    Request::post("/api/stylize")
        .header("content-type", content_type())
        .body(Body::from(multipart(fields)))
        .unwrap()
}

fn json(body: &[u8]) -> serde_json::Value {
    serde_json::from_slice(body).unwrap()
}

#[tokio::test]
async fn health_names_the_checkpoint() {
    let (status, body) = call(app(model(false), 1 << 20), Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["checkpoint"], "desk.aesu");
    assert_eq!(v["widths"]["encoder"], serde_json::json!([8, 16, 32, 64, 64]));
    assert_eq!(v["widths"]["stage"], 1);
}

#[tokio::test]
async fn limits_are_reported() {
    let (status, body) = call(app(model(false), 1 << 20), Request::get("/api/limits").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body), serde_json::json!({"max_image_edge": 1024, "max_styles": 4}));
}

#[tokio::test]
async fn alpha_zero_returns_the_reconstruction_branch() {
    for stage2 in [false, true] {
        let m = model(stage2);
        let (status, body) = call(
            app(m.clone(), 1 << 22),
            post(&[("content", content_png(64)), ("style", style_png(1, 64)), ("alpha", b"0".to_vec())]),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        let c = imageio::decode_image(&content_png(64)).unwrap();
        let pc = m.encode(&c).unwrap();
        let fa = m.aesthetic(&c).unwrap();
        let recon = m.decode(&m.fuse(&pc, &pc, fa.as_ref()).unwrap()).unwrap();
        assert_eq!(body, imageio::encode_image(&recon), "stage2={stage2}");
        // And it differs from the fully stylized image.
        let styled = m.generator_forward(&c, &imageio::decode_image(&style_png(1, 64)).unwrap()).unwrap();
        assert_ne!(body, imageio::encode_image(&styled));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_requests_both_succeed() {
    let a = app(model(true), 1 << 22);
    let r1 = call(a.clone(), post(&[("content", content_png(64)), ("style", style_png(1, 64))]));
    let r2 = call(a.clone(), post(&[("content", content_png(64)), ("style", style_png(2, 64))]));
    let r3 = call(a.clone(), post(&[("content", content_png(64)), ("style", style_png(1, 64))]));
    let ((s1, b1), (s2, b2), (s3, b3)) = tokio::join!(r1, r2, r3);
    assert_eq!((s1, s2, s3), (StatusCode::OK, StatusCode::OK, StatusCode::OK));
    assert_ne!(b1, b2);
    // No state leaks between requests.
    assert_eq!(b1, b3);
}

#[tokio::test]
async fn validation_errors_are_400_json() {
    let a = app(model(false), 1 << 22);
    type Fields = Vec<(&'static str, Vec<u8>)>;
    let cases: Vec<(Fields, &str)> = vec![
        (
            vec![
                ("content", content_png(64)),
                ("style", style_png(1, 64)),
                ("style", style_png(2, 64)),
                ("weights", b"0.6,0.3".to_vec()),
            ],
            "sum",
        ),
        (vec![("content", content_png(64)), ("style", style_png(1, 64)), ("alpha", b"1.5".to_vec())], "alpha"),
        (vec![("content", content_png(64))], "style"),
        (vec![("style", style_png(1, 64))], "content"),
        (vec![("content", content_png(64)), ("style", b"GIF89a".to_vec())], "byte 0"),
        (vec![("content", content_png(64)), ("style", style_png(1, 64)), ("colour", b"1".to_vec())], "colour"),
        (
            vec![
                ("content", content_png(64)),
                ("style", style_png(1, 64)),
                ("style", style_png(2, 64)),
                ("mask", halves(64).0),
                ("mask", halves(64).0),
            ],
            "overlap",
        ),
    ];
    for (fields, needle) in cases {
        let (status, body) = call(a.clone(), post(&fields)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{needle}");
        let msg = json(&body)["error"].as_str().unwrap().to_string();
        assert!(msg.contains(needle), "{needle}: {msg}");
    }
}

#[tokio::test]
async fn stage_two_rejects_styles_below_discriminator_size() {
    let (status, body) = call(
        app(model(true), 1 << 22),
        post(&[("content", content_png(64)), ("style", style_png(1, 48))]),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(json(&body)["error"].as_str().unwrap().contains("at least 64"));
}

#[tokio::test]
async fn malformed_multipart_is_400() {
    let req = Request::post("/api/stylize")
        .header("content-type", content_type())
        .body(Body::from("--aesust-test-boundary\r\nnot a header\r\n"))
        .unwrap();
    let (status, _) = call(app(model(false), 1 << 20), req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_body_is_413() {
    let (status, _) = call(
        app(model(false), 4096),
        post(&[("content", content_png(64)), ("style", vec![0u8; 8192])]),
    )
    .await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn images_over_the_edge_limit_are_rejected() {
    let big = imageio::encode_image(&aesust_core::Tensor::full(&[1, 3, 16, 1040], 0.5f32));
    let (status, body) = call(app(model(false), 1 << 24), post(&[("content", big), ("style", style_png(1, 64))])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(json(&body)["error"].as_str().unwrap().contains("1024"));
}

#[test]
fn fixture_output_has_structure() {
    let m = model(false);
    let c = imageio::decode_image(&content_png(64)).unwrap();
    let s = imageio::decode_image(&style_png(1, 64)).unwrap();
    let out = m.generator_forward(&c, &s).unwrap();
    let lo = out.data().iter().cloned().fold(f32::MAX, f32::min);
    let hi = out.data().iter().cloned().fold(f32::MIN, f32::max);
    assert!(hi - lo > 0.2, "output range {lo}..{hi}");
}
