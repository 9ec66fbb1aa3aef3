mod common;

use std::path::Path;
use std::process::{Command, Output};

use aesust::imageio;
use aesust::persist;
use aesust::service::{router, AppState};
use aesust::request::Limits;
use aesust_core::controls::{self, RegionMaskSet};
use aesust_core::losses::Stage;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::*;
use tower::ServiceExt;

fn aesust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aesust"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_conf(dir: &Path, iterations: u64) -> std::path::PathBuf {
    let path = dir.join("tiny.conf");
    std::fs::write(
        &path,
        format!(
            "# tiny\nlr = 5e-4\nbatch_size = 1\niterations = {iterations}\nresize_smaller_edge = 64\ncrop = 64\n\
             channel_multiplier = 0.0625\ncheckpoint_every = 2\nsave_optimizer_state = true\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn stage_two_without_resume_is_a_usage_error() {
    let out = aesust(&[
        "train", "--stage", "2", "--config", "x.conf", "--content-dir", "c", "--style-dir", "s", "--out", "o.aesu",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("--resume"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "lr = 1e-4\nlearning_rate = 3\n").unwrap();
    let out = aesust(&[
        "train", "--stage", "1", "--config", p(&conf), "--content-dir", "c", "--style-dir", "s", "--out", "o.aesu",
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("learning_rate") && err.contains("line 2"), "{err}");
}

#[test]
fn weights_off_the_simplex_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = write_checkpoint(dir.path(), &model(false));
    let c = dir.path().join("c.png");
    let s1 = dir.path().join("s1.png");
    let s2 = dir.path().join("s2.png");
    std::fs::write(&c, content_png(64)).unwrap();
    std::fs::write(&s1, style_png(1, 64)).unwrap();
    std::fs::write(&s2, style_png(2, 64)).unwrap();
    let out_png = dir.path().join("out.png");
    let out = aesust(&[
        "stylize", "--checkpoint", p(&ckpt), "--content", p(&c), "--style", p(&s1), "--style", p(&s2),
        "--weights", "0.6,0.3", "--out", p(&out_png),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("sum"), "{}", stderr(&out));
    assert!(!out_png.exists());
}

async fn service_bytes(ckpt: &Path, fields: &[(&str, Vec<u8>)]) -> (StatusCode, Vec<u8>) {
    let (model, _) = persist::load_model(ckpt).unwrap();
    let app = router(std::sync::Arc::new(AppState::new(model, "model.aesu", Limits::default(), 2)), 1 << 24);
    let req = Request::post("/api/stylize")
        .header("content-type", content_type())
        .body(Body::from(multipart(fields)))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

#[tokio::test]
async fn cli_and_service_bytes_match() {
    let dir = tempfile::tempdir().unwrap();
    for stage2 in [false, true] {
        let ckpt = write_checkpoint(dir.path(), &model(stage2));
        let c = dir.path().join("c.png");
        let s = dir.path().join("s.png");
        // 72 is not a multiple of 16, so both paths must crop identically.
        std::fs::write(&c, content_png(72)).unwrap();
        std::fs::write(&s, style_png(3, 64)).unwrap();
        let out_png = dir.path().join("out.png");
        let out = aesust(&[
            "stylize", "--checkpoint", p(&ckpt), "--content", p(&c), "--style", p(&s), "--alpha", "1.0",
            "--out", p(&out_png),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let cli = std::fs::read(&out_png).unwrap();
        let (status, svc) = service_bytes(
            &ckpt,
            &[("content", content_png(72)), ("style", style_png(3, 64)), ("alpha", b"1.0".to_vec())],
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(cli, svc, "stage2={stage2}");
    }
}

#[test]
fn two_styles_with_masks_route_to_spatial_control() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(false);
    write_checkpoint(dir.path(), &m);
    let files = [("c.png", content_png(64)), ("s1.png", style_png(1, 64)), ("s2.png", style_png(2, 64))];
    for (n, b) in &files {
        std::fs::write(dir.path().join(n), b).unwrap();
    }
    let (left, right) = halves(64);
    std::fs::write(dir.path().join("m1.png"), &left).unwrap();
    std::fs::write(dir.path().join("m2.png"), &right).unwrap();
    let d = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let out_png = d("out.png");
    let out = aesust(&[
        "stylize", "--checkpoint", &d("model.aesu"), "--content", &d("c.png"), "--style", &d("s1.png"), "--style",
        &d("s2.png"), "--mask", &d("m1.png"), "--mask", &d("m2.png"), "--out", &out_png,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let content = imageio::decode_image(&files[0].1).unwrap();
    let styles = [imageio::decode_image(&files[1].1).unwrap(), imageio::decode_image(&files[2].1).unwrap()];
    let masks = RegionMaskSet::new(vec![
        imageio::decode_mask(&left, 64, 64).unwrap(),
        imageio::decode_mask(&right, 64, 64).unwrap(),
    ])
    .unwrap();
    let want = controls::spatial_stylize(&m, &content, &styles, &masks).unwrap();
    assert_eq!(std::fs::read(&out_png).unwrap(), imageio::encode_image(&want));
    // The fed-to-decoder feature really depends on the mask layout (an
    // untrained decoder maps nearly everything to one flat image).
    let swapped = RegionMaskSet::new(vec![masks.masks()[1].clone(), masks.masks()[0].clone()]).unwrap();
    let feature = |masks| {
        let ctl = controls::Controls {
            masks: Some(masks),
            ..Default::default()
        };
        controls::controlled_feature(&m, &content, &styles, &ctl).unwrap()
    };
    assert!(feature(swapped).max_abs_diff(&feature(masks)) > 1e-3);
}

#[test]
fn train_writes_loadable_archives_and_stage_two_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = aesust(&["synth-corpus", "--out", p(&corpus), "--content", "2", "--style", "2", "--size", "72"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let conf = tiny_conf(dir.path(), 3);
    let s1 = dir.path().join("s1.aesu");
    let c = corpus.join("content");
    let s = corpus.join("style");
    let out = aesust(&[
        "train", "--stage", "1", "--config", p(&conf), "--content-dir", p(&c), "--style-dir", p(&s), "--out", p(&s1),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (m1, step) = persist::load_model(&s1).unwrap();
    assert_eq!((m1.stage, step), (Stage::Pretrain, 3));
    assert!(dir.path().join("s1.aesu.step2").exists());
    let log = std::fs::read_to_string(dir.path().join("s1.aesu.metrics.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("3 total ")), "{log}");

    let s2 = dir.path().join("s2.aesu");
    let out = aesust(&[
        "train", "--stage", "2", "--config", p(&conf), "--content-dir", p(&c), "--style-dir", p(&s), "--out", p(&s2),
        "--resume", p(&s1),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (m2, step) = persist::load_model(&s2).unwrap();
    assert_eq!((m2.stage, step), (Stage::Finetune, 3));
    // The encoder is frozen, so it carries over untouched.
    assert_eq!(m1.encoder.params().to_entries(), m2.encoder.params().to_entries());
}
