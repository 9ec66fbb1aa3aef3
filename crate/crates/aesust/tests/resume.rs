use std::path::Path;

use aesust::persist;
use aesust::synth;
use aesust::training::{self, TrainError, TrainJob};
use aesust_core::losses::Stage;
use aesust_core::train::TrainConfig;

fn job(dir: &Path, stage: Stage, iterations: u64, out: &str, resume: Option<&str>) -> TrainJob {
    TrainJob {
        cfg: TrainConfig {
            stage,
            iterations,
            batch_size: 1,
            channel_multiplier: 1.0 / 16.0,
            resize_smaller_edge: 64,
            checkpoint_every: 100,
            save_optimizer_state: true,
            seed: 9,
            ..TrainConfig::desk()
        },
        content_dir: dir.join("content"),
        style_dir: dir.join("style"),
        out: dir.join(out),
        resume: resume.map(|r| dir.join(r)),
        metrics: None,
    }
}

#[test]
fn split_run_with_optimizer_state_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth::write_corpus(d, 2, 2, 72, 1).unwrap();
    training::train(&job(d, Stage::Pretrain, 4, "straight.aesu", None), |_| {}).unwrap();
    training::train(&job(d, Stage::Pretrain, 2, "half.aesu", None), |_| {}).unwrap();
    let resumed = training::train(&job(d, Stage::Pretrain, 4, "resumed.aesu", Some("half.aesu")), |_| {}).unwrap();
    assert_eq!((resumed.start_step, resumed.final_step), (2, 4));
    let a = std::fs::read(d.join("straight.aesu")).unwrap();
    let b = std::fs::read(d.join("resumed.aesu")).unwrap();
    assert!(a == b, "resumed archive differs from the straight run");
    // The resumed log continues the first one.
    let log = std::fs::read_to_string(d.join("resumed.aesu.metrics.log")).unwrap();
    assert!(log.lines().all(|l| l.starts_with("3 ") || l.starts_with("4 ")), "{log}");
}

#[test]
fn stage_two_starts_from_stage_one_weights_at_step_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth::write_corpus(d, 2, 2, 72, 2).unwrap();
    training::train(&job(d, Stage::Pretrain, 2, "s1.aesu", None), |_| {}).unwrap();
    let t = training::make_trainer(&job(d, Stage::Finetune, 3, "s2.aesu", Some("s1.aesu"))).unwrap();
    let (m1, _) = persist::load_model(&d.join("s1.aesu")).unwrap();
    assert_eq!(t.step, 0);
    assert_eq!(t.model.stage, Stage::Finetune);
    assert_eq!(t.model.aessa.params.to_entries(), m1.aessa.params.to_entries());
    assert_eq!(t.model.decoder.params.to_entries(), m1.decoder.params.to_entries());
    assert_eq!(t.model.discriminator.params.to_entries(), m1.discriminator.params.to_entries());
}

#[test]
fn bad_resumes_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth::write_corpus(d, 1, 1, 72, 3).unwrap();
    assert!(matches!(
        training::make_trainer(&job(d, Stage::Finetune, 1, "x.aesu", None)),
        Err(TrainError::MissingStageOneCheckpoint)
    ));
    training::train(&job(d, Stage::Pretrain, 1, "s1.aesu", None), |_| {}).unwrap();
    training::train(&job(d, Stage::Finetune, 1, "s2.aesu", Some("s1.aesu")), |_| {}).unwrap();
    let Err(err) = training::make_trainer(&job(d, Stage::Pretrain, 2, "y.aesu", Some("s2.aesu"))) else {
        panic!("stage-2 checkpoint accepted for stage 1");
    };
    assert!(matches!(err, TrainError::StageMismatch { found: 2, stage: 1, .. }), "{err}");
    let mut wide = job(d, Stage::Pretrain, 2, "z.aesu", Some("s1.aesu"));
    wide.cfg.channel_multiplier = 0.125;
    assert!(matches!(training::make_trainer(&wide), Err(TrainError::WidthMismatch { .. })));
    std::fs::write(d.join("junk.aesu"), b"AESU1 not really").unwrap();
    assert!(training::make_trainer(&job(d, Stage::Pretrain, 2, "j.aesu", Some("junk.aesu"))).is_err());
}
