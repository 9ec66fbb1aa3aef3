use std::time::Instant;

use aesust_core::suite::{self, Check};

fn assert_check(f: fn() -> Check) {
    let t = Instant::now();
    let c = f();
    eprintln!("{}: {} ({:.1?})", c.name, c.detail, t.elapsed());
    assert!(c.passed, "{}: {}", c.name, c.detail);
}

#[test]
fn attention_rows_are_distributions() {
    assert_check(suite::attention_stochasticity);
}

#[test]
fn attention_matches_loops() {
    assert_check(suite::oracle_equivalence);
}

#[test]
fn residual_identities() {
    assert_check(suite::residual_identities);
}

#[test]
fn aessa_gradients() {
    assert_check(suite::gradient_aessa);
}

#[test]
fn decoder_gradients() {
    assert_check(suite::gradient_decoder);
}

#[test]
fn discriminator_gradients() {
    assert_check(suite::gradient_discriminator);
}

#[test]
fn loss_gradients() {
    assert_check(suite::gradient_losses);
}

#[test]
fn multiscale_features() {
    assert_check(suite::multiscale_features);
}

#[test]
fn loss_sanity() {
    assert_check(suite::loss_sanity);
}

#[test]
fn stage_gating() {
    assert_check(suite::stage_gating);
}

#[test]
fn trainer_invariants() {
    assert_check(suite::trainer_invariants);
}

#[test]
fn controls_algebra() {
    assert_check(suite::controls_algebra);
}

#[test]
fn archive_round_trip() {
    assert_check(|| suite::archive_fuzz(1000));
}

#[test]
fn resume_by_name() {
    assert_check(suite::resume_by_name);
}
