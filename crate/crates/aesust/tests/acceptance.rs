//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The desk training goes through the real CLI.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use aesust::persist;
use aesust::selfcheck::{self, parse_metrics};
use aesust_core::losses::Stage;
use aesust_core::suite::{self, Check};

fn all(name: &'static str, checks: Vec<Check>) -> Check {
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks
        .iter()
        .map(|c| format!("{}{}: {}", if c.passed { "" } else { "FAILED " }, c.name, c.detail))
        .collect::<Vec<_>>()
        .join("; ");
    Check { name, passed, detail }
}

fn fail(name: &'static str, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed: false,
        detail: detail.into(),
    }
}

fn aesust(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_aesust"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if out.status.success() {
        Ok(stdout)
    } else {
        Err(format!("{args:?} exited {:?}: {}{}", out.status.code(), stdout, String::from_utf8_lossy(&out.stderr)))
    }
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let mut checks = vec![
        suite::gradient_aessa(),
        suite::gradient_discriminator(),
        suite::gradient_losses(),
        suite::gradient_decoder(),
    ];
    let secs = t.elapsed().as_secs_f64();
    checks.push(Check {
        name: "runtime",
        passed: secs < 60.0,
        detail: format!("{secs:.1} s"),
    });
    all("gradient suite", checks)
}

/// 500 stage-I then 500 stage-II steps on an 8+8 synthetic corpus through
/// `aesust train` with the desk config.
fn desk_training(dir: &Path) -> Check {
    let name = "desk-scale training";
    let conf = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.conf");
    let corpus = dir.join("corpus");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    if let Err(e) = aesust(&["synth-corpus", "--out", &p(&corpus), "--content", "8", "--style", "8"]) {
        return fail(name, e);
    }
    let (c, s) = (p(&corpus.join("content")), p(&corpus.join("style")));
    let (s1, s2) = (dir.join("stage1.aesu"), dir.join("stage2.aesu"));
    let start = Instant::now();
    let r1 = aesust(&["train", "--stage", "1", "--config", conf, "--content-dir", &c, "--style-dir", &s, "--out", &p(&s1)]);
    if let Err(e) = r1 {
        return fail(name, e);
    }
    let r2 = aesust(&[
        "train", "--stage", "2", "--config", conf, "--content-dir", &c, "--style-dir", &s, "--out", &p(&s2), "--resume",
        &p(&s1),
    ]);
    let elapsed = start.elapsed();
    let read = |x: &Path| std::fs::read_to_string(x).map_err(|e| e.to_string()).and_then(|t| parse_metrics(&t));
    let (m1, m2) = match (read(&dir.join("stage1.aesu.metrics.log")), read(&dir.join("stage2.aesu.metrics.log"))) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return fail(name, e),
    };
    let mut outcome = match selfcheck::desk_outcome(&m1, &m2, elapsed) {
        Ok(o) => o,
        Err(e) => return fail(name, e),
    };
    if let (Err(e), None) = (&r2, &outcome.stage2_first_non_finite) {
        outcome.stage2_first_non_finite = Some((m2.len() as u64 + 1, e.clone()));
    }
    let mut checks = outcome.checks(500, 500);
    checks.push(match persist::load_model(&s2) {
        Ok((m, step)) if m.stage == Stage::Finetune && step == 500 => Check {
            name: "archive",
            passed: true,
            detail: "stage-II archive loads at step 500".into(),
        },
        Ok((m, step)) => fail("archive", format!("stage {} step {step}", m.stage.number())),
        Err(e) => fail("archive", e.to_string()),
    });
    all(name, checks)
}

fn selfcheck_exits_zero() -> Check {
    let t = Instant::now();
    match aesust(&["selfcheck"]) {
        Ok(out) => {
            let rows = out.lines().filter(|l| l.starts_with("PASS")).count();
            Check {
                name: "aesust selfcheck",
                passed: true,
                detail: format!("exit 0, {rows} checks passed in {:.1} s", t.elapsed().as_secs_f64()),
            }
        }
        Err(e) => fail("aesust selfcheck", e),
    }
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("scratch directory");
    let criteria: Vec<Criterion> = vec![
        ("attention stochasticity", Box::new(suite::attention_stochasticity)),
        ("oracle equivalence", Box::new(suite::oracle_equivalence)),
        ("gradient suite", Box::new(gradient_suite)),
        ("residual identities", Box::new(suite::residual_identities)),
        ("multi-scale aesthetic features", Box::new(suite::multiscale_features)),
        ("loss sanity", Box::new(suite::loss_sanity)),
        ("stage gating", Box::new(suite::stage_gating)),
        ("desk-scale training", Box::new(|| desk_training(dir.path()))),
        ("controls algebra", Box::new(suite::controls_algebra)),
        (
            "persistence",
            Box::new(|| all("persistence", vec![suite::archive_fuzz(1000), suite::resume_by_name()])),
        ),
        ("selfcheck exit status", Box::new(selfcheck_exits_zero)),
    ];
    let mut failed = 0;
    for (label, run) in &criteria {
        let t = Instant::now();
        let c = run();
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status}  {label:<32} {:>7.1}s  {}", t.elapsed().as_secs_f64(), c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
