//! `aesust selfcheck`: the core verification suite plus checks of the std
//! side (codecs, the request path, a short train/resume round trip), printed
//! as a table. `--full` adds the desk-scale training run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use aesust_core::controls;
use aesust_core::losses::Stage;
use aesust_core::suite::{self, Check};
use aesust_core::train::TrainConfig;
use aesust_core::{AesUst, ChannelScale, Tensor};

use crate::imageio;
use crate::request::{self, Limits, StylizeRequest};
use crate::synth;
use crate::training::{self, TrainJob};

/// Steps averaged at each end of a loss curve.
pub const CURVE_WINDOW: usize = 20;
/// Required drop of the stage-I objective.
pub const REQUIRED_DROP: f64 = 0.5;
pub const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);
pub const FAST_BUDGET: Duration = Duration::from_secs(60);

/// `step -> term -> value` from a metrics log.
pub type Metrics = BTreeMap<u64, BTreeMap<String, f64>>;

pub fn parse_metrics(text: &str) -> Result<Metrics, String> {
    let mut out = Metrics::new();
    for (i, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [step, name, value] = parts[..] else {
            return Err(format!("metrics line {}: expected `step term value`", i + 1));
        };
        let step = step.parse().map_err(|_| format!("metrics line {}: bad step", i + 1))?;
        // "NaN" and "inf" parse, so non-finite values survive to the checks.
        let value = value.parse().map_err(|_| format!("metrics line {}: bad value", i + 1))?;
        out.entry(step).or_default().insert(name.to_string(), value);
    }
    Ok(out)
}

pub fn series(m: &Metrics, term: &str) -> Vec<f64> {
    m.values().filter_map(|t| t.get(term).copied()).collect()
}

/// Mean of the first and of the last `window` values.
pub fn curve_ends(xs: &[f64], window: usize) -> Option<(f64, f64)> {
    if xs.len() < 2 * window || window == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&xs[..window]), mean(&xs[xs.len() - window..])))
}

#[derive(Debug, Clone)]
pub struct DeskOutcome {
    pub total: (f64, f64),
    pub identity_mse: (f64, f64),
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage2_first_non_finite: Option<(u64, String)>,
    pub elapsed: Duration,
}

impl DeskOutcome {
    pub fn total_drop(&self) -> f64 {
        1.0 - self.total.1 / self.total.0
    }

    pub fn checks(&self, want1: usize, want2: usize) -> Vec<Check> {
        let drop = self.total_drop();
        vec![
            Check {
                name: "desk stage-I objective drop",
                passed: self.stage1_steps == want1 && drop >= REQUIRED_DROP,
                detail: format!(
                    "{} stage-I steps; total {:.4} -> {:.4} ({:.1}% drop, need {:.0}%)",
                    self.stage1_steps,
                    self.total.0,
                    self.total.1,
                    100.0 * drop,
                    100.0 * REQUIRED_DROP
                ),
            },
            Check {
                name: "desk identity mse drop",
                passed: self.identity_mse.1 < self.identity_mse.0,
                detail: format!("identity mse {:.5} -> {:.5}", self.identity_mse.0, self.identity_mse.1),
            },
            Check {
                name: "desk stage-II finite losses",
                passed: self.stage2_steps == want2 && self.stage2_first_non_finite.is_none(),
                detail: match &self.stage2_first_non_finite {
                    None => format!("{} stage-II steps, all losses finite", self.stage2_steps),
                    Some((s, t)) => format!("{t} not finite at step {s}"),
                },
            },
            Check {
                name: "desk training wall time",
                passed: self.elapsed < DESK_BUDGET,
                detail: format!("{:.1} s of {} s", self.elapsed.as_secs_f64(), DESK_BUDGET.as_secs()),
            },
        ]
    }
}

/// Summarizes the two metrics logs of a desk run.
pub fn desk_outcome(stage1: &Metrics, stage2: &Metrics, elapsed: Duration) -> Result<DeskOutcome, String> {
    let total = series(stage1, "total");
    let mse = series(stage1, "identity_mse");
    let short = || format!("stage-I log has {} steps; need {}", total.len(), 2 * CURVE_WINDOW);
    let stage2_first_non_finite = stage2
        .iter()
        .find_map(|(s, t)| t.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| (*s, n.clone())));
    Ok(DeskOutcome {
        total: curve_ends(&total, CURVE_WINDOW).ok_or_else(short)?,
        identity_mse: curve_ends(&mse, CURVE_WINDOW).ok_or_else(short)?,
        stage1_steps: total.len(),
        stage2_steps: stage2.len(),
        stage2_first_non_finite,
        elapsed,
    })
}

/// The desk profile: 1/8 widths, 64² crops, batch 2.
pub fn desk_config(stage: Stage, iterations: u64) -> TrainConfig {
    TrainConfig {
        stage,
        iterations,
        checkpoint_every: iterations.max(1),
        ..TrainConfig::desk()
    }
}

/// Stage I then stage II (resumed from the stage-I archive) on an 8+8
/// synthetic corpus under `dir`.
pub fn desk_training(dir: &Path, steps1: u64, steps2: u64) -> Result<DeskOutcome, String> {
    let (content, style) = synth::write_corpus(dir, 8, 8, synth::DEFAULT_SIZE, 7).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let job1 = TrainJob {
        cfg: desk_config(Stage::Pretrain, steps1),
        content_dir: content.clone(),
        style_dir: style.clone(),
        out: dir.join("stage1.aesu"),
        resume: None,
        metrics: None,
    };
    training::train(&job1, |_| {}).map_err(|e| e.to_string())?;
    let job2 = TrainJob {
        cfg: desk_config(Stage::Finetune, steps2),
        resume: Some(job1.out.clone()),
        out: dir.join("stage2.aesu"),
        ..job1.clone()
    };
    // A non-finite stage-II loss aborts training; the log still records it.
    let stage2_result = training::train(&job2, |_| {});
    let elapsed = start.elapsed();
    let read = |p: PathBuf| std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()));
    let m1 = parse_metrics(&read(job1.metrics_path())?)?;
    let m2 = parse_metrics(&read(job2.metrics_path())?)?;
    let mut outcome = desk_outcome(&m1, &m2, elapsed)?;
    if let (Err(e), None) = (&stage2_result, &outcome.stage2_first_non_finite) {
        outcome.stage2_first_non_finite = Some((m2.len() as u64 + 1, e.to_string()));
    }
    Ok(outcome)
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    match f() {
        Ok(detail) => Check { name, passed: true, detail },
        Err(detail) => Check { name, passed: false, detail },
    }
}

fn image_codec() -> Check {
    check("image codec round trip", || {
        let t = Tensor::from_fn(&[1, 3, 9, 11], |i| ((i * 53) % 97) as f32 / 96.0);
        let back = imageio::decode_image(&imageio::encode_image(&t)).map_err(|e| e.to_string())?;
        let err = back.max_abs_diff(&t);
        if err > 0.5 / 255.0 + 1e-6 {
            return Err(format!("round-trip error {err}"));
        }
        Ok(format!("round-trip error {err:.2e}"))
    })
}

/// The CLI/service request path yields the bytes of the plain forward pass.
fn request_path() -> Check {
    check("request path bytes", || {
        let model = AesUst::<f32>::new(ChannelScale(0.125), 11);
        let c = synth::content_image(1, 64);
        let s = synth::style_image(2, 64);
        let png = |img: &image::RgbImage| imageio::encode_image(&imageio::rgb_to_tensor(img));
        let req = StylizeRequest {
            content: png(&c),
            styles: vec![png(&s)],
            ..Default::default()
        };
        let got = request::run_request(&model, &req, &Limits::default()).map_err(|e| e.to_string())?;
        let direct = model
            .generator_forward(&imageio::rgb_to_tensor(&c), &imageio::rgb_to_tensor(&s))
            .map_err(|e| e.to_string())?;
        if got != imageio::encode_image(&direct) {
            return Err("request bytes differ from the plain forward pass".into());
        }
        let via_controls = controls::stylize(&model, &imageio::rgb_to_tensor(&c), &imageio::rgb_to_tensor(&s), 1.0)
            .map_err(|e| e.to_string())?;
        if via_controls != direct {
            return Err("stylize(alpha=1) differs from the plain forward pass".into());
        }
        Ok(format!("{} PNG bytes, identical", got.len()))
    })
}

/// A few steps of each stage through the file-based driver, including a
/// stage-II resume from the stage-I archive.
fn training_smoke(dir: &Path) -> Check {
    check("train and resume smoke", || {
        let (content, style) = synth::write_corpus(dir, 2, 2, 80, 3).map_err(|e| e.to_string())?;
        let small = |stage, iterations| TrainConfig {
            batch_size: 1,
            channel_multiplier: 1.0 / 16.0,
            ..desk_config(stage, iterations)
        };
        let job1 = TrainJob {
            cfg: small(Stage::Pretrain, 4),
            content_dir: content,
            style_dir: style,
            out: dir.join("smoke1.aesu"),
            resume: None,
            metrics: None,
        };
        let s1 = training::train(&job1, |_| {}).map_err(|e| e.to_string())?;
        let job2 = TrainJob {
            cfg: small(Stage::Finetune, 2),
            resume: Some(job1.out.clone()),
            out: dir.join("smoke2.aesu"),
            ..job1.clone()
        };
        let s2 = training::train(&job2, |_| {}).map_err(|e| e.to_string())?;
        let reports = s1.reports.iter().chain(&s2.reports);
        if let Some((r, t)) = reports.clone().find_map(|r| r.first_non_finite().map(|t| (r, t))) {
            return Err(format!("{t} not finite at stage {} step {}", r.stage.number(), r.step));
        }
        let (model, step) = crate::persist::load_model(&job2.out).map_err(|e| e.to_string())?;
        if model.stage != Stage::Finetune || step != 2 {
            return Err(format!("reloaded stage {} step {step}", model.stage.number()));
        }
        Ok(format!("{} + {} steps, archive reloads", s1.reports.len(), s2.reports.len()))
    })
}

pub fn print_row(out: &mut impl Write, c: &Check, secs: f64) -> std::io::Result<()> {
    let status = if c.passed { "PASS" } else { "FAIL" };
    writeln!(out, "{status}  {:<38} {secs:>7.2}s  {}", c.name, c.detail)
}

/// Runs everything, printing one row per check. True when all pass.
pub fn run<W: Write>(full: bool, workdir: Option<&Path>, out: &mut W) -> std::io::Result<bool> {
    let tmp;
    let dir = match workdir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.to_path_buf()
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let start = Instant::now();
    let mut all = true;
    let mut emit = |out: &mut W, checks: Vec<Check>, t: Instant| -> std::io::Result<()> {
        let secs = t.elapsed().as_secs_f64() / checks.len().max(1) as f64;
        for c in &checks {
            all &= c.passed;
            print_row(out, c, secs)?;
        }
        out.flush()
    };
    let core: [fn() -> Check; 14] = [
        suite::attention_stochasticity,
        suite::oracle_equivalence,
        suite::residual_identities,
        suite::gradient_aessa,
        suite::gradient_decoder,
        suite::gradient_discriminator,
        suite::gradient_losses,
        suite::multiscale_features,
        suite::loss_sanity,
        suite::stage_gating,
        suite::trainer_invariants,
        suite::controls_algebra,
        || suite::archive_fuzz(1000),
        suite::resume_by_name,
    ];
    for f in core {
        let t = Instant::now();
        emit(out, vec![f()], t)?;
    }
    let t = Instant::now();
    emit(out, vec![image_codec()], t)?;
    let t = Instant::now();
    emit(out, vec![request_path()], t)?;
    let t = Instant::now();
    emit(out, vec![training_smoke(&dir.join("smoke"))], t)?;
    let fast = start.elapsed();
    let budget = Check {
        name: "fast suite wall time",
        passed: fast < FAST_BUDGET,
        detail: format!("{:.1} s of {} s", fast.as_secs_f64(), FAST_BUDGET.as_secs()),
    };
    emit(out, vec![budget], Instant::now())?;
    if full {
        let t = Instant::now();
        let checks = match desk_training(&dir.join("desk"), 500, 500) {
            Ok(o) => o.checks(500, 500),
            Err(e) => vec![Check {
                name: "desk training",
                passed: false,
                detail: e,
            }],
        };
        emit(out, checks, t)?;
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_parse_and_curve_ends() {
        let m = parse_metrics("1 total 4\n1 identity_mse 0.5\n2 total 2\n3 total NaN\n").unwrap();
        assert_eq!(series(&m, "total").len(), 3);
        assert!(series(&m, "total")[2].is_nan());
        assert!(parse_metrics("1 total\n").is_err());
        assert_eq!(curve_ends(&[4.0, 2.0, 1.0, 1.0], 2), Some((3.0, 1.0)));
        assert_eq!(curve_ends(&[1.0], 1), None);
    }
}
