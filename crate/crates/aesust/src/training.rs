//! The training driver: data, steps, metrics log and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aesust_core::losses::{LossReport, Stage};
use aesust_core::train::{step_rng, TrainConfig, Trainer};
use aesust_core::AesUst;

use crate::dataset::{prepare_batch, Corpus, DataError};
use crate::persist::{self, PersistError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("stage 2 needs a stage-1 checkpoint (--resume)")]
    MissingStageOneCheckpoint,
    #[error("checkpoint {path} is stage {found}; a stage-{stage} run cannot continue from it")]
    StageMismatch { path: PathBuf, found: u32, stage: u32 },
    #[error("checkpoint {path} has channel multiplier {found}, config asks for {expected}")]
    WidthMismatch { path: PathBuf, found: f64, expected: f64 },
    #[error("invalid configuration: {0}")]
    Config(aesust_core::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("metrics log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training aborted at step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: aesust_core::Error,
    },
}

#[derive(Debug, Clone)]
pub struct TrainJob {
    pub cfg: TrainConfig,
    pub content_dir: PathBuf,
    pub style_dir: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Defaults to `<out>.metrics.log`.
    pub metrics: Option<PathBuf>,
}

impl TrainJob {
    pub fn metrics_path(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| {
            let mut p = self.out.as_os_str().to_owned();
            p.push(".metrics.log");
            PathBuf::from(p)
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub start_step: u64,
    pub final_step: u64,
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Builds the trainer for a job: fresh for stage 1 without `--resume`,
/// otherwise from the checkpoint. A same-stage checkpoint continues its step
/// count (and optimizer state when saved); a stage-1 checkpoint starts
/// stage 2 at step 0.
pub fn make_trainer(job: &TrainJob) -> Result<Trainer<f32>, TrainError> {
    let cfg = job.cfg.clone();
    cfg.validate().map_err(TrainError::Config)?;
    let Some(path) = &job.resume else {
        if cfg.stage == Stage::Finetune {
            return Err(TrainError::MissingStageOneCheckpoint);
        }
        return Trainer::new(cfg).map_err(TrainError::Config);
    };
    let entries = persist::read_archive(path)?;
    let (model, step) = AesUst::<f32>::from_entries(&entries).map_err(|source| PersistError::Model {
        path: path.clone(),
        source,
    })?;
    if (model.scale.0 - cfg.channel_multiplier).abs() > 1e-12 {
        return Err(TrainError::WidthMismatch {
            path: path.clone(),
            found: model.scale.0,
            expected: cfg.channel_multiplier,
        });
    }
    match (model.stage, cfg.stage) {
        (a, b) if a == b => {
            let mut t = Trainer::from_model(cfg, model, step);
            let restored = t.restore_optimizer(&entries).map_err(|source| PersistError::Model {
                path: path.clone(),
                source,
            })?;
            if !restored {
                log::info!("{} carries no optimizer state; moments restart at zero", path.display());
            }
            Ok(t)
        }
        (Stage::Pretrain, Stage::Finetune) => Ok(Trainer::from_model(cfg, model, 0)),
        (found, stage) => Err(TrainError::StageMismatch {
            path: path.clone(),
            found: found.number(),
            stage: stage.number(),
        }),
    }
}

pub fn write_report(w: &mut impl Write, r: &LossReport) -> std::io::Result<()> {
    for (name, value) in r.rows() {
        writeln!(w, "{} {} {}", r.step, name, value)?;
    }
    Ok(())
}

fn open_log(path: &Path, append: bool) -> std::io::Result<BufWriter<File>> {
    let f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
    Ok(BufWriter::new(f))
}

/// Runs steps until `cfg.iterations`, checkpointing every
/// `cfg.checkpoint_every` steps (to `<out>.step<N>`) and at the end (to
/// `out`). `on_step` sees every report.
pub fn train(job: &TrainJob, mut on_step: impl FnMut(&LossReport)) -> Result<TrainSummary, TrainError> {
    let mut trainer = make_trainer(job)?;
    let cfg = trainer.cfg.clone();
    let content = Corpus::load(&job.content_dir, cfg.resize_smaller_edge, cfg.crop)?;
    let style = Corpus::load(&job.style_dir, cfg.resize_smaller_edge, cfg.crop)?;
    log::info!(
        "stage {}: {} content and {} style images, steps {}..{}",
        cfg.stage.number(),
        content.len(),
        style.len(),
        trainer.step,
        cfg.iterations
    );
    let metrics = job.metrics_path();
    let log_err = |source| TrainError::Log {
        path: metrics.clone(),
        source,
    };
    let mut log = open_log(&metrics, trainer.step > 0).map_err(log_err)?;
    let start_step = trainer.step;
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.step < cfg.iterations {
        let mut rng = step_rng(cfg.seed ^ (cfg.stage.number() as u64) << 56, trainer.step);
        let batch = prepare_batch(&content, &style, &cfg, &mut rng);
        let report = trainer.train_step(&batch).map_err(|source| TrainError::Step {
            step: trainer.step + 1,
            source,
        })?;
        write_report(&mut log, &report).map_err(log_err)?;
        on_step(&report);
        reports.push(report);
        if trainer.step % cfg.checkpoint_every == 0 && trainer.step < cfg.iterations {
            let mut p = job.out.as_os_str().to_owned();
            p.push(format!(".step{}", trainer.step));
            let p = PathBuf::from(p);
            log.flush().map_err(log_err)?;
            persist::write_archive(&p, &trainer.checkpoint_entries())?;
            checkpoints.push(p);
        }
    }
    log.flush().map_err(log_err)?;
    persist::write_archive(&job.out, &trainer.checkpoint_entries())?;
    checkpoints.push(job.out.clone());
    Ok(TrainSummary {
        start_step,
        final_step: trainer.step,
        reports,
        checkpoints,
    })
}
