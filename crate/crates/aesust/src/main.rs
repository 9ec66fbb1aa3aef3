use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use aesust::config::parse_config;
use aesust::request::{self, Limits, StylizeRequest};
use aesust::service::{self, AppState};
use aesust::training::{self, TrainJob};
use aesust::{persist, selfcheck, synth};
use aesust_core::losses::Stage;
use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aesust", version, about = "Aesthetic-enhanced universal style transfer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train stage 1 (pre-training) or stage 2 (aesthetic fine-tuning).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        content_dir: PathBuf,
        #[arg(long)]
        style_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from; required for stage 2.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics log (default: <out>.metrics.log).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Stylize a content image with one or more styles.
    Stylize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        content: PathBuf,
        /// Repeat for several styles.
        #[arg(long = "style", required = true)]
        styles: Vec<PathBuf>,
        /// Comma-separated interpolation weights, one per style.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        preserve_color: bool,
        /// Grayscale PNG region mask, one per style.
        #[arg(long = "mask")]
        masks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the verification suite.
    Selfcheck {
        /// Also run 500+500 desk-scale training steps.
        #[arg(long)]
        full: bool,
        /// Keep scratch files here instead of a temporary directory.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
    /// Write a deterministic synthetic content/style corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        content: usize,
        #[arg(long, default_value_t = 8)]
        style: usize,
        #[arg(long, default_value_t = synth::DEFAULT_SIZE)]
        size: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn train(job: TrainJob) -> anyhow::Result<()> {
    let summary = training::train(&job, |r| {
        if r.step % 50 == 0 || r.step == job.cfg.iterations {
            log::info!("step {} total {:.4}", r.step, r.total);
        }
    })?;
    println!(
        "trained steps {}..{}; wrote {}",
        summary.start_step,
        summary.final_step,
        job.out.display()
    );
    Ok(())
}

fn checkpoint_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn run(cmd: Cmd) -> anyhow::Result<ExitCode> {
    match cmd {
        Cmd::Train {
            stage,
            config,
            content_dir,
            style_dir,
            out,
            resume,
            metrics,
        } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = parse_config(&text).with_context(|| format!("config {}", config.display()))?;
            cfg.stage = Stage::from_number(stage).expect("clap checks the range");
            train(TrainJob {
                cfg,
                content_dir,
                style_dir,
                out,
                resume,
                metrics,
            })?;
        }
        Cmd::Stylize {
            checkpoint,
            content,
            styles,
            weights,
            alpha,
            preserve_color,
            masks,
            out,
        } => {
            let (model, _) = persist::load_model(&checkpoint)?;
            let req = StylizeRequest {
                content: read(&content)?,
                styles: styles.iter().map(|p| read(p)).collect::<Result<_, _>>()?,
                weights: weights.as_deref().map(request::parse_weights).transpose()?,
                alpha,
                preserve_color,
                masks: masks.iter().map(|p| read(p)).collect::<Result<_, _>>()?,
            };
            let png = request::run_request(&model, &req, &Limits::default())?;
            std::fs::write(&out, png).with_context(|| format!("writing {}", out.display()))?;
        }
        Cmd::Selfcheck { full, workdir } => {
            let ok = selfcheck::run(full, workdir.as_deref(), &mut std::io::stdout())?;
            println!("{}", if ok { "all checks passed" } else { "some checks FAILED" });
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Serve { checkpoint, port, host } => {
            let (model, _) = persist::load_model(&checkpoint)?;
            let workers = service::worker_count();
            log::info!("{workers} workers");
            let state = Arc::new(AppState::new(model, checkpoint_name(&checkpoint), Limits::default(), workers));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, SocketAddr::new(host, port)))?;
        }
        Cmd::SynthCorpus {
            out,
            content,
            style,
            size,
            seed,
        } => {
            if size < 16 {
                bail!("--size must be at least 16");
            }
            let (c, s) = synth::write_corpus(&out, content, style, size, seed)?;
            println!("{}\n{}", c.display(), s.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Cmd::Train { stage: 2, resume: None, .. } = &cli.cmd {
        Cli::command()
            .error(
                ErrorKind::MissingRequiredArgument,
                "--stage 2 fine-tunes a stage-1 checkpoint; pass it with --resume",
            )
            .exit();
    }
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
