//! Argument parsing and dispatch for the `cofipara` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cofipara_core::rationale::{MockClient, RationaleClient, RetryPolicy};
use cofipara_core::reannotate::DEFAULT_AREA_THRESHOLD;
use cofipara_core::{Phase, TrainConfig};

use crate::config_io;
use crate::error::{Error, Result};
use crate::pipeline::{self, InferenceJob, ReannotateJob, RationalesJob, TrainJob};
use crate::rationales::Mode;

#[derive(Debug, Parser)]
#[command(name = "cofipara", version, about = "Multimodal sarcasm detection and target identification")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate rationales and write the augmented dataset.
    Rationales(RationalesArgs),
    /// Convert large boxes over printed text into textual targets.
    Reannotate(ReannotateArgs),
    /// Train on sarcasm labels.
    Pretrain(TrainArgs),
    /// Train on sarcasm targets.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(InferenceArgs),
    /// Write per-sample predictions.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Pretrain,
    Finetune,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Pretrain => Phase::Pretrain,
            PhaseArg::Finetune => Phase::Finetune,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Mock,
    Http,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset JSONL.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory image paths are relative to.
    #[arg(long)]
    pub images: PathBuf,
}

#[derive(Debug, Args)]
pub struct RationalesArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Rationale cache JSONL (created if missing).
    #[arg(long)]
    pub cache: PathBuf,
    /// Augmented dataset JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Rationales for one phase; by default records with targets get one and
    /// the others get two.
    #[arg(long, value_enum)]
    pub phase: Option<PhaseArg>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, value_enum, default_value_t = Backend::Mock)]
    pub backend: Backend,
    #[arg(long, default_value_t = RetryPolicy::default().max_retries)]
    pub max_retries: u32,
    /// Config file; only `image_size` is used here.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReannotateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_AREA_THRESHOLD)]
    pub threshold: f64,
    /// OCR results JSONL: `{sample_id, box_index, text, confirmed}`.
    #[arg(long)]
    pub ocr: Option<PathBuf>,
    /// Review overrides JSONL: `{sample_id, box_index, action, ocr_text?}`.
    #[arg(long)]
    pub review: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Dev split for best-checkpoint selection.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints and the step log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Pre-training checkpoint to start from.
    #[arg(long, required_unless_present = "from_scratch", conflicts_with = "from_scratch")]
    pub checkpoint: Option<PathBuf>,
    /// Skip pre-training: start every module fresh.
    #[arg(long)]
    pub from_scratch: bool,
}

#[derive(Debug, Args)]
pub struct InferenceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint's phase.
    #[arg(long, value_enum)]
    pub phase: Option<PhaseArg>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Minimum box confidence; defaults to the checkpoint config's.
    #[arg(long)]
    pub conf_threshold: Option<f64>,
}

fn image_size(config: Option<&PathBuf>) -> Result<usize> {
    Ok(match config {
        Some(p) => config_io::load(p)?.image_size,
        None => TrainConfig::default().image_size,
    })
}

fn client(backend: Backend, images: &std::path::Path) -> Result<Box<dyn RationaleClient + Sync>> {
    match backend {
        Backend::Mock => Ok(Box::new(MockClient::new())),
        #[cfg(feature = "http")]
        Backend::Http => {
            let cfg = crate::http::HttpConfig::from_env(images.to_path_buf())?;
            Ok(Box::new(crate::http::HttpClient::new(cfg)?))
        }
        #[cfg(not(feature = "http"))]
        Backend::Http => {
            let _ = images;
            Err(Error::Usage("built without the `http` feature".into()))
        }
    }
}

fn train_job(a: &TrainArgs) -> Result<TrainJob> {
    Ok(TrainJob {
        config: config_io::resolve(a.config.as_deref(), a.seed)?,
        data: a.data.data.clone(),
        dev: a.dev.clone(),
        images: a.data.images.clone(),
        out: a.out.clone(),
        jobs: a.jobs,
    })
}

fn inference_job(a: &InferenceArgs) -> InferenceJob {
    InferenceJob {
        checkpoint: a.checkpoint.clone(),
        data: a.data.data.clone(),
        images: a.data.images.clone(),
        out: a.out.clone(),
        phase: a.phase.map(Phase::from),
        jobs: a.jobs,
    }
}

/// Runs one command; returns the human-readable summary line(s).
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Rationales(a) => {
            let job = RationalesJob {
                data: a.data.data.clone(),
                images: a.data.images.clone(),
                cache: a.cache.clone(),
                out: a.out.clone(),
                mode: a.phase.map_or(Mode::Auto, |p| Mode::Phase(p.into())),
                jobs: a.jobs,
                retry: RetryPolicy { max_retries: a.max_retries },
                image_size: image_size(a.config.as_ref())?,
            };
            let c = client(a.backend, &a.data.images)?;
            let n = pipeline::rationales(&job, c.as_ref())?;
            Ok(format!("wrote {n} records to {}", a.out.display()))
        }
        Command::Reannotate(a) => {
            if !(0.0..=1.0).contains(&a.threshold) {
                return Err(Error::Usage(format!("--threshold {} outside [0,1]", a.threshold)));
            }
            let s = pipeline::reannotate_dataset(&ReannotateJob {
                data: a.data.data.clone(),
                images: a.data.images.clone(),
                out: a.out.clone(),
                threshold: a.threshold,
                ocr: a.ocr.clone(),
                review: a.review.clone(),
                image_size: image_size(a.config.as_ref())?,
            })?;
            Ok(format!(
                "flagged {} boxes, converted {}; textual {} -> {}, visual {} -> {}",
                s.flagged,
                s.converted,
                s.before.textual_target_count,
                s.after.textual_target_count,
                s.before.visual_target_count,
                s.after.visual_target_count
            ))
        }
        Command::Pretrain(a) => {
            let run = pipeline::pretrain(&train_job(a)?)?;
            Ok(format!("{} steps; checkpoints in {}", run.steps, a.out.display()))
        }
        Command::Finetune(a) => {
            let init = if a.from_scratch { None } else { a.checkpoint.as_deref() };
            let run = pipeline::finetune(&train_job(&a.train)?, init)?;
            Ok(format!("{} steps; checkpoints in {}", run.steps, a.train.out.display()))
        }
        Command::Evaluate(a) => Ok(pipeline::evaluate(&inference_job(a))?.to_table()),
        Command::Predict(a) => {
            let preds = pipeline::predict(&inference_job(&a.inference), a.conf_threshold)?;
            Ok(format!("wrote {} predictions to {}", preds.len(), a.inference.out.display()))
        }
    }
}
