//! The subcommands as library functions. Each reads its inputs, writes its
//! outputs under the given paths and never touches the inputs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cofipara_core::autograd::Gradients;
use cofipara_core::checkpoint::Checkpoint;
use cofipara_core::image_decoder::LossBreakdown;
use cofipara_core::metrics::{detection_report, target_report, MetricReport};
use cofipara_core::rationale::{RationaleClient, RetryPolicy};
use cofipara_core::reannotate::{reannotate, MockOcr, ReannotationDecision, ReviewOverride, Split, TargetCounts};
use cofipara_core::trainer::{
    example_gradients, finetune_msti, predicted_stance, pretrain_msd, Annotated, BatchExecutor, FinetuneInit,
    StepLog, TrainObserver, TrainOptions, TrainRun,
};
use cofipara_core::{BoundingBox, CofiPara, Phase, Stance, TrainConfig, TrainExample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint_io;
use crate::dataset::{load_dataset, read_jsonl, read_records, write_jsonl, write_records, LoadedDataset, Record};
use crate::error::{Error, Result};
use crate::rationales::{generate_all, JsonlCache, Mode};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format { path: path.into(), message: e.to_string() })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- rationales

#[derive(Clone, Debug)]
pub struct RationalesJob {
    pub data: PathBuf,
    pub images: PathBuf,
    pub cache: PathBuf,
    pub out: PathBuf,
    pub mode: Mode,
    pub jobs: usize,
    pub retry: RetryPolicy,
    pub image_size: usize,
}

/// Generates rationales and writes the augmented dataset. Returns the number
/// of records written.
pub fn rationales(job: &RationalesJob, client: &(dyn RationaleClient + Sync)) -> Result<usize> {
    let ds = load_dataset(&job.data, &job.images, Split::Train, job.image_size)?;
    let cache = JsonlCache::open(&job.cache)?;
    let sets = generate_all(&ds.manifest.records, client, &cache, job.mode, job.retry, job.jobs)?;
    let records: Vec<Record> =
        ds.manifest.records.iter().zip(&sets).map(|(s, r)| Record::from_sample(s, Some(r))).collect();
    write_records(&job.out, &records)?;
    Ok(records.len())
}

// ---------------------------------------------------------------- reannotate

/// One line of an OCR result file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcrLine {
    pub sample_id: String,
    pub box_index: usize,
    pub text: String,
    #[serde(default = "yes")]
    pub confirmed: bool,
}

fn yes() -> bool {
    true
}

pub fn ocr_from_file(path: &Path) -> Result<MockOcr> {
    Ok(read_jsonl::<OcrLine>(path)?
        .into_iter()
        .fold(MockOcr::new(), |ocr, l| ocr.with_reading(&l.sample_id, l.box_index, &l.text, l.confirmed)))
}

#[derive(Clone, Debug)]
pub struct ReannotateJob {
    pub data: PathBuf,
    pub images: PathBuf,
    pub out: PathBuf,
    pub threshold: f64,
    pub ocr: Option<PathBuf>,
    pub review: Option<PathBuf>,
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReannotateSummary {
    pub threshold: f64,
    pub flagged: usize,
    pub converted: usize,
    pub before: TargetCounts,
    pub after: TargetCounts,
}

/// Writes `dataset.jsonl`, `decisions.jsonl` and `summary.json` under `out`.
/// Stored rationales are carried over unchanged.
pub fn reannotate_dataset(job: &ReannotateJob) -> Result<ReannotateSummary> {
    let raw = read_records(&job.data)?;
    let ds = load_dataset(&job.data, &job.images, Split::Train, job.image_size)?;
    let ocr = match &job.ocr {
        Some(p) => ocr_from_file(p)?,
        None => MockOcr::new(),
    };
    let review: Vec<ReviewOverride> = match &job.review {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let r = reannotate(&ds.manifest.records, job.threshold, &ocr, &review)?;
    let records: Vec<Record> = r
        .records
        .iter()
        .map(|s| {
            let original = raw.iter().find(|x| x.id == s.id).expect("ids preserved");
            Record {
                rationale_pos: original.rationale_pos.clone(),
                rationale_neg: original.rationale_neg.clone(),
                ..Record::from_sample(s, None)
            }
        })
        .collect();
    ensure_dir(&job.out)?;
    write_records(&job.out.join("dataset.jsonl"), &records)?;
    write_jsonl::<ReannotationDecision>(&job.out.join("decisions.jsonl"), &r.decisions)?;
    let summary = ReannotateSummary {
        threshold: job.threshold,
        flagged: r.decisions.iter().filter(|d| d.flagged).count(),
        converted: r
            .decisions
            .iter()
            .filter(|d| d.action == cofipara_core::reannotate::ReannotationAction::ConvertToText)
            .count(),
        before: r.before,
        after: r.after,
    };
    write_json(&job.out.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- training

/// Per-example gradients on a bounded rayon pool; results come back in batch
/// order so the update does not depend on the thread count.
pub struct ParallelExecutor {
    pool: rayon::ThreadPool,
}

impl ParallelExecutor {
    pub fn new(jobs: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
        Ok(Self { pool })
    }
}

impl BatchExecutor for ParallelExecutor {
    fn run(
        &self,
        model: &CofiPara,
        batch: &[&TrainExample],
        phase: Phase,
    ) -> cofipara_core::Result<Vec<(Gradients, LossBreakdown)>> {
        self.pool.install(|| batch.par_iter().map(|ex| example_gradients(model, ex, phase)).collect())
    }
}

/// Writes one checkpoint per epoch and the step log as training runs.
struct FileObserver {
    dir: PathBuf,
    log: BufWriter<fs::File>,
    log_path: PathBuf,
    failure: Option<Error>,
}

impl FileObserver {
    fn new(dir: &Path) -> Result<Self> {
        ensure_dir(dir)?;
        let log_path = dir.join(TRAIN_LOG);
        let f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(Self { dir: dir.into(), log: BufWriter::new(f), log_path, failure: None })
    }

    fn fail(&mut self, e: Error) -> cofipara_core::Error {
        let msg = e.to_string();
        self.failure = Some(e);
        cofipara_core::Error::Contract(msg)
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.failure.take() {
            return Err(e);
        }
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))
    }
}

impl TrainObserver for FileObserver {
    fn on_step(&mut self, log: &StepLog) -> cofipara_core::Result<()> {
        let line = serde_json::to_string(log).expect("step logs serialise");
        if let Err(e) = writeln!(self.log, "{line}") {
            let p = self.log_path.clone();
            return Err(self.fail(Error::io(p, e)));
        }
        Ok(())
    }

    fn on_epoch(&mut self, ckpt: &Checkpoint, dev_score: Option<f64>) -> cofipara_core::Result<()> {
        if let Some(s) = dev_score {
            log::info!("epoch {}: dev score {s:.2}", ckpt.epoch);
        }
        let path = self.dir.join(format!("epoch_{:03}.ckpt", ckpt.epoch));
        checkpoint_io::save(&path, ckpt).map_err(|e| self.fail(e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainJob {
    pub config: TrainConfig,
    pub data: PathBuf,
    pub dev: Option<PathBuf>,
    pub images: PathBuf,
    pub out: PathBuf,
    pub jobs: usize,
}

fn load_annotated(path: &Path, images: &Path, split: Split, image_size: usize) -> Result<Vec<Annotated>> {
    load_dataset(path, images, split, image_size)?.annotated()
}

fn run_training(
    job: &TrainJob,
    train: impl FnOnce(&[Annotated], TrainOptions<'_>) -> cofipara_core::Result<TrainRun>,
) -> Result<TrainRun> {
    let data = load_annotated(&job.data, &job.images, Split::Train, job.config.image_size)?;
    let dev = match &job.dev {
        Some(p) => Some(load_annotated(p, &job.images, Split::Dev, job.config.image_size)?),
        None => None,
    };
    let executor = ParallelExecutor::new(job.jobs)?;
    let mut observer = FileObserver::new(&job.out)?;
    let mut opts = TrainOptions::new(&mut observer).with_executor(&executor);
    if let Some(d) = &dev {
        opts = opts.with_dev(d);
    }
    let result = train(&data, opts);
    match result {
        Ok(run) => {
            observer.finish()?;
            checkpoint_io::save(&job.out.join(FINAL_CHECKPOINT), &run.last)?;
            if let Some(best) = &run.best {
                checkpoint_io::save(&job.out.join(BEST_CHECKPOINT), &best.checkpoint)?;
            }
            Ok(run)
        }
        Err(e) => Err(observer.failure.take().unwrap_or(Error::Core(e))),
    }
}

pub fn pretrain(job: &TrainJob) -> Result<TrainRun> {
    run_training(job, |data, opts| pretrain_msd(data, &job.config, opts))
}

/// Fine-tunes from `init` (a pre-training checkpoint) or from scratch.
pub fn finetune(job: &TrainJob, init: Option<&Path>) -> Result<TrainRun> {
    let ckpt = init.map(checkpoint_io::load).transpose()?;
    let init = match &ckpt {
        Some(c) => FinetuneInit::FromPretrain(c),
        None => FinetuneInit::FromScratch,
    };
    run_training(job, |data, opts| finetune_msti(init, data, &job.config, opts))
}

// ---------------------------------------------------------------- inference

#[derive(Clone, Debug)]
pub struct InferenceJob {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub images: PathBuf,
    pub out: PathBuf,
    /// Defaults to the checkpoint's phase.
    pub phase: Option<Phase>,
    pub jobs: usize,
}

fn load_for_inference(job: &InferenceJob) -> Result<(CofiPara, Phase, LoadedDataset)> {
    let ckpt = checkpoint_io::load(&job.checkpoint)?;
    let phase = job.phase.unwrap_or(ckpt.phase);
    let model = ckpt.to_model()?;
    let ds = load_dataset(&job.data, &job.images, Split::Test, model.config.image_size)?;
    Ok((model, phase, ds))
}

fn predict_all(
    model: &CofiPara,
    phase: Phase,
    data: &[Annotated],
    jobs: usize,
) -> Result<Vec<cofipara_core::Prediction>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    let preds: Vec<cofipara_core::Result<_>> =
        pool.install(|| data.par_iter().map(|a| model.predict(&a.sample, &a.rationales, phase)).collect());
    preds.into_iter().map(|p| p.map_err(Error::from)).collect()
}

/// Writes a JSON metric report to `out` and returns it.
pub fn evaluate(job: &InferenceJob) -> Result<MetricReport> {
    let (model, phase, ds) = load_for_inference(job)?;
    let data = ds.annotated()?;
    let preds = predict_all(&model, phase, &data, job.jobs)?;
    let report = match phase {
        Phase::Pretrain => {
            let mut golds = Vec::with_capacity(data.len());
            for a in &data {
                golds.push(a.sample.msd_label.ok_or_else(|| cofipara_core::Error::Validation {
                    record_id: a.sample.id.clone(),
                    field: "msd_label",
                    message: "evaluation needs a label".into(),
                })?);
            }
            // an unreadable label word counts as the wrong class
            let predicted: Vec<Stance> = preds
                .iter()
                .zip(&golds)
                .map(|(p, g)| predicted_stance(&p.decoded_text).unwrap_or(opposite(*g)))
                .collect();
            detection_report(&predicted, &golds)?
        }
        Phase::Finetune => {
            let texts: Vec<String> = preds.iter().map(|p| p.decoded_text.clone()).collect();
            let gold_texts: Vec<Vec<String>> = data.iter().map(|a| a.sample.textual_targets.clone()).collect();
            let boxes: Vec<Vec<(BoundingBox, f64)>> = preds.iter().map(|p| p.boxes.clone()).collect();
            let gold_boxes: Vec<Vec<BoundingBox>> = data.iter().map(|a| a.sample.visual_targets.clone()).collect();
            target_report(&texts, &gold_texts, &boxes, &gold_boxes)?
        }
    };
    write_json(&job.out, &report)?;
    Ok(report)
}

fn opposite(s: Stance) -> Stance {
    match s {
        Stance::Sarcastic => Stance::NonSarcastic,
        Stance::NonSarcastic => Stance::Sarcastic,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
}

/// One line of the prediction output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub phase: Phase,
    pub text: String,
    pub boxes: Vec<ScoredBox>,
    /// The sarcastic rationale, kept as the readable explanation.
    pub rationale: String,
}

/// Writes per-sample predictions as JSONL; boxes below `conf_threshold`
/// (default: the checkpoint config's) are left out.
pub fn predict(job: &InferenceJob, conf_threshold: Option<f64>) -> Result<Vec<PredictionRecord>> {
    let (model, phase, ds) = load_for_inference(job)?;
    let threshold = conf_threshold.unwrap_or(model.config.conf_threshold);
    let data = ds.annotated()?;
    let preds = predict_all(&model, phase, &data, job.jobs)?;
    let out: Vec<PredictionRecord> = data
        .iter()
        .zip(&preds)
        .map(|(a, p)| PredictionRecord {
            id: a.sample.id.clone(),
            phase,
            text: p.decoded_text.clone(),
            boxes: p
                .emitted(threshold)
                .map(|(b, c)| ScoredBox { cx: b.cx, cy: b.cy, w: b.w, h: b.h, confidence: *c })
                .collect(),
            rationale: a.rationales.r_pos.clone(),
        })
        .collect();
    write_jsonl(&job.out, &out)?;
    Ok(out)
}
