//! Two-stage training: detection pre-training on the label word, then target
//! fine-tuning with the shared modules carried over.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::checkpoint::{load_shared, Checkpoint};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::image_decoder::LossBreakdown;
use crate::metrics::{coco_ap, exact_match};
use crate::model::{CofiPara, TrainExample};
use crate::optim::Adam;
use crate::rationale::{Phase, RationaleSet};
use crate::sample::{Sample, Stance};

/// A sample together with its generated rationales.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotated {
    pub sample: Sample,
    pub rationales: RationaleSet,
}

impl Annotated {
    pub fn new(sample: Sample, rationales: RationaleSet) -> Self {
        Self { sample, rationales }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_text: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    pub l_cls: f64,
    pub l_img: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepLog {
    fn from_breakdown(step: u64, b: &LossBreakdown, lr: f64) -> Self {
        Self { step, l_text: b.l_text, l_l1: b.l_l1, l_giou: b.l_giou, l_cls: b.l_cls, l_img: b.l_img, total: b.total, lr }
    }
}

/// How fine-tuning initialises the shared modules.
#[derive(Clone, Copy, Debug)]
pub enum FinetuneInit<'a> {
    FromPretrain(&'a Checkpoint),
    /// Ablation without detection pre-training: nothing is copied.
    FromScratch,
}

/// Computes per-example gradients for a batch. The trainer sums the results in
/// batch order, so an executor may run examples in any order or in parallel
/// without changing the outcome.
pub trait BatchExecutor {
    fn run(&self, model: &CofiPara, batch: &[&TrainExample], phase: Phase) -> Result<Vec<(Gradients, LossBreakdown)>>;
}

/// Runs examples one after another.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl BatchExecutor for Sequential {
    fn run(&self, model: &CofiPara, batch: &[&TrainExample], phase: Phase) -> Result<Vec<(Gradients, LossBreakdown)>> {
        batch.iter().map(|ex| example_gradients(model, ex, phase)).collect()
    }
}

/// Loss and gradients for a single example.
pub fn example_gradients(model: &CofiPara, ex: &TrainExample, phase: Phase) -> Result<(Gradients, LossBreakdown)> {
    let mut g = Graph::new(&model.params);
    let nodes = model.example_loss(&mut g, ex, phase)?;
    let breakdown = nodes.breakdown(&g, model.loss_weights());
    if !breakdown.is_finite() {
        return Err(Error::contract(format!("non-finite loss on `{}`", ex.id)));
    }
    Ok((g.backward(nodes.total), breakdown))
}

/// Callbacks fired during training.
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch with the snapshot and, when a dev set was
    /// supplied, its selection score.
    fn on_epoch(&mut self, _checkpoint: &Checkpoint, _dev_score: Option<f64>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects every step log in memory.
#[derive(Clone, Debug, Default)]
pub struct LogCollector {
    pub steps: Vec<StepLog>,
    pub epochs: usize,
}

impl TrainObserver for LogCollector {
    fn on_step(&mut self, log: &StepLog) -> Result<()> {
        self.steps.push(*log);
        Ok(())
    }

    fn on_epoch(&mut self, _checkpoint: &Checkpoint, _dev_score: Option<f64>) -> Result<()> {
        self.epochs += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub score: f64,
    pub checkpoint: Checkpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub last: Checkpoint,
    /// Highest dev score; the earliest epoch wins ties. `None` without a dev set.
    pub best: Option<BestCheckpoint>,
    pub steps: u64,
}

impl TrainRun {
    /// The best-on-dev snapshot when available, else the last one.
    pub fn selected(&self) -> &Checkpoint {
        self.best.as_ref().map_or(&self.last, |b| &b.checkpoint)
    }
}

/// Optional pieces of a training run.
pub struct TrainOptions<'a> {
    pub dev: Option<&'a [Annotated]>,
    pub executor: &'a dyn BatchExecutor,
    pub observer: &'a mut dyn TrainObserver,
}

impl<'a> TrainOptions<'a> {
    pub fn new(observer: &'a mut dyn TrainObserver) -> Self {
        Self { dev: None, executor: &Sequential, observer }
    }

    pub fn with_dev(mut self, dev: &'a [Annotated]) -> Self {
        self.dev = Some(dev);
        self
    }

    pub fn with_executor(mut self, executor: &'a dyn BatchExecutor) -> Self {
        self.executor = executor;
        self
    }
}

/// Builds training examples, failing on the first invalid record before any
/// optimisation happens.
pub fn prepare(data: &[Annotated], phase: Phase) -> Result<Vec<TrainExample>> {
    if data.is_empty() {
        return Err(Error::RejectedInput(format!("empty {} dataset", phase.as_str())));
    }
    data.iter()
        .map(|a| {
            a.sample.validate()?;
            TrainExample::new(&a.sample, &a.rationales, phase).map_err(|e| match e {
                Error::Contract(message) => {
                    Error::Validation { record_id: a.sample.id.clone(), field: "rationales", message }
                }
                other => other,
            })
        })
        .collect()
}

/// Minimises the text loss on the label word.
pub fn pretrain_msd(data: &[Annotated], config: &TrainConfig, opts: TrainOptions<'_>) -> Result<TrainRun> {
    let model = CofiPara::new(config.clone())?;
    train(model, data, Phase::Pretrain, opts)
}

/// Minimises text plus detection loss, starting from the shared modules of a
/// pre-training checkpoint or from scratch.
pub fn finetune_msti(
    init: FinetuneInit<'_>,
    data: &[Annotated],
    config: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainRun> {
    let model = finetune_model(init, config)?;
    train(model, data, Phase::Finetune, opts)
}

/// The model fine-tuning starts from.
pub fn finetune_model(init: FinetuneInit<'_>, config: &TrainConfig) -> Result<CofiPara> {
    let mut model = CofiPara::new(config.clone())?;
    if let FinetuneInit::FromPretrain(ckpt) = init {
        ckpt.validate()?;
        load_shared(&mut model, ckpt)?;
    }
    Ok(model)
}

fn shuffle_rng(config: &TrainConfig, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // streams 0..6 seed the modules
    rng.set_stream(16 + phase as u64);
    rng
}

fn train(mut model: CofiPara, data: &[Annotated], phase: Phase, opts: TrainOptions<'_>) -> Result<TrainRun> {
    let examples = prepare(data, phase)?;
    if let Some(dev) = opts.dev {
        prepare(dev, phase)?;
    }
    let cfg = model.config.clone();
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam_eps);
    let mut rng = shuffle_rng(&cfg, phase);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<BestCheckpoint> = None;
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let results = opts.executor.run(&model, &batch, phase)?;
            if results.len() != batch.len() {
                return Err(Error::contract("executor returned the wrong number of results"));
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Gradients::default();
            let mut sums = [0.0f64; 4];
            for (g, b) in &results {
                grads.accumulate(g, scale);
                sums[0] += b.l_text;
                sums[1] += b.l_l1;
                sums[2] += b.l_giou;
                sums[3] += b.l_cls;
            }
            let w = model.loss_weights();
            let mean = match phase {
                Phase::Pretrain => LossBreakdown::text_only(sums[0] * scale, w),
                Phase::Finetune => {
                    LossBreakdown::combined(sums[0] * scale, sums[1] * scale, sums[2] * scale, sums[3] * scale, w)
                }
            };
            adam.step(&mut model.params, &grads);
            step += 1;
            opts.observer.on_step(&StepLog::from_breakdown(step, &mean, adam.lr))?;
        }
        let ckpt = Checkpoint::from_model(&model, phase, epoch);
        let score = match opts.dev {
            Some(dev) => Some(dev_score(&model, dev, phase)?),
            None => None,
        };
        opts.observer.on_epoch(&ckpt, score)?;
        if let Some(s) = score {
            if best.as_ref().is_none_or(|b| s > b.score) {
                best = Some(BestCheckpoint { epoch, score: s, checkpoint: ckpt });
            }
        }
    }
    Ok(TrainRun { last: Checkpoint::from_model(&model, phase, cfg.epochs), best, steps: step })
}

/// Selection score on a dev split: label accuracy for pre-training, mean of
/// exact match and AP50 for fine-tuning. Percentages.
pub fn dev_score(model: &CofiPara, dev: &[Annotated], phase: Phase) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::RejectedInput("empty dev set".into()));
    }
    match phase {
        Phase::Pretrain => {
            let mut correct = 0usize;
            for a in dev {
                let p = model.predict(&a.sample, &a.rationales, phase)?;
                let pred: Option<Stance> = p.decoded_text.trim().parse().ok();
                correct += usize::from(pred.is_some() && pred == a.sample.msd_label);
            }
            Ok(100.0 * correct as f64 / dev.len() as f64)
        }
        Phase::Finetune => {
            let mut em = 0.0;
            let mut preds = Vec::with_capacity(dev.len());
            let mut gts = Vec::with_capacity(dev.len());
            for a in dev {
                let p = model.predict(&a.sample, &a.rationales, phase)?;
                em += f64::from(exact_match(&p.decoded_text, &a.sample.textual_targets));
                preds.push(p.boxes);
                gts.push(a.sample.visual_targets.clone());
            }
            let em = 100.0 * em / dev.len() as f64;
            Ok(0.5 * (em + coco_ap(&preds, &gts).ap50))
        }
    }
}

/// Predicted label word parsed into a stance, if it is one.
pub fn predicted_stance(text: &str) -> Option<Stance> {
    text.trim().parse().ok()
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn is<T: Send + Sync>() {}
    is::<CofiPara>();
    is::<TrainExample>();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BoundingBox;
    use crate::rationale::{MemoryCache, MockClient, RationaleGenerator};
    use crate::sample::Raster;

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::tiny() }
    }

    fn annotate(samples: Vec<Sample>, phase: Phase) -> Vec<Annotated> {
        let client = MockClient::new();
        let cache = MemoryCache::default();
        let generator = RationaleGenerator::new(&client, &cache);
        samples
            .into_iter()
            .map(|s| {
                let r = generator.generate_for_phase(&s, phase).unwrap();
                Annotated::new(s, r)
            })
            .collect()
    }

    fn msd_set() -> Vec<Annotated> {
        let img = Raster::solid(16, 16, [10, 20, 30]);
        let s = alloc::vec![
            Sample::new("a", "great weather again", img.clone()).with_label(Stance::Sarcastic),
            Sample::new("b", "nice day outside", img.clone()).with_label(Stance::NonSarcastic),
            Sample::new("c", "love mondays", img).with_label(Stance::Sarcastic),
        ];
        annotate(s, Phase::Pretrain)
    }

    fn msti_set() -> Vec<Annotated> {
        let mut img = Raster::solid(16, 16, [0, 0, 0]);
        let b = BoundingBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        img.fill_box(&b, [255, 255, 255]);
        let s = alloc::vec![Sample::new("t", "the train driver", img)
            .with_label(Stance::Sarcastic)
            .with_textual_target("train driver")
            .with_visual_target(b)];
        annotate(s, Phase::Finetune)
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let c = TrainConfig { epochs: 0, ..cfg() };
        let run = pretrain_msd(&msd_set(), &c, TrainOptions::new(&mut ())).unwrap();
        let init = Checkpoint::from_model(&CofiPara::new(c).unwrap(), Phase::Pretrain, 0);
        assert_eq!(run.last, init);
        assert_eq!(run.steps, 0);
    }

    #[test]
    fn missing_label_fails_before_training() {
        let mut data = msd_set();
        data[1].sample.msd_label = None;
        let mut log = LogCollector::default();
        let err = pretrain_msd(&data, &cfg(), TrainOptions::new(&mut log)).unwrap_err();
        assert_eq!(err.code(), "E_VALIDATION");
        assert!(log.steps.is_empty());
    }

    #[test]
    fn missing_negative_rationale_is_a_validation_error() {
        let mut data = msd_set();
        data[0].rationales.r_neg = None;
        let err = pretrain_msd(&data, &cfg(), TrainOptions::new(&mut ())).unwrap_err();
        assert!(matches!(err, Error::Validation { ref record_id, .. } if record_id == "a"));
    }

    #[test]
    fn pretrain_logs_text_only_and_keeps_encoder_frozen() {
        let mut log = LogCollector::default();
        let run = pretrain_msd(&msd_set(), &cfg(), TrainOptions::new(&mut log)).unwrap();
        assert_eq!(log.steps.len(), 4);
        assert_eq!(log.epochs, 2);
        for s in &log.steps {
            assert_eq!(s.total, s.l_text);
            assert_eq!(s.l_img, 0.0);
        }
        let init = Checkpoint::from_model(&CofiPara::new(cfg()).unwrap(), Phase::Pretrain, 0);
        for t in &run.last.tensors {
            let before = init.get(&t.name).unwrap();
            if t.module == crate::params::ModuleTag::ImageEncoder {
                assert_eq!(t.value, before.value);
            }
        }
        assert!(run.last.tensors.iter().any(|t| t.value != init.get(&t.name).unwrap().value));
    }

    #[test]
    fn finetune_requires_pretrain_phase() {
        let data = msti_set();
        let c = cfg();
        let ft = finetune_msti(FinetuneInit::FromScratch, &data, &c, TrainOptions::new(&mut ())).unwrap();
        let err = finetune_msti(FinetuneInit::FromPretrain(&ft.last), &data, &c, TrainOptions::new(&mut ()));
        assert!(err.is_err());
    }

    #[test]
    fn finetune_loss_identity() {
        let mut log = LogCollector::default();
        finetune_msti(FinetuneInit::FromScratch, &msti_set(), &cfg(), TrainOptions::new(&mut log)).unwrap();
        for s in &log.steps {
            assert!((s.total - (s.l_img + s.l_text)).abs() < 1e-9);
            assert!((s.l_img - (0.2 * s.l_l1 + 1e-3 * s.l_giou + 0.1 * s.l_cls)).abs() < 1e-9);
        }
    }

    #[test]
    fn dev_selection_keeps_earliest_best() {
        let data = msd_set();
        let run = pretrain_msd(&data, &cfg(), TrainOptions::new(&mut ()).with_dev(&data)).unwrap();
        let best = run.best.unwrap();
        assert!((1..=2).contains(&best.epoch));
        assert!((0.0..=100.0).contains(&best.score));
    }
}
