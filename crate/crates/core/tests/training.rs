use cofipara_core::checkpoint::{load_shared, Checkpoint};
use cofipara_core::params::ModuleTag;
use cofipara_core::rationale::{MemoryCache, MockClient, RationaleGenerator};
use cofipara_core::trainer::{
    finetune_model, finetune_msti, pretrain_msd, Annotated, FinetuneInit, LogCollector, TrainOptions,
};
use cofipara_core::{BoundingBox, CofiPara, Error, Phase, Raster, Sample, Stance, TrainConfig};

fn config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig { seed, epochs, batch_size: 2, ..TrainConfig::tiny() }
}

fn annotate(samples: Vec<Sample>, phase: Phase) -> Vec<Annotated> {
    let client = MockClient::new();
    let cache = MemoryCache::default();
    let generator = RationaleGenerator::new(&client, &cache);
    samples.into_iter().map(|s| {
        let r = generator.generate_for_phase(&s, phase).unwrap();
        Annotated::new(s, r)
    }).collect()
}

fn image(b: &BoundingBox, rgb: [u8; 3]) -> Raster {
    let mut img = Raster::solid(16, 16, [20, 20, 20]);
    img.fill_box(b, rgb);
    img
}

fn msd() -> Vec<Annotated> {
    let b = BoundingBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
    annotate(
        vec![
            Sample::new("a", "love waiting in the rain", image(&b, [255, 0, 0])).with_label(Stance::Sarcastic),
            Sample::new("b", "a quiet walk in the park", image(&b, [0, 255, 0])).with_label(Stance::NonSarcastic),
            Sample::new("c", "best traffic ever", image(&b, [0, 0, 255])).with_label(Stance::Sarcastic),
            Sample::new("d", "fresh bread for lunch", image(&b, [255, 255, 0])).with_label(Stance::NonSarcastic),
        ],
        Phase::Pretrain,
    )
}

fn msti() -> Vec<Annotated> {
    let b1 = BoundingBox::new(0.3, 0.3, 0.4, 0.4).unwrap();
    let b2 = BoundingBox::new(0.6, 0.6, 0.5, 0.3).unwrap();
    annotate(
        vec![
            Sample::new("t1", "the train driver again", image(&b1, [255, 0, 0]))
                .with_label(Stance::Sarcastic)
                .with_textual_target("train driver")
                .with_visual_target(b1),
            Sample::new("t2", "thanks for the toast", image(&b2, [0, 0, 255]))
                .with_label(Stance::Sarcastic)
                .with_textual_target("toast")
                .with_visual_target(b2),
            Sample::new("t3", "such a fast printer", image(&b1, [0, 255, 0]))
                .with_label(Stance::Sarcastic)
                .with_textual_target("printer"),
        ],
        Phase::Finetune,
    )
}

#[test]
fn handoff_copies_shared_modules_only() {
    let pre = pretrain_msd(&msd(), &config(1, 2), TrainOptions::new(&mut ())).unwrap();
    let fresh = CofiPara::new(config(2, 0)).unwrap();
    let model = finetune_model(FinetuneInit::FromPretrain(&pre.last), &config(2, 0)).unwrap();
    let mut reinitialised = 0;
    for (_, p) in model.params.iter() {
        let from_ckpt = &pre.last.get(&p.name).unwrap().value;
        let from_fresh = &fresh.params.by_name(&p.name).unwrap().value;
        if p.module.is_shared() {
            assert_eq!(&p.value, from_ckpt, "{}", p.name);
        } else {
            assert_eq!(&p.value, from_fresh, "{}", p.name);
            reinitialised += usize::from(&p.value != from_ckpt);
        }
    }
    // random weights differ between seeds; constant gains and biases do not
    assert!(reinitialised > 0);
    let scratch = finetune_model(FinetuneInit::FromScratch, &config(2, 0)).unwrap();
    assert_eq!(scratch.params, fresh.params);
}

#[test]
fn mismatched_checkpoint_lists_tensors() {
    let small = Checkpoint::from_model(&CofiPara::new(config(0, 0)).unwrap(), Phase::Pretrain, 0);
    let mut model = CofiPara::new(TrainConfig { d_model: 12, ..config(0, 0) }).unwrap();
    match load_shared(&mut model, &small) {
        Err(Error::CheckpointMismatch(names)) => {
            assert!(!names.is_empty());
            assert!(names.iter().any(|n| n.starts_with("text_encoder.")));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn frozen_encoder_is_bit_identical_after_training() {
    let init = CofiPara::new(config(3, 0)).unwrap();
    let run = finetune_msti(FinetuneInit::FromScratch, &msti(), &config(3, 3), TrainOptions::new(&mut ())).unwrap();
    for t in &run.last.tensors {
        let before = &init.params.by_name(&t.name).unwrap().value;
        if t.module == ModuleTag::ImageEncoder {
            assert!(!t.trainable);
            assert_eq!(&t.value, before);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let a = pretrain_msd(&msd(), &config(5, 2), TrainOptions::new(&mut ())).unwrap();
    let b = pretrain_msd(&msd(), &config(5, 2), TrainOptions::new(&mut ())).unwrap();
    assert_eq!(a.last, b.last);
    let c = pretrain_msd(&msd(), &config(6, 2), TrainOptions::new(&mut ())).unwrap();
    assert_ne!(a.last, c.last);
}

#[test]
fn finetune_epoch_loss_decreases() {
    let cfg = TrainConfig { learning_rate: 3e-3, batch_size: 3, ..config(7, 8) };
    let mut log = LogCollector::default();
    finetune_msti(FinetuneInit::FromScratch, &msti(), &cfg, TrainOptions::new(&mut log)).unwrap();
    let totals: Vec<f64> = log.steps.iter().map(|s| s.total).collect();
    for w in totals.windows(2) {
        assert!(w[1] < w[0], "{totals:?}");
    }
}

#[test]
fn predict_respects_phase_contract() {
    let pre = pretrain_msd(&msd(), &config(8, 1), TrainOptions::new(&mut ())).unwrap();
    let model = pre.last.to_model().unwrap();
    let data = msd();
    let p = model.predict(&data[0].sample, &data[0].rationales, Phase::Pretrain).unwrap();
    assert!(p.boxes.is_empty());

    let ft = msti();
    let p = model.predict(&ft[0].sample, &ft[0].rationales, Phase::Finetune).unwrap();
    assert_eq!(p.boxes.len(), model.config.n_queries);
    assert!(p.boxes.iter().all(|(_, c)| (0.0..=1.0).contains(c)));
    assert!(p.boxes.windows(2).all(|w| w[0].1 >= w[1].1));
    let again = model.predict(&ft[0].sample, &ft[0].rationales, Phase::Finetune).unwrap();
    assert_eq!(p, again);

    // fine-tuning prediction without a rationale is rejected
    let mut missing = ft[0].rationales.clone();
    missing.r_pos.clear();
    assert!(model.predict(&ft[0].sample, &missing, Phase::Finetune).is_err());
}
