//! Synthetic datasets: coloured rectangles on a dark background with short
//! texts, written as PNG files plus JSONL.

use std::path::Path;

use cofipara_core::{BoundingBox, Raster, Stance};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{save_image, write_records, Record};
use crate::error::Result;

const BACKGROUND: [u8; 3] = [20, 20, 20];
const PALETTE: [[u8; 3]; 6] = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0], [255, 0, 255], [0, 255, 255]];

const MSD_TEXTS: [(&str, Stance); 4] = [
    ("what a lovely monday morning", Stance::Sarcastic),
    ("the cat sleeps on the sofa", Stance::NonSarcastic),
    ("great service as always", Stance::Sarcastic),
    ("we planted tomatoes today", Stance::NonSarcastic),
];

const MSTI_TEXTS: [(&str, &str); 4] = [
    ("the dlr train driver is late again", "train driver"),
    ("great job by the weather app", "weather app"),
    ("thanks mom for the burnt toast", "burnt toast"),
    ("my laptop loves crashing", "laptop"),
];

const MSTI_BOXES: [(f64, f64, f64, f64); 4] =
    [(0.3, 0.3, 0.4, 0.4), (0.7, 0.6, 0.3, 0.5), (0.5, 0.5, 0.6, 0.3), (0.35, 0.7, 0.5, 0.4)];

fn painted(size: usize, boxes: &[(BoundingBox, [u8; 3])]) -> Raster {
    let mut img = Raster::solid(size, size, BACKGROUND);
    for (b, c) in boxes {
        img.fill_box(b, *c);
    }
    img
}

fn record(id: &str, text: &str, image_path: &str) -> Record {
    Record {
        id: id.into(),
        text: text.into(),
        image_path: image_path.into(),
        msd_label: None,
        textual_targets: Vec::new(),
        visual_targets: Vec::new(),
        rationale_pos: None,
        rationale_neg: None,
    }
}

/// The small memorisation set: 4 labelled records in `msd.jsonl` and 4 target
/// records, one box and one textual target each, in `msti.jsonl`. Images go
/// to `dir/images`.
pub fn write_overfit(dir: &Path, image_size: usize) -> Result<()> {
    let images = dir.join("images");
    let mut msd = Vec::new();
    for (i, (text, label)) in MSD_TEXTS.iter().enumerate() {
        let (cx, cy, w, h) = MSTI_BOXES[i];
        let img = painted(image_size, &[(BoundingBox::new(cx, cy, w, h)?, PALETTE[i])]);
        let name = format!("msd_{i}.png");
        save_image(&images.join(&name), &img)?;
        msd.push(Record { msd_label: Some(*label), ..record(&format!("msd{i}"), text, &name) });
    }
    let mut msti = Vec::new();
    for (i, (text, target)) in MSTI_TEXTS.iter().enumerate() {
        let (cx, cy, w, h) = MSTI_BOXES[i];
        let b = BoundingBox::new(cx, cy, w, h)?;
        let img = painted(image_size, &[(b, PALETTE[i])]);
        let name = format!("msti_{i}.png");
        save_image(&images.join(&name), &img)?;
        msti.push(Record {
            msd_label: Some(Stance::Sarcastic),
            textual_targets: vec![(*target).into()],
            visual_targets: vec![b],
            ..record(&format!("msti{i}"), text, &name)
        });
    }
    write_records(&dir.join("msd.jsonl"), &msd)?;
    write_records(&dir.join("msti.jsonl"), &msti)
}

const WORDS: [&str; 12] =
    ["sunny", "monday", "train", "coffee", "traffic", "meeting", "rain", "printer", "queue", "wifi", "pizza", "deadline"];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..7);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn random_box(rng: &mut ChaCha8Rng, min_side: f64, max_side: f64) -> BoundingBox {
    let w = rng.random_range(min_side..max_side);
    let h = rng.random_range(min_side..max_side);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BoundingBox::new(cx, cy, w, h).expect("box inside the unit square")
}

/// `n_msd` labelled records and `n_msti` target records with random texts
/// and boxes, written to `msd.jsonl` and `msti.jsonl`.
pub fn write_random(dir: &Path, n_msd: usize, n_msti: usize, image_size: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = dir.join("images");
    let mut msd = Vec::new();
    for i in 0..n_msd {
        let b = random_box(&mut rng, 0.1, 0.5);
        let name = format!("msd_{i}.png");
        save_image(&images.join(&name), &painted(image_size, &[(b, PALETTE[i % PALETTE.len()])]))?;
        let label = if i % 2 == 0 { Stance::Sarcastic } else { Stance::NonSarcastic };
        msd.push(Record { msd_label: Some(label), ..record(&format!("msd{i}"), &random_text(&mut rng), &name) });
    }
    let mut msti = Vec::new();
    for i in 0..n_msti {
        let text = random_text(&mut rng);
        let target = text.split(' ').nth(1).unwrap_or("x").to_string();
        let b = random_box(&mut rng, 0.1, 0.5);
        let name = format!("msti_{i}.png");
        save_image(&images.join(&name), &painted(image_size, &[(b, PALETTE[i % PALETTE.len()])]))?;
        msti.push(Record {
            msd_label: Some(Stance::Sarcastic),
            textual_targets: vec![target],
            visual_targets: vec![b],
            ..record(&format!("msti{i}"), &text, &name)
        });
    }
    write_records(&dir.join("msd.jsonl"), &msd)?;
    write_records(&dir.join("msti.jsonl"), &msti)
}

/// Re-annotation fixture: `n` target records, each with one small box; the
/// records listed in `large` get an extra box of `large_side` squared area.
/// Written to `reannotate.jsonl`. Returns the ids carrying a large box.
pub fn write_reannotation(dir: &Path, n: usize, large: &[usize], large_side: f64, image_size: usize) -> Result<Vec<String>> {
    let images = dir.join("images");
    let mut recs = Vec::new();
    let mut ids = Vec::new();
    for i in 0..n {
        let small = BoundingBox::new(0.2, 0.2, 0.1, 0.1)?;
        let mut boxes = vec![small];
        if large.contains(&i) {
            boxes.push(BoundingBox::new(0.6, 0.6, large_side, large_side)?);
            ids.push(format!("r{i:02}"));
        }
        let name = format!("r_{i}.png");
        let painted_boxes: Vec<_> = boxes.iter().enumerate().map(|(k, b)| (*b, PALETTE[k])).collect();
        save_image(&images.join(&name), &painted(image_size, &painted_boxes))?;
        recs.push(Record {
            msd_label: Some(Stance::Sarcastic),
            visual_targets: boxes,
            ..record(&format!("r{i:02}"), "look at this sign", &name)
        });
    }
    write_records(&dir.join("reannotate.jsonl"), &recs)?;
    Ok(ids)
}
