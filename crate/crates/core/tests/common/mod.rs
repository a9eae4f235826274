//! Generators for the checked-in fixture bundles under `tests/fixtures`.
//!
//! `mock8` pairs with the brightness mock scorer: 16x16 images, four classes
//! labelled `class_0..class_3`, stored probabilities equal to the mock's
//! output on the unmasked image. `ranked` has 530 classes with five clear
//! leaders. `model8` is the synthetic fixture model's set for seed 0.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use xfr_core::bundle::{argmax, write_bundle, ExplanationBundle, TensorBlob, DEFAULT_IMAGE_FILE};
use xfr_core::eval::{perturb_bundle, EvalConfig};
use xfr_core::perturb::{MaskSource, PerturbMode};
use xfr_core::fixture::{export_set, FixtureModel};
use xfr_core::scorer::server::{BrightnessModel, ScoringModel};

pub const MOCK_SIDE: u32 = 16;
pub const MOCK_GRID: usize = 4;
pub const RANKED_LEADERS: [(usize, f64); 5] = [(4, 0.99025), (333, 0.00118), (482, 0.00103), (475, 0.00089), (518, 0.00087)];
pub const RANKED_CLASSES: usize = 530;
pub const MODEL_SEED: u64 = 0;
pub const MODEL_COUNT: usize = 8;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn gray(v: u8) -> Rgb<u8> {
    Rgb([v, v, v])
}

/// The eight mock images, by id.
pub fn mock_images() -> Vec<(String, RgbImage)> {
    let s = MOCK_SIDE;
    let images = vec![
        RgbImage::from_pixel(s, s, gray(200)),
        RgbImage::from_pixel(s, s, gray(160)),
        RgbImage::from_pixel(s, s, gray(90)),
        RgbImage::from_pixel(s, s, gray(40)),
        RgbImage::from_fn(s, s, |x, _| gray(if x < s / 2 { 255 } else { 0 })),
        RgbImage::from_fn(s, s, |_, y| gray(if y < s / 2 { 255 } else { 0 })),
        RgbImage::from_fn(s, s, |x, y| gray(if x < s / 2 && y < s / 2 { 255 } else { 20 })),
        RgbImage::from_fn(s, s, |x, _| gray((x * 17) as u8)),
    ];
    images
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("m{i:02}"), img))
        .collect()
}

/// Two features per cell: mean brightness and its complement.
pub fn mock_bundle(image: RgbImage) -> ExplanationBundle {
    let cell = MOCK_SIDE / MOCK_GRID as u32;
    let mut bright = vec![0f32; MOCK_GRID * MOCK_GRID];
    for (x, y, px) in image.enumerate_pixels() {
        let i = (y / cell) as usize * MOCK_GRID + (x / cell) as usize;
        bright[i] += px.0.iter().map(|&v| f32::from(v)).sum::<f32>() / (765.0 * (cell * cell) as f32);
    }
    let mut features = bright.clone();
    features.extend(bright.iter().map(|b| 1.0 - b));
    let head = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.5, 0.2, 0.3];
    let model = BrightnessModel::with_classes(4);
    let probabilities = model.probabilities(&image).unwrap();
    ExplanationBundle {
        image_file: DEFAULT_IMAGE_FILE.into(),
        image,
        feature_maps: TensorBlob::new(vec![2, MOCK_GRID, MOCK_GRID], features).unwrap(),
        head_weights: TensorBlob::new(vec![4, 2], head).unwrap(),
        predicted_class: argmax(&probabilities),
        probabilities,
        class_labels: model.classes(),
        true_class: None,
    }
}

pub fn mock_set() -> Vec<(String, ExplanationBundle)> {
    mock_images()
        .into_iter()
        .map(|(id, img)| (id, mock_bundle(img)))
        .collect()
}

/// 530 classes; the five leaders hold almost all mass and the remainder is
/// spread evenly below the smallest leader.
pub fn ranked_bundle() -> ExplanationBundle {
    let leaders_mass: f64 = RANKED_LEADERS.iter().map(|l| l.1).sum();
    let rest = (1.0 - leaders_mass) / (RANKED_CLASSES - RANKED_LEADERS.len()) as f64;
    let mut probabilities = vec![rest; RANKED_CLASSES];
    for &(i, p) in &RANKED_LEADERS {
        probabilities[i] = p;
    }
    let features: Vec<f32> = (0..2 * 2 * 2).map(|i| (i % 5) as f32 * 0.25).collect();
    let head: Vec<f32> = (0..RANKED_CLASSES * 2)
        .map(|i| ((i * 37) % 11) as f32 / 10.0 - 0.5)
        .collect();
    ExplanationBundle {
        image_file: DEFAULT_IMAGE_FILE.into(),
        image: RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 30) as u8, (y * 30) as u8, 90])),
        feature_maps: TensorBlob::new(vec![2, 2, 2], features).unwrap(),
        head_weights: TensorBlob::new(vec![RANKED_CLASSES, 2], head).unwrap(),
        predicted_class: 4,
        probabilities,
        class_labels: (0..RANKED_CLASSES).map(|i| format!("subject_{i}")).collect(),
        true_class: Some(4),
    }
}

/// Writes every fixture set under `root`.
pub fn write_fixtures(root: &Path) {
    for (id, bundle) in mock_set() {
        write_bundle(&bundle, root.join("mock8").join(id)).unwrap();
    }
    write_bundle(&ranked_bundle(), root.join("ranked")).unwrap();
    export_set(&FixtureModel::new(), root.join("model8"), MODEL_COUNT, MODEL_SEED).unwrap();
}

/// Mock probabilities for an image whose pixels inside `keep` survive and
/// the rest are black.
pub fn oracle_probs(image: &RgbImage, keep: impl Fn(u32, u32) -> bool) -> [f64; 4] {
    let mut total = 0u64;
    for (x, y, px) in image.enumerate_pixels() {
        if keep(x, y) {
            total += px.0.iter().map(|&v| u64::from(v)).sum::<u64>();
        }
    }
    let n = u64::from(image.width() * image.height());
    let b = total as f64 / (n * 765) as f64;
    let rest = (1.0 - b) / 3.0;
    [b, rest, rest, rest]
}

pub fn first_max(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

pub fn oracle_records(id: &str, bundle: &ExplanationBundle, cfg: &EvalConfig) -> Vec<(PerturbMode, MaskSource, f64, bool)> {
    let set = perturb_bundle(id, bundle, cfg).unwrap();
    let top = bundle.predicted_class;
    let original = bundle.probabilities[top];
    let mut out = Vec::new();
    for mode in [PerturbMode::Deletion, PerturbMode::Retention] {
        for (source, mask) in [(MaskSource::Sdd, &set.sdd_mask), (MaskSource::Random, &set.random_mask)] {
            let keep = |x, y| match mode {
                PerturbMode::Deletion => !mask.contains(x, y),
                PerturbMode::Retention => mask.contains(x, y),
            };
            let p = oracle_probs(&bundle.image, keep);
            out.push((mode, source, 100.0 * (original - p[top]), first_max(&p) != top));
        }
    }
    out
}

