//! A small deterministic CAM-style classifier over synthetic images, used to
//! produce explanation bundles with known structure and to answer scorer
//! requests for them.
//!
//! Images are 56x56: a gray noisy background, a skin-colored face ellipse,
//! and a small square in the color of the subject class. Some images carry a
//! second, smaller square in another class color as a distractor. Features
//! are color detectors (class colors, skin, background, black) average-pooled
//! over 8x8 cells, so the conv grid is 7x7. Class scores are the global
//! average pool of the features times the head weights, plus a bias, and
//! probabilities are their softmax.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::{argmax, write_bundle, BundleError, ExplanationBundle, TensorBlob, DEFAULT_IMAGE_FILE};
use crate::cam::class_scores;
use crate::scorer::server::ScoringModel;

pub const IMAGE_SIZE: u32 = 56;
pub const CELL: u32 = 8;
pub const GRID: usize = (IMAGE_SIZE / CELL) as usize;

pub const CLASS_LABELS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
const CLASS_COLORS: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 180, 60],
    [50, 70, 220],
    [230, 210, 40],
    [200, 50, 200],
    [40, 200, 210],
];
const SKIN: [u8; 3] = [225, 180, 150];
const BACKGROUND: [u8; 3] = [120, 120, 120];

/// Per-class liking for skin, so that competitors share a face response of
/// different strength.
const SKIN_AFFINITY: [f32; 6] = [1.2, 1.0, 1.4, 0.8, 1.1, 0.9];
/// Response of each class to black pixels, so that heavily blanked inputs
/// drift toward some classes the way a trained network's do.
const DARK_AFFINITY: [f32; 6] = [0.0, 4.0, 1.0, 3.0, 0.5, 2.0];
const BIAS: [f64; 6] = [0.0; 6];

const DETECTOR_SIGMA: f64 = 0.15;
const OWN_COLOR_WEIGHT: f32 = 150.0;
const OTHER_COLOR_WEIGHT: f32 = -20.0;
const SKIN_WEIGHT: f32 = 6.0;

#[derive(Debug, Clone)]
pub struct FixtureModel {
    prototypes: Vec<[f64; 3]>,
    head: Array2<f32>,
}

impl Default for FixtureModel {
    fn default() -> Self {
        Self::new()
    }
}

impl FixtureModel {
    pub fn new() -> Self {
        let unit = |c: [u8; 3]| c.map(|v| f64::from(v) / 255.0);
        let mut prototypes: Vec<[f64; 3]> = CLASS_COLORS.iter().map(|&c| unit(c)).collect();
        prototypes.push(unit(SKIN));
        prototypes.push(unit(BACKGROUND));
        prototypes.push([0.0; 3]);

        let classes = CLASS_COLORS.len();
        let head = Array2::from_shape_fn((classes, prototypes.len()), |(c, k)| match k {
            k if k == c => OWN_COLOR_WEIGHT,
            k if k < classes => OTHER_COLOR_WEIGHT,
            k if k == classes => SKIN_WEIGHT * SKIN_AFFINITY[c],
            k if k == classes + 2 => DARK_AFFINITY[c],
            _ => 0.0,
        });
        FixtureModel { prototypes, head }
    }

    pub fn num_classes(&self) -> usize {
        self.head.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.prototypes.len()
    }

    pub fn head(&self) -> &Array2<f32> {
        &self.head
    }

    /// `[K, 7, 7]` pooled detector responses of a 56x56 image.
    pub fn features(&self, image: &RgbImage) -> Result<Array3<f32>, String> {
        if image.dimensions() != (IMAGE_SIZE, IMAGE_SIZE) {
            return Err(format!(
                "fixture model expects {IMAGE_SIZE}x{IMAGE_SIZE} images, got {}x{}",
                image.width(),
                image.height()
            ));
        }
        let k = self.prototypes.len();
        let mut sums = Array3::<f64>::zeros((k, GRID, GRID));
        let denom = 2.0 * DETECTOR_SIGMA * DETECTOR_SIGMA;
        for (x, y, px) in image.enumerate_pixels() {
            let rgb = px.0.map(|v| f64::from(v) / 255.0);
            let (gy, gx) = ((y / CELL) as usize, (x / CELL) as usize);
            for (i, p) in self.prototypes.iter().enumerate() {
                let d2: f64 = rgb.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                sums[[i, gy, gx]] += (-d2 / denom).exp();
            }
        }
        let cell_area = f64::from(CELL * CELL);
        Ok(sums.mapv(|s| (s / cell_area) as f32))
    }

    /// Features plus softmax probabilities of an image.
    pub fn forward(&self, image: &RgbImage) -> Result<(Array3<f32>, Vec<f64>), String> {
        let features = self.features(image)?;
        let gap = class_scores(features.view(), self.head.view()).map_err(|e| e.to_string())?;
        let logits: Vec<f64> = gap.scores.iter().zip(BIAS).map(|(s, b)| s + b).collect();
        Ok((features, softmax(&logits)))
    }

    pub fn bundle(&self, image: RgbImage, true_class: Option<usize>) -> Result<ExplanationBundle, String> {
        let (features, probabilities) = self.forward(&image)?;
        let feature_maps = TensorBlob::new(features.shape().to_vec(), features.iter().copied().collect())
            .map_err(|e| e.to_string())?;
        let head_weights = TensorBlob::new(self.head.shape().to_vec(), self.head.iter().copied().collect())
            .map_err(|e| e.to_string())?;
        Ok(ExplanationBundle {
            image_file: DEFAULT_IMAGE_FILE.to_string(),
            image,
            feature_maps,
            head_weights,
            predicted_class: argmax(&probabilities),
            probabilities,
            class_labels: CLASS_LABELS.iter().map(|s| s.to_string()).collect(),
            true_class,
        })
    }
}

impl ScoringModel for FixtureModel {
    fn classes(&self) -> Vec<String> {
        CLASS_LABELS.iter().map(|s| s.to_string()).collect()
    }

    fn probabilities(&self, image: &RgbImage) -> Result<Vec<f64>, String> {
        self.forward(image).map(|(_, p)| p)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], spread: i32) -> Rgb<u8> {
    Rgb(base.map(|v| (i32::from(v) + rng.random_range(-spread..=spread)).clamp(0, 255) as u8))
}

fn fill_square(img: &mut RgbImage, rng: &mut ChaCha8Rng, x0: u32, y0: u32, side: u32, color: [u8; 3]) {
    for y in y0..(y0 + side).min(IMAGE_SIZE) {
        for x in x0..(x0 + side).min(IMAGE_SIZE) {
            img.put_pixel(x, y, jitter(rng, color, 6));
        }
    }
}

/// Synthetic image of `class`, fully determined by `(class, seed)`.
pub fn synth_image(class: usize, seed: u64) -> RgbImage {
    assert!(class < CLASS_COLORS.len(), "fixture class {class} out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = IMAGE_SIZE as f64;
    let mut img = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE);

    let cx = size / 2.0 + rng.random_range(-3.0..=3.0);
    let cy = size / 2.0 + rng.random_range(-3.0..=3.0);
    let rx = rng.random_range(14.0..=18.0);
    let ry = rng.random_range(18.0..=22.0);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
        *px = if dx * dx + dy * dy <= 1.0 {
            jitter(&mut rng, SKIN, 6)
        } else {
            jitter(&mut rng, BACKGROUND, 8)
        };
    }

    // The class square sits inside the face, away from its rim.
    let side: u32 = rng.random_range(6..=12);
    let half = f64::from(side) / 2.0;
    let sx = cx + rng.random_range(-0.5..=0.5) * (rx - half);
    let sy = cy + rng.random_range(-0.5..=0.5) * (ry - half);
    let x0 = (sx - half).round().clamp(0.0, size - f64::from(side)) as u32;
    let y0 = (sy - half).round().clamp(0.0, size - f64::from(side)) as u32;
    fill_square(&mut img, &mut rng, x0, y0, side, CLASS_COLORS[class]);

    if rng.random_bool(0.5) {
        let other = (class + rng.random_range(1..CLASS_COLORS.len())) % CLASS_COLORS.len();
        let side: u32 = rng.random_range(3..=5);
        let x0 = rng.random_range(0..IMAGE_SIZE - side);
        let y0 = rng.random_range(0..IMAGE_SIZE - side);
        fill_square(&mut img, &mut rng, x0, y0, side, CLASS_COLORS[other]);
    }
    img
}

/// Seed of the `index`-th image of a set generated from `seed`.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Bundle id of the `index`-th bundle of an exported set.
pub fn bundle_id(index: usize) -> String {
    format!("b{index:04}")
}

/// The `index`-th bundle of a set: class `index % 6`.
pub fn fixture_bundle(model: &FixtureModel, seed: u64, index: usize) -> ExplanationBundle {
    let class = index % model.num_classes();
    model
        .bundle(synth_image(class, image_seed(seed, index)), Some(class))
        .expect("synthetic images have the model's input size")
}

/// Writes `count` bundles into `dir/b0000`, `dir/b0001`, ...
pub fn export_set(
    model: &FixtureModel,
    dir: impl AsRef<Path>,
    count: usize,
    seed: u64,
) -> Result<Vec<PathBuf>, BundleError> {
    let dir = dir.as_ref();
    (0..count)
        .map(|i| {
            let path = dir.join(bundle_id(i));
            write_bundle(&fixture_bundle(model, seed, i), &path)?;
            Ok(path)
        })
        .collect()
}
