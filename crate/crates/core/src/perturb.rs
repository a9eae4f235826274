//! Image-resolution masks derived from explanation maps, matched random
//! baselines, and deletion/retention application.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sdd::SddResult;
use crate::ComputeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Sdd,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Deletion,
    Retention,
}

/// How the random baseline mask is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Same pixel count, sampled uniformly without replacement.
    #[default]
    Scattered,
    /// The explanation mask cyclically translated by a random offset.
    Shifted,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(format!("unknown value {other:?}")),
                }
            }
        }
    };
}

text_enum!(MaskSource { Sdd => "sdd", Random => "random" });
text_enum!(PerturbMode { Deletion => "deletion", Retention => "retention" });
text_enum!(Baseline { Scattered => "scattered", Shifted => "shifted" });

/// A set of selected pixels over a `width x height` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: u32,
    height: u32,
    /// Row-major membership flags.
    selected: Vec<bool>,
    count: usize,
    fraction: f64,
    source: MaskSource,
    seed: Option<u64>,
}

impl Mask {
    fn from_indices(
        width: u32,
        height: u32,
        indices: impl IntoIterator<Item = usize>,
        fraction: f64,
        source: MaskSource,
        seed: Option<u64>,
    ) -> Self {
        let mut selected = vec![false; width as usize * height as usize];
        let mut count = 0;
        for i in indices {
            if !selected[i] {
                selected[i] = true;
                count += 1;
            }
        }
        Mask {
            width,
            height,
            selected,
            count,
            fraction,
            source,
            seed,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.selected[(y * self.width + x) as usize]
    }

    /// Selected pixels as `(x, y)`, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }

    /// Run-length form: alternating run lengths over the row-major pixel
    /// sequence, starting with an unselected run (possibly zero).
    pub fn to_record(&self) -> MaskRecord {
        let mut rle = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for &s in &self.selected {
            if s == current {
                run += 1;
            } else {
                rle.push(run);
                current = s;
                run = 1;
            }
        }
        rle.push(run);
        MaskRecord {
            w: self.width,
            h: self.height,
            fraction: self.fraction,
            source: self.source,
            seed: self.seed,
            rle,
        }
    }

    pub fn from_record(record: &MaskRecord) -> Result<Self, ComputeError> {
        let n = record.w as usize * record.h as usize;
        let total: u64 = record.rle.iter().sum();
        if total != n as u64 {
            return Err(ComputeError::Shape(format!(
                "run lengths cover {total} pixels, mask has {n}"
            )));
        }
        let mut indices = Vec::new();
        let mut pos = 0usize;
        for (i, &run) in record.rle.iter().enumerate() {
            if i % 2 == 1 {
                indices.extend(pos..pos + run as usize);
            }
            pos += run as usize;
        }
        Ok(Mask::from_indices(
            record.w,
            record.h,
            indices,
            record.fraction,
            record.source,
            record.seed,
        ))
    }
}

/// Serialized mask for audit output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub w: u32,
    pub h: u32,
    pub fraction: f64,
    pub source: MaskSource,
    pub seed: Option<u64>,
    pub rle: Vec<u64>,
}

/// Bilinear resize of an `[H, W]` grid to `[target_h, target_w]`.
///
/// Output pixel `i` samples source coordinate `(i + 0.5) * src / dst - 0.5`,
/// clamped to the edge cells.
pub fn upsample(grid: &Array2<f64>, target_w: usize, target_h: usize) -> Result<Array2<f64>, ComputeError> {
    let (src_h, src_w) = grid.dim();
    if src_h == 0 || src_w == 0 {
        return Err(ComputeError::Shape("cannot resample an empty grid".into()));
    }
    if target_w == 0 || target_h == 0 {
        return Err(ComputeError::InvalidArgument(format!(
            "target size {target_w}x{target_h} has zero area"
        )));
    }
    let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let xs = taps(target_w, src_w);
    let ys = taps(target_h, src_h);
    Ok(Array2::from_shape_fn((target_h, target_w), |(y, x)| {
        let (y0, y1, ty) = ys[y];
        let (x0, x1, tx) = xs[x];
        let top = grid[[y0, x0]] * (1.0 - tx) + grid[[y0, x1]] * tx;
        let bottom = grid[[y1, x0]] * (1.0 - tx) + grid[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    }))
}

/// Number of pixels a mask of `fraction` over `n` pixels selects:
/// `ceil(fraction * n)`. Products within 1e-9 of an integer count as that
/// integer so that binary rounding of the fraction cannot add a pixel.
pub fn selection_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() <= 1e-9 {
        nearest
    } else {
        exact.ceil()
    };
    (k as usize).min(n)
}

fn check_fraction(fraction: f64) -> Result<(), ComputeError> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(ComputeError::Fraction(fraction))
    }
}

/// Selects the `ceil(fraction * N)` highest-valued pixels of an
/// image-resolution grid. Ties go to the earlier pixel in row-major order.
pub fn top_fraction_mask(grid: &Array2<f64>, fraction: f64) -> Result<Mask, ComputeError> {
    top_fraction_mask_ranked(grid, None, fraction)
}

/// Like [`top_fraction_mask`], but pixels tied on `grid` are ordered by
/// `tiebreak` (descending) before falling back to row-major order.
pub fn top_fraction_mask_ranked(
    grid: &Array2<f64>,
    tiebreak: Option<&Array2<f64>>,
    fraction: f64,
) -> Result<Mask, ComputeError> {
    check_fraction(fraction)?;
    let (h, w) = grid.dim();
    if h == 0 || w == 0 {
        return Err(ComputeError::Shape("empty grid".into()));
    }
    if let Some(t) = tiebreak {
        if t.dim() != grid.dim() {
            return Err(ComputeError::Shape(format!(
                "tie-break grid is {:?}, ranking grid is {:?}",
                t.dim(),
                grid.dim()
            )));
        }
    }
    let values: Vec<f64> = grid.iter().copied().collect();
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(ComputeError::NonFinite(i));
    }
    let secondary: Vec<f64> = match tiebreak {
        Some(t) => t.iter().copied().collect(),
        None => vec![0.0; values.len()],
    };
    let k = selection_count(fraction, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .total_cmp(&values[a])
            .then(secondary[b].total_cmp(&secondary[a]))
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(Mask::from_indices(w as u32, h as u32, order, fraction, MaskSource::Sdd, None))
}

/// Explanation mask of an SDD result at image resolution: the normalized
/// SDD map is upsampled and its top `fraction` of pixels selected. Pixels
/// whose normalized value underflowed to the same number are ranked by the
/// upsampled divergence, which orders cells identically before
/// exponentiation.
pub fn sdd_mask(sdd: &SddResult, width: u32, height: u32, fraction: f64) -> Result<Mask, ComputeError> {
    let (w, h) = (width as usize, height as usize);
    let heat = upsample(&sdd.normalized_map(), w, h)?;
    let divergence = upsample(&sdd.divergence, w, h)?;
    top_fraction_mask_ranked(&heat, Some(&divergence), fraction)
}

/// Uniformly scattered mask with the same pixel count as `mask`.
pub fn random_mask_like(mask: &Mask, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mask.selected.len();
    let picked = sample(&mut rng, n, mask.count);
    Mask::from_indices(
        mask.width,
        mask.height,
        picked,
        mask.fraction,
        MaskSource::Random,
        Some(seed),
    )
}

/// `mask` translated cyclically by a random offset; shape and count are kept.
pub fn shifted_mask_like(mask: &Mask, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = rng.random_range(0..mask.width);
    let dy = rng.random_range(0..mask.height);
    let (w, h) = (mask.width, mask.height);
    let moved = mask
        .pixels()
        .map(|(x, y)| (((y + dy) % h) * w + (x + dx) % w) as usize)
        .collect::<Vec<_>>();
    Mask::from_indices(w, h, moved, mask.fraction, MaskSource::Random, Some(seed))
}

pub fn baseline_mask(mask: &Mask, baseline: Baseline, seed: u64) -> Mask {
    match baseline {
        Baseline::Scattered => random_mask_like(mask, seed),
        Baseline::Shifted => shifted_mask_like(mask, seed),
    }
}

/// Blacks out the selected pixels (deletion) or everything else (retention).
pub fn apply_mask(image: &RgbImage, mask: &Mask, mode: PerturbMode) -> Result<RgbImage, ComputeError> {
    if image.dimensions() != (mask.width, mask.height) {
        return Err(ComputeError::Shape(format!(
            "mask is {}x{}, image is {}x{}",
            mask.width,
            mask.height,
            image.width(),
            image.height()
        )));
    }
    let mut out = image.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let zero = match mode {
            PerturbMode::Deletion => mask.selected[i],
            PerturbMode::Retention => !mask.selected[i],
        };
        if zero {
            *px = Rgb([0, 0, 0]);
        }
    }
    Ok(out)
}
