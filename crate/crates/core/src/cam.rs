//! Class scores from global-average-pooled features and class activation maps.
//!
//! A CAM for class `c` is the head-weighted sum of the last-layer feature
//! maps, `M_c(y, x) = sum_k w[c, k] * f[k, y, x]`. Pooling uses the spatial
//! mean, so the class score equals the spatial mean of that class's CAM.

use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};

use crate::bundle::ExplanationBundle;
use crate::ComputeError;

/// A single-class activation grid at conv resolution. Values are raw
/// (unnormalized) weighted sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub class_id: usize,
    /// `[H, W]`
    pub grid: Array2<f64>,
}

impl Cam {
    /// `(H, W)`
    pub fn resolution(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn mean_abs(&self) -> f64 {
        self.grid.iter().map(|v| v.abs()).sum::<f64>() / self.grid.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapScores {
    /// Per-feature spatial means, length K.
    pub pooled: Array1<f64>,
    /// Per-class scores before softmax (no bias), length C.
    pub scores: Array1<f64>,
}

fn check_shapes(features: &ArrayView3<f32>, head: &ArrayView2<f32>) -> Result<(), ComputeError> {
    let (k, h, w) = features.dim();
    if head.ncols() != k {
        return Err(ComputeError::Shape(format!(
            "head has {} columns, features have K = {k}",
            head.ncols()
        )));
    }
    if k == 0 || h == 0 || w == 0 || head.nrows() == 0 {
        return Err(ComputeError::Shape("empty feature maps or head".into()));
    }
    Ok(())
}

pub fn compute_cam(
    features: ArrayView3<f32>,
    head: ArrayView2<f32>,
    class_id: usize,
) -> Result<Cam, ComputeError> {
    check_shapes(&features, &head)?;
    if class_id >= head.nrows() {
        return Err(ComputeError::ClassIndex {
            index: class_id,
            classes: head.nrows(),
        });
    }
    let (_, h, w) = features.dim();
    let mut grid = Array2::<f64>::zeros((h, w));
    for (map, &weight) in features.outer_iter().zip(head.row(class_id)) {
        let weight = f64::from(weight);
        grid.zip_mut_with(&map, |acc, &f| *acc += weight * f64::from(f));
    }
    Ok(Cam { class_id, grid })
}

pub fn class_scores(features: ArrayView3<f32>, head: ArrayView2<f32>) -> Result<GapScores, ComputeError> {
    check_shapes(&features, &head)?;
    let pooled: Array1<f64> = features
        .mapv(f64::from)
        .mean_axis(Axis(2))
        .and_then(|a| a.mean_axis(Axis(1)))
        .expect("non-empty spatial axes");
    let scores = head.mapv(f64::from).dot(&pooled);
    Ok(GapScores { pooled, scores })
}

/// CAM of `class_id` computed from a bundle's stored tensors.
pub fn bundle_cam(bundle: &ExplanationBundle, class_id: usize) -> Result<Cam, ComputeError> {
    compute_cam(bundle.features(), bundle.head(), class_id)
}

/// Indices of the `n` largest probabilities, descending, ties to the smaller
/// index.
pub fn top_n_classes(probabilities: &[f64], n: usize) -> Result<Vec<usize>, ComputeError> {
    if n == 0 || n > probabilities.len() {
        return Err(ComputeError::InvalidArgument(format!(
            "top-n of {n} requested from {} classes",
            probabilities.len()
        )));
    }
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| {
        probabilities[b]
            .total_cmp(&probabilities[a])
            .then(a.cmp(&b))
    });
    order.truncate(n);
    Ok(order)
}

/// Affine min-max rescale to `[0, 1]`. A constant grid maps to zeros.
pub fn normalize_grid(grid: &Array2<f64>) -> Array2<f64> {
    let (min, max) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    if !(span.is_finite() && span > 0.0) {
        return Array2::zeros(grid.dim());
    }
    grid.mapv(|v| (v - min) / span)
}

pub fn normalize_cam(cam: &Cam) -> Cam {
    Cam {
        class_id: cam.class_id,
        grid: normalize_grid(&cam.grid),
    }
}
