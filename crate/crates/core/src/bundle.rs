//! On-disk container for one model decision on one image.
//!
//! A bundle is a directory holding `manifest.json`, one raw little-endian
//! `f32` blob per tensor and a lossless RGB image. Feature maps are laid out
//! `[K, H, W]` and classifier-head weights `[C, K]`; the head bias is not
//! stored.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, RgbImage};
use ndarray::{ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_MAPS_FILE: &str = "feature_maps.f32";
pub const HEAD_WEIGHTS_FILE: &str = "head_weights.f32";
pub const DEFAULT_IMAGE_FILE: &str = "image.png";

/// Tolerance on `|sum(probabilities) - 1|`.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file for {field}: {path}")]
    MissingFile { field: &'static str, path: PathBuf },

    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("version: unsupported bundle format version {0}")]
    Version(u32),

    #[error("{field} byte length mismatch: shape {shape:?} needs {expected} bytes, found {actual}")]
    ByteLength {
        field: &'static str,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{field}: {message}")]
    Shape {
        field: &'static str,
        message: String,
    },

    #[error("{field}: non-finite value at flat index {index}")]
    NonFinite { field: &'static str, index: usize },

    #[error("probabilities sum {sum}")]
    ProbabilitySum { sum: f64 },

    #[error("probabilities: value {value} at index {index} outside [0, 1]")]
    ProbabilityRange { index: usize, value: f64 },

    #[error("{field}: class index {index} out of range for {classes} classes")]
    ClassIndex {
        field: &'static str,
        index: usize,
        classes: usize,
    },

    #[error("predicted_class: {predicted} is not the argmax of probabilities ({argmax})")]
    PredictedNotArgmax { predicted: usize, argmax: usize },

    #[error("image: {0}")]
    Image(String),
}

impl BundleError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        BundleError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A dense `f32` tensor stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorBlob {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, BundleError> {
        Self::checked("tensor", shape, data)
    }

    fn checked(field: &'static str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, BundleError> {
        if shape.contains(&0) {
            return Err(BundleError::Shape {
                field,
                message: format!("shape {shape:?} has a zero dimension"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(BundleError::ByteLength {
                field,
                expected: expected * 4,
                actual: data.len() * 4,
                shape,
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(BundleError::NonFinite { field, index });
        }
        Ok(TensorBlob { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_bytes(field: &'static str, shape: Vec<usize>, bytes: &[u8]) -> Result<Self, BundleError> {
        let expected = shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(BundleError::ByteLength {
                field,
                shape,
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::checked(field, shape, data)
    }
}

/// Everything the engine needs about one classifier decision on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationBundle {
    /// Image file name relative to the bundle directory.
    pub image_file: String,
    pub image: RgbImage,
    /// `[K, H, W]` activations of the last convolutional layer.
    pub feature_maps: TensorBlob,
    /// `[C, K]` output-layer weights.
    pub head_weights: TensorBlob,
    pub probabilities: Vec<f64>,
    pub class_labels: Vec<String>,
    pub true_class: Option<usize>,
    pub predicted_class: usize,
}

impl ExplanationBundle {
    pub fn num_classes(&self) -> usize {
        self.head_weights.shape[0]
    }

    pub fn num_features(&self) -> usize {
        self.feature_maps.shape[0]
    }

    /// Conv-layer resolution as `(H, W)`.
    pub fn resolution(&self) -> (usize, usize) {
        (self.feature_maps.shape[1], self.feature_maps.shape[2])
    }

    /// Image size as `(width, height)`.
    pub fn image_size(&self) -> (u32, u32) {
        self.image.dimensions()
    }

    pub fn features(&self) -> ArrayView3<'_, f32> {
        let s = &self.feature_maps.shape;
        ArrayView3::from_shape((s[0], s[1], s[2]), &self.feature_maps.data)
            .expect("feature_maps validated as [K, H, W]")
    }

    pub fn head(&self) -> ArrayView2<'_, f32> {
        let s = &self.head_weights.shape;
        ArrayView2::from_shape((s[0], s[1]), &self.head_weights.data)
            .expect("head_weights validated as [C, K]")
    }

    /// Checks every cross-field invariant.
    pub fn validate(&self) -> Result<(), BundleError> {
        let fm = &self.feature_maps.shape;
        if fm.len() != 3 {
            return Err(BundleError::Shape {
                field: "feature_maps",
                message: format!("expected rank 3 [K, H, W], got {fm:?}"),
            });
        }
        let hw = &self.head_weights.shape;
        if hw.len() != 2 {
            return Err(BundleError::Shape {
                field: "head_weights",
                message: format!("expected rank 2 [C, K], got {hw:?}"),
            });
        }
        if hw[1] != fm[0] {
            return Err(BundleError::Shape {
                field: "head_weights",
                message: format!("K = {} does not match feature_maps K = {}", hw[1], fm[0]),
            });
        }

        for (index, &value) in self.probabilities.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(BundleError::ProbabilityRange { index, value });
            }
        }
        let sum: f64 = self.probabilities.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(BundleError::ProbabilitySum { sum });
        }

        let classes = hw[0];
        if self.probabilities.len() != classes {
            return Err(BundleError::Shape {
                field: "probabilities",
                message: format!("length {} does not match C = {classes}", self.probabilities.len()),
            });
        }
        if self.class_labels.len() != classes {
            return Err(BundleError::Shape {
                field: "class_labels",
                message: format!("length {} does not match C = {classes}", self.class_labels.len()),
            });
        }
        if let Some(t) = self.true_class {
            if t >= classes {
                return Err(BundleError::ClassIndex {
                    field: "true_class",
                    index: t,
                    classes,
                });
            }
        }
        if self.predicted_class >= classes {
            return Err(BundleError::ClassIndex {
                field: "predicted_class",
                index: self.predicted_class,
                classes,
            });
        }
        let argmax = argmax(&self.probabilities);
        if self.probabilities[self.predicted_class] != self.probabilities[argmax] {
            return Err(BundleError::PredictedNotArgmax {
                predicted: self.predicted_class,
                argmax,
            });
        }
        let (w, h) = self.image.dimensions();
        if w == 0 || h == 0 {
            return Err(BundleError::Image("image has zero area".into()));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the smaller index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    image: String,
    image_size: [u32; 2],
    feature_maps: BlobRef,
    head_weights: BlobRef,
    probabilities: Vec<f64>,
    class_labels: Vec<String>,
    true_class: Option<usize>,
    predicted_class: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    file: String,
    shape: Vec<usize>,
}

fn read_file(field: &'static str, path: &Path) -> Result<Vec<u8>, BundleError> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            BundleError::MissingFile {
                field,
                path: path.to_path_buf(),
            }
        } else {
            BundleError::io(path, e)
        }
    })
}

fn decode_rgb8(bytes: &[u8]) -> Result<RgbImage, BundleError> {
    let img = image::load_from_memory(bytes).map_err(|e| BundleError::Image(e.to_string()))?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_) => {
            Ok(img.to_rgb8())
        }
        other => Err(BundleError::Image(format!(
            "expected 8 bits per channel, got {:?}",
            other.color()
        ))),
    }
}

/// Reads and fully validates the bundle stored in `dir`.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<ExplanationBundle, BundleError> {
    let dir = dir.as_ref();
    let manifest_bytes = read_file("manifest", &dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != FORMAT_VERSION {
        return Err(BundleError::Version(manifest.version));
    }

    let fm_bytes = read_file("feature_maps", &dir.join(&manifest.feature_maps.file))?;
    let feature_maps = TensorBlob::from_le_bytes("feature_maps", manifest.feature_maps.shape, &fm_bytes)?;
    let hw_bytes = read_file("head_weights", &dir.join(&manifest.head_weights.file))?;
    let head_weights = TensorBlob::from_le_bytes("head_weights", manifest.head_weights.shape, &hw_bytes)?;

    let image_bytes = read_file("image", &dir.join(&manifest.image))?;
    let image = decode_rgb8(&image_bytes)?;
    let [w, h] = manifest.image_size;
    if image.dimensions() != (w, h) {
        return Err(BundleError::Shape {
            field: "image_size",
            message: format!(
                "manifest declares {w}x{h}, image is {}x{}",
                image.width(),
                image.height()
            ),
        });
    }

    let bundle = ExplanationBundle {
        image_file: manifest.image,
        image,
        feature_maps,
        head_weights,
        probabilities: manifest.probabilities,
        class_labels: manifest.class_labels,
        true_class: manifest.true_class,
        predicted_class: manifest.predicted_class,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` into `dir`, creating the directory if needed.
pub fn write_bundle(bundle: &ExplanationBundle, dir: impl AsRef<Path>) -> Result<(), BundleError> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| BundleError::io(dir, e))?;

    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| BundleError::io(&path, e))
    };
    write(FEATURE_MAPS_FILE, &bundle.feature_maps.to_le_bytes())?;
    write(HEAD_WEIGHTS_FILE, &bundle.head_weights.to_le_bytes())?;

    let image_path = dir.join(&bundle.image_file);
    bundle
        .image
        .save_with_format(&image_path, image::ImageFormat::Png)
        .map_err(|e| BundleError::Image(format!("{}: {e}", image_path.display())))?;

    let (w, h) = bundle.image.dimensions();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        image: bundle.image_file.clone(),
        image_size: [w, h],
        feature_maps: BlobRef {
            file: FEATURE_MAPS_FILE.into(),
            shape: bundle.feature_maps.shape.clone(),
        },
        head_weights: BlobRef {
            file: HEAD_WEIGHTS_FILE.into(),
            shape: bundle.head_weights.shape.clone(),
        },
        probabilities: bundle.probabilities.clone(),
        class_labels: bundle.class_labels.clone(),
        true_class: bundle.true_class,
        predicted_class: bundle.predicted_class,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write(MANIFEST_FILE, json.as_bytes())
}
