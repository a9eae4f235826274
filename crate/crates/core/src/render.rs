//! Heatmap rendering: a fixed blue-green-yellow-red ramp, alpha-blended
//! overlays at image resolution, and labelled comparison strips.

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{GenericImage, Rgb, RgbImage};
use ndarray::Array2;

use crate::perturb::upsample;
use crate::ComputeError;

/// Horizontal gap between strip panels.
pub const GUTTER_PX: u32 = 8;
/// Height of the caption band under each strip panel.
pub const LABEL_BAND_PX: u32 = 20;
pub const DEFAULT_OPACITY: f64 = 0.5;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const TEXT: Rgb<u8> = Rgb([0, 0, 0]);
const GLYPH_SCALE: u32 = 2;

/// `(position, color)` anchors of the heat ramp.
pub const RAMP: [(f64, [u8; 3]); 4] = [
    (0.0, [0, 0, 255]),
    (0.33, [0, 255, 0]),
    (0.66, [255, 255, 0]),
    (1.0, [255, 0, 0]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlaySpec {
    pub opacity: f64,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        OverlaySpec {
            opacity: DEFAULT_OPACITY,
        }
    }
}

impl OverlaySpec {
    pub fn new(opacity: f64) -> Result<Self, ComputeError> {
        if (0.0..=1.0).contains(&opacity) {
            Ok(OverlaySpec { opacity })
        } else {
            Err(ComputeError::InvalidArgument(format!("opacity {opacity} outside [0, 1]")))
        }
    }
}

/// Ramp color for a value in `[0, 1]`, linearly interpolated between the
/// neighbouring anchors and rounded per channel.
pub fn ramp_color(value: f64) -> Option<Rgb<u8>> {
    if !(0.0..=1.0).contains(&value) {
        return None;
    }
    let upper = RAMP.iter().position(|&(p, _)| value <= p).unwrap_or(RAMP.len() - 1).max(1);
    let (p0, c0) = RAMP[upper - 1];
    let (p1, c1) = RAMP[upper];
    let t = (value - p0) / (p1 - p0);
    let mix = |a: u8, b: u8| (f64::from(a) + (f64::from(b) - f64::from(a)) * t).round() as u8;
    Some(Rgb([mix(c0[0], c1[0]), mix(c0[1], c1[1]), mix(c0[2], c1[2])]))
}

/// Colors each cell of a normalized `[H, W]` grid; the result is `W x H`.
pub fn colorize(grid: &Array2<f64>) -> Result<RgbImage, ComputeError> {
    let (h, w) = grid.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in grid.indexed_iter() {
        let color = ramp_color(v).ok_or(ComputeError::OutOfUnitRange {
            value: v,
            index: y * w + x,
        })?;
        out.put_pixel(x as u32, y as u32, color);
    }
    Ok(out)
}

/// Upsamples a normalized grid to the image size, colorizes it and blends
/// `(1 - opacity) * image + opacity * heat`, rounded per channel.
pub fn overlay(image: &RgbImage, grid: &Array2<f64>, spec: &OverlaySpec) -> Result<RgbImage, ComputeError> {
    let (w, h) = image.dimensions();
    let heat = colorize(&upsample(grid, w as usize, h as usize)?)?;
    let a = spec.opacity;
    let mut out = image.clone();
    for (dst, src) in out.pixels_mut().zip(heat.pixels()) {
        for c in 0..3 {
            dst[c] = ((1.0 - a) * f64::from(dst[c]) + a * f64::from(src[c])).round() as u8;
        }
    }
    Ok(out)
}

/// One panel of a comparison strip: a normalized grid and its caption.
#[derive(Debug, Clone)]
pub struct Panel {
    pub grid: Array2<f64>,
    pub label: String,
}

/// Overlays laid out left to right with [`GUTTER_PX`] gaps and a
/// [`LABEL_BAND_PX`] caption band underneath.
pub fn comparison_strip(image: &RgbImage, panels: &[Panel], spec: &OverlaySpec) -> Result<RgbImage, ComputeError> {
    if panels.is_empty() {
        return Err(ComputeError::InvalidArgument("comparison strip needs at least one panel".into()));
    }
    let (w, h) = image.dimensions();
    let n = panels.len() as u32;
    let mut strip = RgbImage::from_pixel(n * w + (n - 1) * GUTTER_PX, h + LABEL_BAND_PX, BACKGROUND);
    for (i, panel) in panels.iter().enumerate() {
        let x0 = i as u32 * (w + GUTTER_PX);
        let tile = overlay(image, &panel.grid, spec)?;
        strip
            .copy_from(&tile, x0, 0)
            .expect("panel fits inside the strip");
        draw_label(&mut strip, &panel.label, x0, h, w);
    }
    Ok(strip)
}

fn draw_label(canvas: &mut RgbImage, text: &str, x0: u32, y0: u32, max_width: u32) {
    let glyph = 8 * GLYPH_SCALE;
    let top = y0 + (LABEL_BAND_PX - glyph) / 2;
    let mut cursor = x0 + 2;
    for ch in text.chars() {
        if cursor + glyph > x0 + max_width {
            break;
        }
        let rows = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')).unwrap_or([0; 8]);
        for (gy, bits) in rows.iter().enumerate() {
            for gx in 0..8u32 {
                if bits & (1 << gx) == 0 {
                    continue;
                }
                for sy in 0..GLYPH_SCALE {
                    for sx in 0..GLYPH_SCALE {
                        canvas.put_pixel(
                            cursor + gx * GLYPH_SCALE + sx,
                            top + gy as u32 * GLYPH_SCALE + sy,
                            TEXT,
                        );
                    }
                }
            }
        }
        cursor += glyph;
    }
}
