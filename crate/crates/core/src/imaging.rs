//! Square bounding-box crops and their augmented variants.

use std::fmt;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{BBox, Detection};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResizeFilter {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub side: u32,
    pub resize_filter: ResizeFilter,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            side: 224,
            resize_filter: ResizeFilter::Bilinear,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::InvalidConfig(format!("crop side {} < 8", self.side)));
        }
        Ok(())
    }
}

/// `"imageId#boxIndex#augIndex"`; augmentation index 0 is the plain crop.
pub fn crop_id(image_id: &str, box_index: usize, aug_index: usize) -> String {
    format!("{image_id}#{box_index}#{aug_index}")
}

/// Key for the whole-image feature of an image (used by the no-detector baseline).
pub fn whole_image_id(image_id: &str) -> String {
    format!("{image_id}#full#0")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropRecord {
    pub crop_id: String,
    pub image_id: String,
    pub box_index: usize,
    pub aug_index: usize,
    pub detector_confidence: f64,
    pub aug_descriptor: Option<AugDescriptor>,
    /// Inherited image label (purity assumption).
    pub label: Option<String>,
    pub pixels: Option<RgbImage>,
}

impl CropRecord {
    /// Crop without pixels, for projects whose embeddings are precomputed.
    pub fn embedding_only(
        image_id: &str,
        box_index: usize,
        aug_index: usize,
        det: &Detection,
    ) -> Self {
        Self {
            crop_id: crop_id(image_id, box_index, aug_index),
            image_id: image_id.to_string(),
            box_index,
            aug_index,
            detector_confidence: det.confidence,
            aug_descriptor: None,
            label: None,
            pixels: None,
        }
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Square source window in pixel coordinates; may extend past the image when
/// the box is larger than the image along one axis (sampled with edge
/// replication).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x0: i64,
    pub y0: i64,
    pub side: i64,
}

pub fn square_window(width: u32, height: u32, bbox: &BBox) -> Result<Window> {
    let (w, h) = (width as f64, height as f64);
    let px0 = round_half_up(bbox.x * w);
    let px1 = round_half_up((bbox.x + bbox.w) * w);
    let py0 = round_half_up(bbox.y * h);
    let py1 = round_half_up((bbox.y + bbox.h) * h);
    let (pw, ph) = (px1 - px0, py1 - py0);
    if pw <= 0 || ph <= 0 {
        return Err(Error::DegenerateBox {
            width: pw,
            height: ph,
        });
    }
    let side = pw.max(ph);
    let place = |start: i64, len: i64, limit: i64| {
        let start = start - (side - len) / 2;
        if side <= limit {
            start.clamp(0, limit - side)
        } else {
            -(side - limit) / 2
        }
    };
    Ok(Window {
        x0: place(px0, pw, width as i64),
        y0: place(py0, ph, height as i64),
        side,
    })
}

fn clamped(img: &RgbImage, x: i64, y: i64) -> &Rgb<u8> {
    let x = x.clamp(0, img.width() as i64 - 1) as u32;
    let y = y.clamp(0, img.height() as i64 - 1) as u32;
    img.get_pixel(x, y)
}

fn bilinear(img: &RgbImage, u: f64, v: f64) -> [u8; 3] {
    let x0 = u.floor();
    let y0 = v.floor();
    let (tx, ty) = (u - x0, v - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let p00 = clamped(img, x0, y0);
    let p10 = clamped(img, x0 + 1, y0);
    let p01 = clamped(img, x0, y0 + 1);
    let p11 = clamped(img, x0 + 1, y0 + 1);
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
        let bottom = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
        let val = top * (1.0 - ty) + bottom * ty;
        out[c] = val.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Resample the square `window` of `img` to `side`×`side`.
pub fn resample(img: &RgbImage, window: Window, side: u32, filter: ResizeFilter) -> RgbImage {
    let scale = window.side as f64 / side as f64;
    RgbImage::from_fn(side, side, |ox, oy| match filter {
        ResizeFilter::Nearest => {
            let sx = window.x0 + ((ox as f64 + 0.5) * scale).floor() as i64;
            let sy = window.y0 + ((oy as f64 + 0.5) * scale).floor() as i64;
            *clamped(img, sx, sy)
        }
        ResizeFilter::Bilinear => {
            let u = window.x0 as f64 + (ox as f64 + 0.5) * scale - 0.5;
            let v = window.y0 as f64 + (oy as f64 + 0.5) * scale - 0.5;
            Rgb(bilinear(img, u, v))
        }
    })
}

/// Cut the box `det` out of `img`, expand it to a square and resize it.
pub fn crop_and_resize(
    image_id: &str,
    box_index: usize,
    img: &RgbImage,
    det: &Detection,
    cfg: &CropConfig,
) -> Result<CropRecord> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::DegenerateBox {
            width: img.width() as i64,
            height: img.height() as i64,
        });
    }
    let window = square_window(img.width(), img.height(), &det.bbox)?;
    let pixels = resample(img, window, cfg.side, cfg.resize_filter);
    Ok(CropRecord {
        pixels: Some(pixels),
        ..CropRecord::embedding_only(image_id, box_index, 0, det)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    Rotate { degrees: f64 },
    FlipHorizontal,
    Contrast { factor: f64 },
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugOp::Rotate { degrees } => write!(f, "rotate({degrees:.4})"),
            AugOp::FlipHorizontal => write!(f, "flip"),
            AugOp::Contrast { factor } => write!(f, "contrast({factor:.4})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugDescriptor {
    pub ops: Vec<AugOp>,
}

impl fmt::Display for AugDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub max_augmentations_per_crop: usize,
    /// Rotation angle is drawn uniformly from ±this many degrees.
    pub max_rotation_degrees: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            max_augmentations_per_crop: 3,
            max_rotation_degrees: 25.0,
            contrast_min: 0.7,
            contrast_max: 1.3,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// Ops for the variant with id `variant_crop_id`: 1 to 3 distinct ops in
    /// random order.
    pub fn sample_ops(&self, variant_crop_id: &str) -> AugDescriptor {
        let mut rng = seed::rng(self.seed, &format!("augment:{variant_crop_id}"));
        let mut kinds = [0u8, 1, 2];
        kinds.shuffle(&mut rng);
        let n = rng.random_range(1..=3usize);
        let ops = kinds[..n]
            .iter()
            .map(|k| match k {
                0 => AugOp::Rotate {
                    degrees: rng
                        .random_range(-self.max_rotation_degrees..=self.max_rotation_degrees),
                },
                1 => AugOp::FlipHorizontal,
                _ => AugOp::Contrast {
                    factor: rng.random_range(self.contrast_min..=self.contrast_max),
                },
            })
            .collect();
        AugDescriptor { ops }
    }
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    let w = img.width();
    RgbImage::from_fn(w, img.height(), |x, y| *img.get_pixel(w - 1 - x, y))
}

/// Rotate about the image center; exposed corners replicate the nearest edge.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = img.width() as f64 / 2.0;
    let cy = img.height() as f64 / 2.0;
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let u = c * dx + s * dy + cx - 0.5;
        let v = -s * dx + c * dy + cy - 0.5;
        Rgb(bilinear(img, u, v))
    })
}

/// Scale each channel's deviation from its mean by `factor`, clamped to [0,255].
pub fn adjust_contrast(img: &RgbImage, factor: f64) -> RgbImage {
    let n = (img.width() as f64 * img.height() as f64).max(1.0);
    let mut mean = [0.0f64; 3];
    for p in img.pixels() {
        for c in 0..3 {
            mean[c] += p[c] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            let v = mean[c] + factor * (p[c] as f64 - mean[c]);
            p[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn apply_ops(img: &RgbImage, ops: &[AugOp]) -> RgbImage {
    ops.iter().fold(img.clone(), |acc, op| match *op {
        AugOp::Rotate { degrees } => rotate(&acc, degrees),
        AugOp::FlipHorizontal => flip_horizontal(&acc),
        AugOp::Contrast { factor } => adjust_contrast(&acc, factor),
    })
}

/// Produce `k` augmented variants (aug indices `1..=k`) of `crop`. Variants
/// depend only on their crop id and the policy seed.
pub fn augment(
    crop: &CropRecord,
    policy: &AugmentationPolicy,
    k: usize,
) -> Result<Vec<CropRecord>> {
    if k > policy.max_augmentations_per_crop {
        return Err(Error::InvalidConfig(format!(
            "requested {k} augmentations, policy allows {}",
            policy.max_augmentations_per_crop
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let pixels = crop
        .pixels
        .as_ref()
        .ok_or_else(|| Error::NoPixels(crop.crop_id.clone()))?;
    Ok((1..=k)
        .map(|aug_index| augmented_variant(crop, pixels, policy, aug_index))
        .collect())
}

pub(crate) fn augmented_variant(
    crop: &CropRecord,
    pixels: &RgbImage,
    policy: &AugmentationPolicy,
    aug_index: usize,
) -> CropRecord {
    let id = crop_id(&crop.image_id, crop.box_index, aug_index);
    let desc = policy.sample_ops(&id);
    CropRecord {
        crop_id: id,
        image_id: crop.image_id.clone(),
        box_index: crop.box_index,
        aug_index,
        detector_confidence: crop.detector_confidence,
        pixels: Some(apply_ops(pixels, &desc.ops)),
        aug_descriptor: Some(desc),
        label: crop.label.clone(),
    }
}
