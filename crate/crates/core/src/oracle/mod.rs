//! Text and image encoders of a vision-language model behind one interface.
//!
//! Two backends exist: a deterministic stub used by every desk-scale run and
//! test, and (behind the `clip` feature) a CLIP ViT-B/32 backend.

mod cache;
#[cfg(feature = "clip")]
mod clip;
mod stub;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::BBox;

pub use cache::{CachedOracle, TextCache, CACHE_DIR_ENV};
#[cfg(feature = "clip")]
pub use clip::ClipOracle;
pub use stub::StubOracle;
pub(crate) use stub::seed_of;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle backend unavailable: {0}")]
    Unavailable(String),
    #[error("empty prompt list")]
    EmptyPrompts,
    #[error("degenerate crop: {0}")]
    DegenerateCrop(String),
    #[error("need at least two class names to score a region")]
    TooFewClasses,
    #[error("cannot normalize a zero or non-finite vector")]
    ZeroNorm,
    #[error("cache file {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fixed-length embedding; `unit_norm` vectors have L2 norm 1 within 1e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub unit_norm: bool,
}

impl EmbeddingVector {
    /// L2-normalizes `values`.
    pub fn normalized(values: Vec<f64>) -> Result<Self, OracleError> {
        let norm = l2_norm(&values);
        if !norm.is_finite() || norm <= f64::EPSILON {
            return Err(OracleError::ZeroNorm);
        }
        Ok(Self { values: values.into_iter().map(|v| v / norm).collect(), unit_norm: true })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        cosine(&self.values, &other.values)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = l2_norm(a) * l2_norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleBackend {
    Vlm,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub backend: OracleBackend,
    pub model_id: String,
    /// Crop side multiplier about the box center (>= 1).
    pub crop_pad_factor: f64,
    pub score_temperature: f64,
    pub stub_seed: u64,
    pub stub_dim: usize,
    pub stub_similarity_plan: BTreeMap<String, Vec<String>>,
    pub stub_palette: BTreeMap<String, [u8; 3]>,
    /// Local weights directory for the `vlm` backend.
    pub model_path: Option<PathBuf>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            backend: OracleBackend::Stub,
            model_id: "stub-v1".into(),
            crop_pad_factor: 1.2,
            score_temperature: 0.01,
            stub_seed: 0,
            stub_dim: 64,
            stub_similarity_plan: BTreeMap::new(),
            stub_palette: BTreeMap::new(),
            model_path: None,
        }
    }
}

/// Text and image encoders sharing one embedding space.
pub trait EmbeddingOracle: Send + Sync {
    fn model_id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Side length of the square crop the image encoder consumes.
    fn input_size(&self) -> u32;

    /// One unit vector per prompt, in order.
    fn embed_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>, OracleError>;

    /// Embeds a crop already resized to `input_size`.
    fn embed_crop(&self, crop: &RgbImage) -> Result<EmbeddingVector, OracleError>;
}

impl<T: EmbeddingOracle + ?Sized> EmbeddingOracle for Arc<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn input_size(&self) -> u32 {
        (**self).input_size()
    }
    fn embed_texts(&self, prompts: &[String]) -> Result<Vec<EmbeddingVector>, OracleError> {
        (**self).embed_texts(prompts)
    }
    fn embed_crop(&self, crop: &RgbImage) -> Result<EmbeddingVector, OracleError> {
        (**self).embed_crop(crop)
    }
}

/// The padded, clamped crop rectangle in integer pixels.
pub fn crop_rect(image_w: u32, image_h: u32, bbox: &BBox, pad: f64) -> Result<(u32, u32, u32, u32), OracleError> {
    if !(bbox.area() > 0.0) || !bbox.is_valid() {
        return Err(OracleError::DegenerateCrop(format!("zero-area box {bbox:?}")));
    }
    let c = bbox.scaled(pad.max(1.0)).clamp_to(image_w as f64, image_h as f64);
    let (x1, y1) = (c.x1.floor() as u32, c.y1.floor() as u32);
    let (x2, y2) = (c.x2.ceil() as u32, c.y2.ceil() as u32);
    if x2.saturating_sub(x1) < 2 || y2.saturating_sub(y1) < 2 {
        return Err(OracleError::DegenerateCrop(format!("crop {x1},{y1},{x2},{y2} smaller than 2px")));
    }
    Ok((x1, y1, x2 - x1, y2 - y1))
}

/// Crops `bbox` grown by the pad factor, clamps to the image, resizes to the
/// encoder input and embeds.
pub fn embed_image_region(
    oracle: &dyn EmbeddingOracle,
    image: &RgbImage,
    bbox: &BBox,
    config: &OracleConfig,
) -> Result<EmbeddingVector, OracleError> {
    let (x, y, w, h) = crop_rect(image.width(), image.height(), bbox, config.crop_pad_factor)?;
    let crop = imageops::crop_imm(image, x, y, w, h).to_image();
    let side = oracle.input_size();
    let resized = imageops::resize(&crop, side, side, imageops::FilterType::Triangle);
    oracle.embed_crop(&resized)
}

/// Softmax of `cos(region, text_i) / temperature` over pre-embedded class texts.
pub fn score_against(region: &EmbeddingVector, texts: &[EmbeddingVector], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = texts.iter().map(|t| region.cosine(t) / temperature).collect();
    softmax(&logits)
}

/// Class probabilities of an image region over `class_names`, prompted with `template`.
pub fn score_region(
    oracle: &dyn EmbeddingOracle,
    image: &RgbImage,
    bbox: &BBox,
    class_names: &[String],
    template: &crate::text_space::PromptTemplate,
    config: &OracleConfig,
) -> Result<Vec<f64>, OracleError> {
    if class_names.len() < 2 {
        return Err(OracleError::TooFewClasses);
    }
    let region = embed_image_region(oracle, image, bbox, config)?;
    let prompts: Vec<String> = class_names.iter().map(|n| template.apply(n)).collect();
    let texts = oracle.embed_texts(&prompts)?;
    Ok(score_against(&region, &texts, config.score_temperature))
}

/// Builds the backend named in `config`.
pub fn build_oracle(config: &OracleConfig) -> Result<Arc<dyn EmbeddingOracle>, OracleError> {
    match config.backend {
        OracleBackend::Stub => Ok(Arc::new(StubOracle::new(config))),
        #[cfg(feature = "clip")]
        OracleBackend::Vlm => Ok(Arc::new(ClipOracle::load(config)?)),
        #[cfg(not(feature = "clip"))]
        OracleBackend::Vlm => Err(OracleError::Unavailable(
            "the vlm backend needs the `clip` cargo feature".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_rejects_zero() {
        assert!(matches!(EmbeddingVector::normalized(vec![0.0; 3]), Err(OracleError::ZeroNorm)));
        let v = EmbeddingVector::normalized(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.values, vec![0.6, 0.8]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn crop_rect_whole_image_and_degenerate() {
        let r = crop_rect(40, 30, &BBox::new(0.0, 0.0, 40.0, 30.0), 1.0).unwrap();
        assert_eq!(r, (0, 0, 40, 30));
        assert!(crop_rect(40, 30, &BBox::new(5.0, 5.0, 5.0, 9.0), 1.2).is_err());
        assert!(crop_rect(40, 30, &BBox::new(39.5, 5.0, 41.0, 9.0), 1.0).is_err());
    }
}
