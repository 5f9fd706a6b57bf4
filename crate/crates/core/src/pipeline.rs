//! Single-image inference: detect the leaf, crop it, classify the crop.

use serde::Serialize;
use thiserror::Error;

use crate::augment::{crop, prepare_eval, AugmentConfig, CropWindow, Mode};
use crate::detector::{decode_grid, nms, BBox, Detection, DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_NMS_THRESHOLD};
use crate::image::{ImageError, ImageRgb8};
use crate::model::Model;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("checkpoint has no detector head")]
    MissingDetector,
    #[error("k = {k} is outside [1, {classes}]")]
    InvalidK { k: usize, classes: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectOptions {
    pub confidence_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelProbability {
    pub label: String,
    pub probability: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnosis {
    /// In source-image normalized coordinates, best first.
    pub detections: Vec<Detection>,
    /// Region that was classified; `None` means the whole image.
    pub region: Option<BBox>,
    pub probabilities: Vec<f32>,
    pub top_k: Vec<LabelProbability>,
}

impl Diagnosis {
    pub fn best(&self) -> &LabelProbability {
        &self.top_k[0]
    }
}

/// Eval preprocessing matched to the model's input size, keeping the
/// default 256:224 resize ratio.
pub fn eval_config(model: &Model) -> AugmentConfig {
    let size = model.config().input_size;
    AugmentConfig {
        target_size: size,
        resize_shorter: (size * 256).div_ceil(224),
        mode: Mode::Eval,
        ..AugmentConfig::default()
    }
}

/// Runs the detector head on precomputed features `[1,C,S,S]` and maps the
/// surviving boxes back to source-image coordinates.
pub fn detections_from_features(
    model: &Model,
    features: &Tensor<f32>,
    window: &CropWindow,
    options: &DetectOptions,
) -> Result<Vec<Detection>> {
    if !model.has_detector() {
        return Err(PipelineError::MissingDetector);
    }
    let grid = model.predict_grid_from_features(features)?;
    let kept = nms(&decode_grid(&grid[0], options.confidence_threshold), options.nms_threshold);
    Ok(kept
        .into_iter()
        .map(|d| Detection {
            bbox: BBox::from_array(window.crop_to_image(d.bbox.to_array())).clipped(),
            confidence: d.confidence,
        })
        .collect())
}

pub fn detect(model: &Model, image: &ImageRgb8, options: &DetectOptions) -> Result<Vec<Detection>> {
    if !model.has_detector() {
        return Err(PipelineError::MissingDetector);
    }
    let (input, window) = prepare_eval(image, &eval_config(model))?;
    let input = batch_of_one(input)?;
    let features = model.feature_maps(&input)?;
    detections_from_features(model, &features, &window, options)
}

fn batch_of_one(t: Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = [&[1], t.shape()].concat();
    Ok(t.reshape(shape)?)
}

/// Pixel rectangle covering a normalized box, at least one pixel each way.
pub fn crop_box(image: &ImageRgb8, b: &BBox) -> Result<ImageRgb8> {
    let (w, h) = (image.width(), image.height());
    let [x0, y0, x1, y1] = b.clipped().corners();
    // Edges within SNAP of a pixel boundary land on it despite f32 rounding.
    const SNAP: f64 = 1e-4;
    let lo = |v: f64, n: usize| ((v * n as f64 + SNAP).floor().max(0.0) as usize).min(n - 1);
    let hi = |v: f64, n: usize, min: usize| ((v * n as f64 - SNAP).ceil().max(0.0) as usize).clamp(min, n);
    let (left, top) = (lo(x0, w), lo(y0, h));
    let (right, bottom) = (hi(x1, w, left + 1), hi(y1, h, top + 1));
    Ok(crop(image, left, top, right - left, bottom - top)?)
}

/// Indices of the `k` largest probabilities, descending, ties by index.
pub fn top_k_indices(probabilities: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Detect, crop the most confident box (or keep the whole image), classify.
///
/// A checkpoint without a detector head classifies the whole image.
pub fn diagnose(model: &Model, image: &ImageRgb8, k: usize, options: &DetectOptions) -> Result<Diagnosis> {
    let classes = model.labels().len();
    if k == 0 || k > classes {
        return Err(PipelineError::InvalidK { k, classes });
    }
    let detections = if model.has_detector() {
        detect(model, image, options)?
    } else {
        Vec::new()
    };
    let region = detections.first().map(|d| d.bbox);
    let subject = match &region {
        Some(b) => crop_box(image, b)?,
        None => image.clone(),
    };
    let (input, _) = prepare_eval(&subject, &eval_config(model))?;
    let input = batch_of_one(input)?;
    let probabilities = model.classify(&input)?.data().to_vec();
    let top_k = top_k_indices(&probabilities, k)
        .into_iter()
        .map(|i| LabelProbability {
            label: model.labels()[i].clone(),
            probability: probabilities[i],
        })
        .collect();
    Ok(Diagnosis {
        detections,
        region,
        probabilities,
        top_k,
    })
}
