//! Deterministic training loops for the classifier and the detection head.
//!
//! Randomness comes from one seed split into independent ChaCha streams:
//! initialization, sample order and augmentation. Per-sample gradients are
//! computed in parallel and summed in batch order, so results do not depend
//! on the thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::augment::{prepare, prepare_eval, AugmentConfig, Mode};
use crate::detector::{iou, BBox, DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_NMS_THRESHOLD};
use crate::pipeline::{detections_from_features, DetectOptions, PipelineError};
use crate::image::{ImageError, ImageRgb8};
use crate::model::{is_detector_param, joint_loss, update_centers, BackboneConfig, Model};
use crate::tensor::{sgd_step, softmax_rows, OptimizerState, Tape, Tensor, TensorError};

const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DETECTOR: u64 = 3;
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Decoded images with class indices.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<ImageRgb8>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub lambda_metric: f64,
    pub center_rate: f64,
    pub seed: u64,
    #[serde(skip)]
    pub augment: AugmentConfig,
    #[serde(skip)]
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            lambda_metric: 0.003,
            center_rate: 0.5,
            seed: 0,
            augment: AugmentConfig::train(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lambda_metric >= 0.0) {
            return bad("lambda_metric must be non-negative");
        }
        if !(self.center_rate > 0.0 && self.center_rate <= 1.0) {
            return bad("center update rate must lie in (0, 1]");
        }
        self.augment.validate().map_err(TrainError::Config)?;
        if self.augment.target_size != self.backbone.input_size {
            return Err(TrainError::Config(format!(
                "crop size {} differs from the backbone input size {}",
                self.augment.target_size, self.backbone.input_size
            )));
        }
        OptimizerState::new(self.learning_rate, self.momentum)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

struct SampleResult {
    grads: Vec<Vec<f32>>,
    embedding: Vec<f32>,
    loss: f64,
    correct: bool,
}

fn sample_step(
    model: &Model,
    names: &[String],
    input: Tensor<f32>,
    label: usize,
    lambda_metric: f64,
    scale: f32,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let vars = model.params().attach(&mut tape, |n| !is_detector_param(n));
    let x = tape.constant(input.reshape(vec![1, 3, model.config().input_size, model.config().input_size])?);
    let features = model.backbone_forward(&mut tape, &vars, x)?;
    let embedding = model.embed_forward(&mut tape, &vars, features)?;
    let logits = model.classifier_forward(&mut tape, &vars, embedding)?;
    let (loss, probs) = joint_loss(&mut tape, embedding, logits, &[label], model.centers(), lambda_metric)?;
    let scaled = tape.scale(loss, scale);
    let mut grads = tape.backward(scaled)?;
    let grads = names
        .iter()
        .map(|n| {
            grads
                .take(vars[n])
                .ok_or_else(|| TensorError::MissingGradient { name: n.clone() })
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(SampleResult {
        grads,
        embedding: tape.value(embedding).data().to_vec(),
        loss: tape.value(loss).item().unwrap_or(f32::NAN) as f64,
        correct: argmax(probs.data()) == label,
    })
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Eval-mode cross-entropy, accuracy and argmax predictions.
pub fn evaluate(model: &Model, data: &LabeledImages, augment: &AugmentConfig) -> Result<Evaluation> {
    if data.is_empty() {
        return Ok(Evaluation {
            loss: 0.0,
            accuracy: 0.0,
            predictions: Vec::new(),
        });
    }
    let probabilities = predict_probabilities(model, &data.images, augment)?;
    let classes = model.labels().len();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    for (row, &label) in probabilities.chunks(classes).zip(&data.labels) {
        loss -= (row[label] as f64).max(f64::MIN_POSITIVE).ln();
        predictions.push(argmax(row));
    }
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        predictions,
    })
}

/// Row-major `[N, num_classes]` probabilities under eval preprocessing.
pub fn predict_probabilities(
    model: &Model,
    images: &[ImageRgb8],
    augment: &AugmentConfig,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(images.len() * model.labels().len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let inputs = chunk
            .par_iter()
            .map(|img| prepare_eval(img, augment).map(|(t, _)| t))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let logits = model.logits(&Tensor::stack(&inputs)?)?;
        out.extend_from_slice(softmax_rows(&logits)?.data());
    }
    Ok(out)
}

/// Trains the classifier; `progress` sees each epoch entry as it completes.
pub fn train_classifier(
    train: &LabeledImages,
    val: &LabeledImages,
    classes: Vec<String>,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.backbone.num_classes = classes.len();
    config.augment.mode = Mode::Train;
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if let Some(&l) = train.labels.iter().chain(&val.labels).find(|&&l| l >= classes.len()) {
        return Err(TrainError::Config(format!("label {l} outside the class registry")));
    }

    let mut model = Model::init(config.backbone.clone(), classes, &mut rng_stream(config.seed, STREAM_INIT))
        .map_err(TrainError::Config)?;
    let mut optimizer = OptimizerState::new(config.learning_rate, config.momentum)?;
    let mut order_rng = rng_stream(config.seed, STREAM_ORDER);
    let mut augment_rng = rng_stream(config.seed, STREAM_AUGMENT);
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|p| !is_detector_param(p.name()))
        .map(|p| p.name().to_string())
        .collect();
    let eval_augment = config.augment.with_mode(Mode::Eval);

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| augment_rng.random()).collect();
            let scale = 1.0 / batch.len() as f32;
            let results = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &seed)| {
                    let input = prepare(&train.images[i], &config.augment, &mut ChaCha8Rng::seed_from_u64(seed))?;
                    sample_step(&model, &names, input, train.labels[i], config.lambda_metric, scale)
                })
                .collect::<Result<Vec<_>>>()?;

            for (j, name) in names.iter().enumerate() {
                let param = model.params_mut().get_mut(name).expect("listed parameter");
                for r in &results {
                    param.value.accumulate_grad(&r.grads[j])?;
                }
            }
            sgd_step(
                model.params_mut().iter_mut().filter(|p| !is_detector_param(p.name())),
                &mut optimizer,
            )?;
            let embeddings: Vec<Vec<f32>> = results.iter().map(|r| r.embedding.clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            update_centers(model.centers_mut(), &embeddings, &labels, config.center_rate);
            loss_sum += results.iter().map(|r| r.loss).sum::<f64>();
            correct += results.iter().filter(|r| r.correct).count();
        }
        let eval = evaluate(&model, val, &eval_augment)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&entry);
        log.push(entry);
        if !entry_is_finite(log.last().unwrap()) {
            return Err(TrainError::Config(format!("training diverged at epoch {epoch}")));
        }
        if best.as_ref().map_or(true, |(acc, _, _)| eval.accuracy > *acc) {
            best = Some((eval.accuracy, epoch, model.clone()));
        }
    }
    let (_, best_epoch, mut model) = best.expect("at least one epoch");
    for p in model.params_mut().iter_mut() {
        p.value.zero_grad();
    }
    Ok(TrainOutcome { model, best_epoch, log })
}

fn entry_is_finite(e: &EpochLog) -> bool {
    e.train_loss.is_finite() && e.val_loss.is_finite()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub hidden_channels: usize,
    pub seed: u64,
    pub confidence_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            learning_rate: 0.001,
            momentum: 0.9,
            hidden_channels: 64,
            seed: 0,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectorEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Fraction of validation images with exactly one detection at IoU ≥ 0.5.
    pub val_single_hit_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct DetectorOutcome {
    pub model: Model,
    pub log: Vec<DetectorEpochLog>,
}

/// Images with ground-truth boxes in normalized image coordinates.
#[derive(Clone, Debug, Default)]
pub struct BoxedImages {
    pub images: Vec<ImageRgb8>,
    pub boxes: Vec<Vec<BBox>>,
}

/// Eval-crop feature maps and ground truth mapped into crop space.
struct DetectorSet {
    features: Vec<Tensor<f32>>,
    boxes_crop: Vec<Vec<BBox>>,
    boxes_image: Vec<Vec<BBox>>,
    windows: Vec<crate::augment::CropWindow>,
}

fn to_crop_space(window: &crate::augment::CropWindow, b: &BBox) -> Option<BBox> {
    let mapped = BBox::from_array(window.image_to_crop(b.to_array()));
    let [x0, y0, x1, y1] = mapped.corners();
    let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0));
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some(BBox {
        cx: ((x0 + x1) / 2.0) as f32,
        cy: ((y0 + y1) / 2.0) as f32,
        w: (x1 - x0) as f32,
        h: (y1 - y0) as f32,
    })
}

fn detector_set(model: &Model, data: &BoxedImages, augment: &AugmentConfig) -> Result<DetectorSet> {
    let mut set = DetectorSet {
        features: Vec::with_capacity(data.images.len()),
        boxes_crop: Vec::with_capacity(data.images.len()),
        boxes_image: data.boxes.clone(),
        windows: Vec::with_capacity(data.images.len()),
    };
    for (chunk, boxes) in data.images.chunks(EVAL_CHUNK).zip(data.boxes.chunks(EVAL_CHUNK)) {
        let prepared = chunk
            .par_iter()
            .map(|img| prepare_eval(img, augment))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let inputs: Vec<Tensor<f32>> = prepared.iter().map(|(t, _)| t.clone()).collect();
        let maps = model.feature_maps(&Tensor::stack(&inputs)?)?;
        for (i, ((_, window), gt)) in prepared.iter().zip(boxes).enumerate() {
            set.features.push(maps.sample(i)?);
            set.boxes_crop.push(gt.iter().filter_map(|b| to_crop_space(window, b)).collect());
            set.windows.push(*window);
        }
    }
    Ok(set)
}

fn detector_batch_loss(
    model: &Model,
    features: &[Tensor<f32>],
    boxes: &[Vec<BBox>],
    train: bool,
) -> Result<(f64, Option<crate::tensor::Gradients<f32>>, Vec<crate::tensor::Var>, Vec<String>)> {
    let mut tape = Tape::new();
    let vars = model.params().attach(&mut tape, is_detector_param);
    let stacked: Vec<Tensor<f32>> = features
        .iter()
        .map(|f| f.clone().reshape(f.shape()[1..].to_vec()))
        .collect::<std::result::Result<_, _>>()?;
    let x = tape.constant(Tensor::stack(&stacked)?);
    let pred = model.detector_forward(&mut tape, &vars, x)?;
    let loss = tape.detector_loss(pred, boxes)?;
    let value = tape.value(loss).item().unwrap_or(f32::NAN) as f64;
    if !train {
        return Ok((value, None, Vec::new(), Vec::new()));
    }
    let grads = tape.backward(loss)?;
    let (names, handles) = vars.into_iter().unzip();
    Ok((value, Some(grads), handles, names))
}

/// Fraction of images with exactly one detection matching ground truth at IoU ≥ 0.5.
fn single_hit_rate(model: &Model, set: &DetectorSet, config: &DetectorTrainConfig) -> Result<f64> {
    if set.features.is_empty() {
        return Ok(0.0);
    }
    let hits = (0..set.features.len())
        .into_par_iter()
        .map(|i| {
            let options = DetectOptions {
                confidence_threshold: config.confidence_threshold,
                nms_threshold: config.nms_threshold,
            };
            let dets = detections_from_features(model, &set.features[i], &set.windows[i], &options)?;
            Ok(dets.len() == 1 && set.boxes_image[i].iter().any(|g| iou(&dets[0].bbox, g) >= 0.5))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Trains a detection head on frozen backbone features.
pub fn train_detector(
    model: &Model,
    train: &BoxedImages,
    val: &BoxedImages,
    augment: &AugmentConfig,
    config: &DetectorTrainConfig,
    mut progress: impl FnMut(&DetectorEpochLog),
) -> Result<DetectorOutcome> {
    if config.epochs == 0 || config.batch_size == 0 || config.hidden_channels == 0 {
        return Err(TrainError::Config("epochs, batch size and hidden channels must be positive".into()));
    }
    if train.images.is_empty() || train.images.len() != train.boxes.len() || val.images.len() != val.boxes.len() {
        return Err(TrainError::Config("every image needs a box list and the training set must be non-empty".into()));
    }
    let mut model = model.clone();
    model.init_detector(config.hidden_channels, &mut rng_stream(config.seed, STREAM_DETECTOR))?;
    let mut optimizer = OptimizerState::new(config.learning_rate, config.momentum)?;
    let mut order_rng = rng_stream(config.seed, STREAM_ORDER);
    let train_set = detector_set(&model, train, augment)?;
    let val_set = detector_set(&model, val, augment)?;

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.features.len()).collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let features: Vec<Tensor<f32>> = batch.iter().map(|&i| train_set.features[i].clone()).collect();
            let boxes: Vec<Vec<BBox>> = batch.iter().map(|&i| train_set.boxes_crop[i].clone()).collect();
            let (loss, grads, handles, names) = detector_batch_loss(&model, &features, &boxes, true)?;
            let grads = grads.expect("training pass");
            for (name, var) in names.iter().zip(handles) {
                let g = grads.get(var).ok_or_else(|| TensorError::MissingGradient { name: name.clone() })?;
                model.params_mut().get_mut(name).expect("attached").value.accumulate_grad(g)?;
            }
            sgd_step(
                model.params_mut().iter_mut().filter(|p| is_detector_param(p.name())),
                &mut optimizer,
            )?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_loss = if val_set.features.is_empty() {
            0.0
        } else {
            detector_batch_loss(&model, &val_set.features, &val_set.boxes_crop, false)?.0
        };
        let entry = DetectorEpochLog {
            epoch,
            train_loss: loss_sum / train_set.features.len() as f64,
            val_loss,
            val_single_hit_rate: single_hit_rate(&model, &val_set, config)?,
            seconds: started.elapsed().as_secs_f64(),
        };
        if !entry.train_loss.is_finite() {
            return Err(TrainError::Config(format!("detector training diverged at epoch {epoch}")));
        }
        progress(&entry);
        log.push(entry);
    }
    for p in model.params_mut().iter_mut() {
        p.value.zero_grad();
    }
    Ok(DetectorOutcome { model, log })
}
