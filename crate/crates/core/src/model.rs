//! Convolutional backbone with an embedding layer, a classification head
//! and an optional grid detection head.
//!
//! Parameter layout (`i` counts conv blocks from 1):
//!
//! | name                          | shape                 |
//! |-------------------------------|-----------------------|
//! | `backbone.conv{i}.weight`     | `[out, in, 3, 3]`     |
//! | `backbone.conv{i}.bias`       | `[out]`               |
//! | `embed.weight` / `.bias`      | `[E, last]` / `[E]`   |
//! | `classifier.weight` / `.bias` | `[C, E]` / `[C]`      |
//! | `detector.hidden.weight`      | `[H, last, 3, 3]`     |
//! | `detector.context.weight`     | `[H, H, 3, 3]`        |
//! | `detector.out.weight`         | `[5, H, 1, 1]`        |

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::GridPrediction;
use crate::tensor::{
    softmax_rows, Element, ParamStore, Parameter, Result, Tape, Tensor, TensorError, Var,
};

pub const KERNEL_SIZE: usize = 3;
pub const DETECTOR_OUTPUTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub stride: usize,
    /// 2×2 max-pool with stride 2 after the activation.
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub blocks: Vec<ConvBlock>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            blocks: [16, 32, 64, 128, 128]
                .into_iter()
                .map(|out_channels| ConvBlock {
                    out_channels,
                    stride: 1,
                    pool: true,
                })
                .collect(),
            embedding_dim: 128,
            num_classes: 10,
            input_size: 224,
        }
    }
}

impl BackboneConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.blocks.is_empty() {
            return Err("at least one conv block is required".into());
        }
        if self.blocks.iter().any(|b| b.out_channels == 0 || b.stride == 0) {
            return Err("conv blocks need positive channels and stride".into());
        }
        if self.embedding_dim == 0 {
            return Err("embedding_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return Err("num_classes must be at least 2".into());
        }
        if self.feature_size().is_none() {
            return Err(format!("input size {} collapses inside the backbone", self.input_size));
        }
        Ok(())
    }

    /// Spatial side length of the final feature map.
    pub fn feature_size(&self) -> Option<usize> {
        let mut size = self.input_size;
        for b in &self.blocks {
            // 3×3 with padding 1
            size = (size + 2 - KERNEL_SIZE) / b.stride + 1;
            if b.pool {
                if size < 2 {
                    return None;
                }
                size = (size - 2) / 2 + 1;
            }
        }
        (size > 0).then_some(size)
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(3, |b| b.out_channels)
    }

    /// Expected shapes of the backbone, embedding and classifier parameters.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut in_ch = 3;
        for (i, b) in self.blocks.iter().enumerate() {
            let prefix = format!("backbone.conv{}", i + 1);
            shapes.push((
                format!("{prefix}.weight"),
                vec![b.out_channels, in_ch, KERNEL_SIZE, KERNEL_SIZE],
            ));
            shapes.push((format!("{prefix}.bias"), vec![b.out_channels]));
            in_ch = b.out_channels;
        }
        shapes.push(("embed.weight".into(), vec![self.embedding_dim, in_ch]));
        shapes.push(("embed.bias".into(), vec![self.embedding_dim]));
        shapes.push(("classifier.weight".into(), vec![self.num_classes, self.embedding_dim]));
        shapes.push(("classifier.bias".into(), vec![self.num_classes]));
        shapes
    }

    pub fn detector_shapes(&self, hidden: usize) -> Vec<(String, Vec<usize>)> {
        let c = self.feature_channels();
        vec![
            ("detector.hidden.weight".into(), vec![hidden, c, KERNEL_SIZE, KERNEL_SIZE]),
            ("detector.hidden.bias".into(), vec![hidden]),
            ("detector.context.weight".into(), vec![hidden, hidden, KERNEL_SIZE, KERNEL_SIZE]),
            ("detector.context.bias".into(), vec![hidden]),
            ("detector.out.weight".into(), vec![DETECTOR_OUTPUTS, hidden, 1, 1]),
            ("detector.out.bias".into(), vec![DETECTOR_OUTPUTS]),
        ]
    }
}

/// Glorot-uniform weights, zero biases.
fn init_tensor<R: Rng + ?Sized>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<f32> {
    if name.ends_with(".bias") {
        return Tensor::zeros(shape);
    }
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape from config")
}

pub fn is_detector_param(name: &str) -> bool {
    name.starts_with("detector.")
}

/// Learned state plus its class registry.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: BackboneConfig,
    params: ParamStore,
    centers: Tensor<f32>,
    labels: Vec<String>,
    detector_hidden: Option<usize>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        config: BackboneConfig,
        labels: Vec<String>,
        rng: &mut R,
    ) -> std::result::Result<Self, String> {
        config.validate()?;
        if labels.len() != config.num_classes {
            return Err(format!(
                "{} labels for {} classes",
                labels.len(),
                config.num_classes
            ));
        }
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let value = init_tensor(&name, &shape, rng);
            params
                .insert(Parameter::new(name, value).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        }
        let centers = Tensor::zeros(&[config.num_classes, config.embedding_dim]);
        Ok(Self {
            config,
            params,
            centers,
            labels,
            detector_hidden: None,
        })
    }

    /// Assembles a model from already validated parts.
    pub(crate) fn from_parts(
        config: BackboneConfig,
        params: ParamStore,
        centers: Tensor<f32>,
        labels: Vec<String>,
        detector_hidden: Option<usize>,
    ) -> Self {
        Self {
            config,
            params,
            centers,
            labels,
            detector_hidden,
        }
    }

    /// Adds a freshly initialized detection head, replacing any existing one.
    pub fn init_detector<R: Rng + ?Sized>(&mut self, hidden: usize, rng: &mut R) -> Result<()> {
        let kept: Vec<Parameter> = self
            .params
            .iter()
            .filter(|p| !is_detector_param(p.name()))
            .cloned()
            .collect();
        let mut params = ParamStore::new();
        for p in kept {
            params.insert(p)?;
        }
        for (name, shape) in self.config.detector_shapes(hidden) {
            let value = init_tensor(&name, &shape, rng);
            params.insert(Parameter::new(name, value)?)?;
        }
        self.params = params;
        self.detector_hidden = Some(hidden);
        Ok(())
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn centers(&self) -> &Tensor<f32> {
        &self.centers
    }

    pub fn centers_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.centers
    }

    pub fn detector_hidden(&self) -> Option<usize> {
        self.detector_hidden
    }

    pub fn has_detector(&self) -> bool {
        self.detector_hidden.is_some()
    }

    pub fn grid_size(&self) -> usize {
        self.config.feature_size().expect("validated config")
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(TensorError::ShapeMismatch {
                op: "model_input",
                lhs: shape.to_vec(),
                rhs: vec![0, 3, s, s],
            });
        }
        Ok(())
    }

    /// Conv blocks: 3×3 conv (padding 1) → ReLU → optional 2×2 max-pool.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape<f32>,
        vars: &BTreeMap<String, Var>,
        input: Var,
    ) -> Result<Var> {
        self.check_input(tape.shape(input))?;
        let mut x = input;
        for (i, block) in self.config.blocks.iter().enumerate() {
            let w = vars[&format!("backbone.conv{}.weight", i + 1)];
            let b = vars[&format!("backbone.conv{}.bias", i + 1)];
            x = tape.conv2d(x, w, b, block.stride, 1)?;
            x = tape.relu(x);
            if block.pool {
                x = tape.maxpool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }

    /// Global average pool then the embedding layer.
    pub fn embed_forward(
        &self,
        tape: &mut Tape<f32>,
        vars: &BTreeMap<String, Var>,
        features: Var,
    ) -> Result<Var> {
        let pooled = tape.global_avg_pool(features)?;
        tape.linear(pooled, vars["embed.weight"], vars["embed.bias"])
    }

    pub fn classifier_forward(
        &self,
        tape: &mut Tape<f32>,
        vars: &BTreeMap<String, Var>,
        embeddings: Var,
    ) -> Result<Var> {
        tape.linear(embeddings, vars["classifier.weight"], vars["classifier.bias"])
    }

    /// `[N,C,S,S]` feature map to `[N,5,S,S]` raw grid predictions. Two
    /// stacked 3×3 convs let each cell see a 5×5 neighbourhood, enough to
    /// tell the centre of a leaf from its interior.
    pub fn detector_forward(
        &self,
        tape: &mut Tape<f32>,
        vars: &BTreeMap<String, Var>,
        features: Var,
    ) -> Result<Var> {
        if !self.has_detector() {
            return Err(TensorError::InvalidArgument {
                op: "detector",
                reason: "model has no detector head".into(),
            });
        }
        let h = tape.conv2d(
            features,
            vars["detector.hidden.weight"],
            vars["detector.hidden.bias"],
            1,
            1,
        )?;
        let h = tape.relu(h);
        let h = tape.conv2d(
            h,
            vars["detector.context.weight"],
            vars["detector.context.bias"],
            1,
            1,
        )?;
        let h = tape.relu(h);
        tape.conv2d(h, vars["detector.out.weight"], vars["detector.out.bias"], 1, 0)
    }

    /// Records all parameters as constants (inference only).
    fn attach_frozen(&self, tape: &mut Tape<f32>) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|p| (p.name().to_string(), tape.constant(p.value.clone())))
            .collect()
    }

    /// Per-sample inference, parallel over the batch.
    fn per_sample<T: Send>(
        &self,
        input: &Tensor<f32>,
        f: impl Fn(&mut Tape<f32>, &BTreeMap<String, Var>, Var) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        self.check_input(input.shape())?;
        (0..input.shape()[0])
            .into_par_iter()
            .map(|i| {
                let mut tape = Tape::new();
                let vars = self.attach_frozen(&mut tape);
                let x = tape.constant(input.sample(i)?);
                f(&mut tape, &vars, x)
            })
            .collect()
    }

    fn concat(rows: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut shape = rows[0].shape().to_vec();
        shape[0] = rows.len();
        let data = rows.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(shape, data)
    }

    /// Fixed-dimension embeddings `[N, embedding_dim]`.
    pub fn extract_features(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let rows = self.per_sample(input, |tape, vars, x| {
            let f = self.backbone_forward(tape, vars, x)?;
            let e = self.embed_forward(tape, vars, f)?;
            Ok(tape.value(e).clone())
        })?;
        Self::concat(rows)
    }

    /// Final backbone feature maps `[N, C, S, S]`.
    pub fn feature_maps(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let rows = self.per_sample(input, |tape, vars, x| {
            let f = self.backbone_forward(tape, vars, x)?;
            Ok(tape.value(f).clone())
        })?;
        Self::concat(rows)
    }

    pub fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let rows = self.per_sample(input, |tape, vars, x| {
            let f = self.backbone_forward(tape, vars, x)?;
            let e = self.embed_forward(tape, vars, f)?;
            let l = self.classifier_forward(tape, vars, e)?;
            Ok(tape.value(l).clone())
        })?;
        Self::concat(rows)
    }

    /// Class probabilities `[N, num_classes]`.
    pub fn classify(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        softmax_rows(&self.logits(input)?)
    }

    /// Raw grid predictions, one per sample.
    pub fn predict_grid(&self, input: &Tensor<f32>) -> Result<Vec<GridPrediction>> {
        self.per_sample(input, |tape, vars, x| {
            let f = self.backbone_forward(tape, vars, x)?;
            let g = self.detector_forward(tape, vars, f)?;
            let raw = tape.value(g).clone();
            let s = raw.shape()[2];
            GridPrediction::new(raw.reshape(vec![DETECTOR_OUTPUTS, s, s])?)
        })
    }

    /// Detection head applied to precomputed feature maps `[N,C,S,S]`.
    pub fn predict_grid_from_features(&self, features: &Tensor<f32>) -> Result<Vec<GridPrediction>> {
        let mut tape = Tape::new();
        let vars = self.attach_frozen(&mut tape);
        let x = tape.constant(features.clone());
        let g = self.detector_forward(&mut tape, &vars, x)?;
        let raw = tape.value(g);
        let s = raw.shape()[2];
        let per = DETECTOR_OUTPUTS * s * s;
        raw.data()
            .chunks_exact(per)
            .map(|d| GridPrediction::new(Tensor::new(vec![DETECTOR_OUTPUTS, s, s], d.to_vec())?))
            .collect()
    }
}

/// Cross-entropy plus the center term `(λ/2)·mean ‖e − c_y‖²`.
///
/// Returns the scalar loss and the softmax probabilities of `logits`.
pub fn joint_loss<E: Element>(
    tape: &mut Tape<E>,
    embeddings: Var,
    logits: Var,
    labels: &[usize],
    centers: &Tensor<E>,
    lambda_metric: f64,
) -> Result<(Var, Tensor<E>)> {
    let (ce, probs) = tape.softmax_cross_entropy(logits, labels)?;
    let center = tape.center_distance(embeddings, centers, labels)?;
    if lambda_metric == 0.0 {
        return Ok((ce, probs));
    }
    let metric = tape.scale(center, E::from_f64(lambda_metric));
    Ok((tape.add(ce, metric)?, probs))
}

/// `c_k ← c_k − α · mean_{i: y_i = k}(c_k − e_i)` for every class in the batch.
pub fn update_centers(
    centers: &mut Tensor<f32>,
    embeddings: &[Vec<f32>],
    labels: &[usize],
    rate: f64,
) {
    let dim = centers.shape()[1];
    let classes = centers.shape()[0];
    for k in 0..classes {
        let members: Vec<&Vec<f32>> = embeddings
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == k)
            .map(|(e, _)| e)
            .collect();
        if members.is_empty() {
            continue;
        }
        let center = &mut centers.data_mut()[k * dim..(k + 1) * dim];
        for (d, c) in center.iter_mut().enumerate() {
            let mean: f64 = members
                .iter()
                .map(|e| *c as f64 - e[d] as f64)
                .sum::<f64>()
                / members.len() as f64;
            *c = (*c as f64 - rate * mean) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            blocks: vec![
                ConvBlock {
                    out_channels: 4,
                    stride: 1,
                    pool: true,
                },
                ConvBlock {
                    out_channels: 6,
                    stride: 1,
                    pool: true,
                },
            ],
            embedding_dim: 5,
            num_classes: 3,
            input_size: 16,
        }
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn default_backbone_geometry() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.feature_size(), Some(7));
        assert_eq!(cfg.feature_channels(), 128);
        cfg.validate().unwrap();
    }

    #[test]
    fn init_respects_glorot_bounds() {
        let cfg = BackboneConfig::default();
        let model = Model::init(cfg, labels(10), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = model.params().get("backbone.conv2.weight").unwrap();
        let limit = (6.0f32 / (16.0 * 9.0 + 32.0 * 9.0)).sqrt();
        assert!(w.value.data().iter().all(|v| v.abs() <= limit));
        assert!(model.params().get("backbone.conv2.bias").unwrap().value.data().iter().all(|v| *v == 0.0));
        assert!(model.centers().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = tiny_config();
        let model = Model::init(cfg, labels(3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let sample: Vec<f32> = (0..3 * 16 * 16).map(|i| ((i * 31 % 17) as f32) / 8.0 - 1.0).collect();
        let mut data = sample.clone();
        data.extend_from_slice(&sample);
        let input = Tensor::new(vec![2, 3, 16, 16], data).unwrap();
        let emb = model.extract_features(&input).unwrap();
        assert_eq!(emb.shape(), &[2, 5]);
        assert_eq!(emb.data()[..5], emb.data()[5..]);
        let p = model.classify(&input).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let wrong = Tensor::zeros(&[1, 3, 15, 16]);
        assert!(matches!(model.classify(&wrong), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut model =
            Model::init(tiny_config(), labels(3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for p in model.params_mut().iter_mut() {
            if p.name().starts_with("classifier.") {
                p.value.data_mut().fill(0.0);
            }
        }
        let input = Tensor::full(&[1, 3, 16, 16], 0.3);
        let p = model.classify(&input).unwrap();
        assert!(p.data().iter().all(|v| (*v - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn joint_loss_without_metric_term_is_cross_entropy() {
        let logits = Tensor::<f32>::new(vec![2, 3], vec![0.2, -1.0, 2.5, 0.0, 0.3, -0.7]).unwrap();
        let emb = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let centers = Tensor::<f32>::full(&[3, 2], 0.25);
        let mut tape = Tape::new();
        let (e, l) = (tape.constant(emb), tape.constant(logits));
        let (joint, _) = joint_loss(&mut tape, e, l, &[2, 1], &centers, 0.0).unwrap();
        let (ce, _) = tape.softmax_cross_entropy(l, &[2, 1]).unwrap();
        assert_eq!(
            tape.value(joint).item().unwrap().to_bits(),
            tape.value(ce).item().unwrap().to_bits()
        );
    }

    #[test]
    fn joint_loss_matches_scalar_formula() {
        let logits = [[1.0f64, 0.0, -1.0], [0.5, 0.5, 2.0]];
        let emb = [[0.5f64, -1.0], [2.0, 1.0]];
        let centers = [[0.0f64, 0.0], [1.0, 1.0], [1.5, 0.0]];
        let labels = [0usize, 2];
        let lambda = 0.3;
        // Scalar oracle.
        let mut ce = 0.0;
        let mut dist = 0.0;
        for i in 0..2 {
            let z: f64 = logits[i].iter().map(|v| v.exp()).sum();
            ce -= (logits[i][labels[i]].exp() / z).ln();
            dist += (emb[i][0] - centers[labels[i]][0]).powi(2) + (emb[i][1] - centers[labels[i]][1]).powi(2);
        }
        let expected = ce / 2.0 + lambda / 2.0 * dist / 2.0;

        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::new(vec![2, 2], emb.concat()).unwrap());
        let l = tape.constant(Tensor::new(vec![2, 3], logits.concat()).unwrap());
        let c = Tensor::new(vec![3, 2], centers.concat()).unwrap();
        let (loss, _) = joint_loss(&mut tape, e, l, &labels, &c, lambda).unwrap();
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn metric_term_vanishes_at_centers() {
        let centers = Tensor::<f64>::new(vec![2, 2], vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        let logits = Tensor::<f64>::new(vec![2, 2], vec![0.1, 0.2, 0.3, -0.4]).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::new(vec![2, 2], vec![0.5, 0.5, 1.0, -1.0]).unwrap());
        let l = tape.constant(logits);
        let (joint, _) = joint_loss(&mut tape, e, l, &[1, 0], &centers, 5.0).unwrap();
        let (ce, _) = tape.softmax_cross_entropy(l, &[1, 0]).unwrap();
        assert_eq!(tape.value(joint).item(), tape.value(ce).item());
    }

    #[test]
    fn joint_loss_rejects_bad_label() {
        let mut tape = Tape::<f32>::new();
        let e = tape.constant(Tensor::zeros(&[1, 2]));
        let l = tape.constant(Tensor::zeros(&[1, 3]));
        let centers = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            joint_loss(&mut tape, e, l, &[3], &centers, 0.1),
            Err(TensorError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn centers_move_towards_class_means() {
        let mut centers = Tensor::new(vec![2, 2], vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        let emb = vec![vec![2.0, 4.0], vec![4.0, 0.0], vec![0.0, 0.0]];
        update_centers(&mut centers, &emb, &[0, 0, 1], 0.5);
        // class 0: mean(c − e) = (−3, −2) → c = (1.5, 1); class 1: (10, 10)·0.5 → (5, 5)
        assert_eq!(centers.data(), &[1.5, 1.0, 5.0, 5.0]);
    }
}
