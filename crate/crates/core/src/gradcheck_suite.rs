//! Finite-difference checks for every differentiable layer the models use.
//!
//! Inputs are drawn in `[−1, 1]` in double precision, nudged away from the
//! non-differentiable points of ReLU and max-pool so central differences
//! stay valid. Non-scalar layers are reduced with a random weighted sum.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detector::BBox;
use crate::model::joint_loss;
use crate::tensor::{grad_check, GradCheckReport, Result, Tape, Tensor, Var};

pub const LAYERS: [&str; 7] = [
    "conv2d",
    "linear",
    "relu",
    "maxpool2d",
    "softmax_cross_entropy",
    "joint_loss",
    "detector_loss",
];
pub const DEFAULT_SEEDS: usize = 20;
pub const TOLERANCE: f64 = 1e-3;
pub const EPSILON: f64 = 1e-6;

/// Smallest distance kept between a ReLU input and zero, and between
/// competing values inside a pooling window.
const KINK_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerResult {
    pub layer: String,
    pub seeds: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub layers: Vec<LayerResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Uniform in `[−1, −m] ∪ [m, 1]`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape);
    for v in t.data_mut() {
        let magnitude = KINK_MARGIN + (1.0 - KINK_MARGIN) * v.abs();
        *v = if *v < 0.0 { -magnitude } else { magnitude };
    }
    t
}

/// A shuffled evenly spaced grid, so any two entries differ by at least
/// `2 / (n − 1)`.
fn distinct_values(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n.max(2) - 1) as f64).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    tape.dot(out, weights)
}

/// One finite-difference check of `layer` with inputs drawn from `seed`.
pub fn check_layer(layer: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match layer {
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let padding = ((seed / 2) % 2) as usize;
            let x = uniform(&mut rng, &[2, 3, 6, 6]);
            let k = uniform(&mut rng, &[4, 3, 3, 3]);
            let b = uniform(&mut rng, &[4]);
            let out = (6 + 2 * padding - 3) / stride + 1;
            let w = uniform(&mut rng, &[2, 4, out, out]);
            grad_check(
                |tape, v| {
                    let y = tape.conv2d(v[0], v[1], v[2], stride, padding)?;
                    weighted_sum(tape, y, &w)
                },
                &[("input", x), ("kernel", k), ("bias", b)],
                EPSILON,
                TOLERANCE,
            )
        }
        "linear" => {
            let x = uniform(&mut rng, &[3, 5]);
            let wt = uniform(&mut rng, &[4, 5]);
            let b = uniform(&mut rng, &[4]);
            let w = uniform(&mut rng, &[3, 4]);
            grad_check(
                |tape, v| {
                    let y = tape.linear(v[0], v[1], v[2])?;
                    weighted_sum(tape, y, &w)
                },
                &[("input", x), ("weight", wt), ("bias", b)],
                EPSILON,
                TOLERANCE,
            )
        }
        "relu" => {
            let x = away_from_zero(&mut rng, &[2, 3, 4, 4]);
            let w = uniform(&mut rng, &[2, 3, 4, 4]);
            grad_check(
                |tape, v| {
                    let y = tape.relu(v[0]);
                    weighted_sum(tape, y, &w)
                },
                &[("input", x)],
                EPSILON,
                TOLERANCE,
            )
        }
        "maxpool2d" => {
            let x = distinct_values(&mut rng, &[2, 3, 6, 6]);
            let w = uniform(&mut rng, &[2, 3, 3, 3]);
            grad_check(
                |tape, v| {
                    let y = tape.maxpool2d(v[0], 2, 2)?;
                    weighted_sum(tape, y, &w)
                },
                &[("input", x)],
                EPSILON,
                TOLERANCE,
            )
        }
        "softmax_cross_entropy" => {
            let x = uniform(&mut rng, &[4, 5]);
            let y = labels(&mut rng, 4, 5);
            grad_check(
                |tape, v| tape.softmax_cross_entropy(v[0], &y).map(|(l, _)| l),
                &[("logits", x)],
                EPSILON,
                TOLERANCE,
            )
        }
        "joint_loss" => {
            let e = uniform(&mut rng, &[4, 6]);
            let logits = uniform(&mut rng, &[4, 5]);
            let centers = uniform(&mut rng, &[5, 6]);
            let y = labels(&mut rng, 4, 5);
            let lambda = rng.random_range(0.1..1.0);
            grad_check(
                |tape, v| joint_loss(tape, v[0], v[1], &y, &centers, lambda).map(|(l, _)| l),
                &[("embeddings", e), ("logits", logits)],
                EPSILON,
                TOLERANCE,
            )
        }
        "detector_loss" => {
            let s = 3;
            let raw = uniform(&mut rng, &[2, 5, s, s]);
            let boxes: Vec<Vec<BBox>> = (0..2)
                .map(|_| {
                    (0..rng.random_range(1..=2))
                        .map(|_| BBox {
                            cx: rng.random_range(0.05..0.95),
                            cy: rng.random_range(0.05..0.95),
                            w: rng.random_range(0.1..0.9),
                            h: rng.random_range(0.1..0.9),
                        })
                        .collect()
                })
                .collect();
            grad_check(
                |tape, v| tape.detector_loss(v[0], &boxes),
                &[("raw", raw)],
                EPSILON,
                TOLERANCE,
            )
        }
        other => Err(crate::tensor::TensorError::InvalidArgument {
            op: "gradcheck",
            reason: format!("unknown layer '{other}'"),
        }),
    }
}

/// Checks every layer over seeds `base_seed..base_seed + seeds`.
pub fn run_suite(seeds: usize, base_seed: u64) -> Result<SuiteReport> {
    let layers = LAYERS
        .iter()
        .map(|layer| {
            let mut worst = 0.0f64;
            for s in 0..seeds as u64 {
                worst = worst.max(check_layer(layer, base_seed.wrapping_add(s))?.max_relative_error());
            }
            Ok(LayerResult {
                layer: layer.to_string(),
                seeds,
                max_relative_error: worst,
                passed: worst < TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        layers,
    })
}
