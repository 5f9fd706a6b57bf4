//! Single-class grid detector: box geometry, grid decoding, NMS and the
//! training loss.
//!
//! A head predicts, for every cell of an `S×S` grid over the input crop, a
//! raw 5-tuple `(tx, ty, tw, th, tconf)`. A cell decodes to
//! `cx = (j + σ(tx))/S`, `cy = (i + σ(ty))/S`, `w = σ(tw)`, `h = σ(th)` and
//! confidence `σ(tconf)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::tensor::{CustomOp, Element, Result, Tape, Tensor, TensorError, Var};

pub const DEFAULT_GRID_SIZE: usize = 7;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;
pub const LAMBDA_COORD: f64 = 5.0;
pub const LAMBDA_NOOBJ: f64 = 0.5;

/// Normalized center-size box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> std::result::Result<Self, String> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.cx) || !unit.contains(&self.cy) {
            return Err(format!("center ({}, {}) outside the unit square", self.cx, self.cy));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(format!("size {}x{} outside (0, 1]", self.w, self.h));
        }
        Ok(())
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> [f64; 4] {
        let (cx, cy, hw, hh) = (
            self.cx as f64,
            self.cy as f64,
            self.w as f64 / 2.0,
            self.h as f64 / 2.0,
        );
        [cx - hw, cy - hh, cx + hw, cy + hh]
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    /// Intersection with the unit square, re-expressed as center and size.
    pub fn clipped(&self) -> Self {
        let [x0, y0, x1, y1] = self.corners().map(|v| v.clamp(0.0, 1.0));
        let min = f32::EPSILON as f64;
        Self {
            cx: ((x0 + x1) / 2.0) as f32,
            cy: ((y0 + y1) / 2.0) as f32,
            w: (x1 - x0).max(min) as f32,
            h: (y1 - y0).max(min) as f32,
        }
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(b: [f32; 4]) -> Self {
        Self {
            cx: b[0],
            cy: b[1],
            w: b[2],
            h: b[3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f32,
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Confidence descending, then `cx`, then `cy` ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
}

/// Greedy non-maximum suppression; survivors pairwise overlap at most
/// `iou_threshold` and come back in [`detection_order`].
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Raw head output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction {
    grid_size: usize,
    raw: Tensor<f32>,
}

impl GridPrediction {
    pub fn new(raw: Tensor<f32>) -> Result<Self> {
        let s = raw.shape();
        if s.len() != 3 || s[0] != 5 || s[1] != s[2] {
            return Err(TensorError::InvalidArgument {
                op: "grid_prediction",
                reason: format!("expected [5,S,S], got {s:?}"),
            });
        }
        Ok(Self {
            grid_size: s[1],
            raw,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn raw(&self) -> &Tensor<f32> {
        &self.raw
    }

    /// Raw `(tx, ty, tw, th, tconf)` of cell `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> [f32; 5] {
        let area = self.grid_size * self.grid_size;
        let idx = row * self.grid_size + col;
        std::array::from_fn(|k| self.raw.data()[k * area + idx])
    }
}

/// Decodes every cell, drops those below `confidence_threshold`, clips the
/// rest to the unit square. Cells come back in row-major order.
pub fn decode_grid(pred: &GridPrediction, confidence_threshold: f64) -> Vec<Detection> {
    let s = pred.grid_size;
    let mut out = Vec::new();
    for i in 0..s {
        for j in 0..s {
            let [tx, ty, tw, th, tc] = pred.cell(i, j).map(|v| v as f64);
            let conf = sigmoid(tc);
            if conf < confidence_threshold {
                continue;
            }
            let raw = BBox {
                cx: ((j as f64 + sigmoid(tx)) / s as f64) as f32,
                cy: ((i as f64 + sigmoid(ty)) / s as f64) as f32,
                w: sigmoid(tw) as f32,
                h: sigmoid(th) as f32,
            };
            out.push(Detection {
                bbox: raw.clipped(),
                confidence: conf as f32,
            });
        }
    }
    out
}

/// Raw `(tx, ty)` that decode to center offsets `(ox, oy)` within a cell.
pub fn encode_offsets(ox: f64, oy: f64) -> (f64, f64) {
    (logit(ox), logit(oy))
}

/// Ground-truth assignment for one image: `(cell index, box)` pairs with at
/// most one box per cell.
pub fn assign_cells(boxes: &[BBox], grid_size: usize) -> Vec<(usize, BBox)> {
    let mut cells: Vec<(usize, BBox)> = Vec::new();
    for b in boxes {
        let col = ((b.cx as f64 * grid_size as f64).floor() as usize).min(grid_size - 1);
        let row = ((b.cy as f64 * grid_size as f64).floor() as usize).min(grid_size - 1);
        let cell = row * grid_size + col;
        match cells.iter_mut().find(|(c, _)| *c == cell) {
            Some(slot) => {
                tracing::warn!(row, col, "two ground-truth boxes share a cell; keeping the larger");
                if b.area() > slot.1.area() {
                    slot.1 = *b;
                }
            }
            None => cells.push((cell, *b)),
        }
    }
    cells.sort_by_key(|(c, _)| *c);
    cells
}

/// Loss components, each already weighted and averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DetectorLossTerms {
    pub coordinate: f64,
    pub object: f64,
    pub no_object: f64,
}

impl DetectorLossTerms {
    pub fn total(&self) -> f64 {
        self.coordinate + self.object + self.no_object
    }
}

struct DetectorLoss {
    grid_size: usize,
    /// Per image, the responsible cells and their boxes.
    targets: Vec<Vec<(usize, BBox)>>,
}

impl DetectorLoss {
    fn check_shape(shape: &[usize], images: usize) -> Result<usize> {
        if shape.len() != 4 || shape[1] != 5 || shape[2] != shape[3] || shape[0] != images {
            return Err(TensorError::ShapeMismatch {
                op: "detector_loss",
                lhs: shape.to_vec(),
                rhs: vec![images, 5],
            });
        }
        Ok(shape[2])
    }

    /// Evaluates the loss and, when `grad` is given, writes `∂loss/∂raw` into it.
    fn evaluate<E: Element>(&self, raw: &[E], mut grad: Option<&mut [E]>, upstream: f64) -> DetectorLossTerms {
        let s = self.grid_size;
        let area = s * s;
        let n = self.targets.len() as f64;
        let mut terms = DetectorLossTerms::default();
        for (img, targets) in self.targets.iter().enumerate() {
            let base = img * 5 * area;
            let mut responsible = targets.iter().peekable();
            for cell in 0..area {
                let at = |k: usize| base + k * area + cell;
                let t_conf = raw[at(4)].as_f64();
                let target = match responsible.peek() {
                    Some((c, b)) if *c == cell => {
                        responsible.next();
                        Some(*b)
                    }
                    _ => None,
                };
                match target {
                    Some(b) => {
                        let (row, col) = ((cell / s) as f64, (cell % s) as f64);
                        let wanted = [
                            b.cx as f64 * s as f64 - col,
                            b.cy as f64 * s as f64 - row,
                            b.w as f64,
                            b.h as f64,
                        ];
                        for (k, want) in wanted.iter().enumerate() {
                            let p = sigmoid(raw[at(k)].as_f64());
                            terms.coordinate += LAMBDA_COORD * (p - want).powi(2) / n;
                            if let Some(g) = grad.as_deref_mut() {
                                let d = LAMBDA_COORD * 2.0 * (p - want) * p * (1.0 - p) / n;
                                g[at(k)] = E::from_f64(d * upstream);
                            }
                        }
                        terms.object += (softplus(t_conf) - t_conf) / n;
                        if let Some(g) = grad.as_deref_mut() {
                            g[at(4)] = E::from_f64((sigmoid(t_conf) - 1.0) / n * upstream);
                        }
                    }
                    None => {
                        terms.no_object += LAMBDA_NOOBJ * softplus(t_conf) / n;
                        if let Some(g) = grad.as_deref_mut() {
                            g[at(4)] = E::from_f64(LAMBDA_NOOBJ * sigmoid(t_conf) / n * upstream);
                        }
                    }
                }
            }
        }
        terms
    }
}

impl<E: Element> CustomOp<E> for DetectorLoss {
    fn backward(&self, inputs: &[&Tensor<E>], grad_output: &[E], needs: &[bool]) -> Vec<Option<Vec<E>>> {
        if !needs[0] {
            return vec![None];
        }
        let raw = inputs[0].data();
        let mut g = vec![E::zero(); raw.len()];
        self.evaluate(raw, Some(&mut g), grad_output[0].as_f64());
        vec![Some(g)]
    }
}

/// Computes the weighted loss terms without recording anything.
pub fn detector_loss_terms<E: Element>(raw: &Tensor<E>, ground_truth: &[Vec<BBox>]) -> Result<DetectorLossTerms> {
    let s = DetectorLoss::check_shape(raw.shape(), ground_truth.len())?;
    let loss = DetectorLoss {
        grid_size: s,
        targets: ground_truth.iter().map(|b| assign_cells(b, s)).collect(),
    };
    Ok(loss.evaluate::<E>(raw.data(), None, 1.0))
}

impl<E: Element> Tape<E> {
    /// Grid detector loss over a `[N,5,S,S]` prediction batch.
    ///
    /// Responsible cells (those containing a box center) pay
    /// `λ_coord · Σ (σ(t) − target)²` over offsets and sizes plus binary
    /// cross-entropy towards confidence 1; every other cell pays
    /// `λ_noobj ·` cross-entropy towards 0. Averaged over images.
    pub fn detector_loss(&mut self, pred: Var, ground_truth: &[Vec<BBox>]) -> Result<Var> {
        let raw = self.value(pred);
        let s = DetectorLoss::check_shape(raw.shape(), ground_truth.len())?;
        let loss = DetectorLoss {
            grid_size: s,
            targets: ground_truth.iter().map(|b| assign_cells(b, s)).collect(),
        };
        let total = loss.evaluate::<E>(raw.data(), None, 1.0).total();
        Ok(self.custom(&[pred], Tensor::scalar(E::from_f64(total)), Box::new(loss)))
    }
}
