use super::tape::Op;
use super::{Element, Result, Tape, Tensor, TensorError, Var};

/// Log-probabilities of one row, max-subtracted and evaluated in `f64`.
pub fn log_softmax_row<E: Element>(row: &[E]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// Row-wise softmax of a `[N,C]` tensor.
pub fn softmax_rows<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(TensorError::InvalidArgument {
            op: "softmax",
            reason: format!("expected [N,C], got {shape:?}"),
        });
    }
    let data = logits
        .data()
        .chunks_exact(shape[1])
        .flat_map(|row| log_softmax_row(row).into_iter().map(|l| E::from_f64(l.exp())))
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, op: &'static str) -> Result<()> {
    if labels.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![rows, classes],
            rhs: vec![labels.len()],
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(TensorError::LabelOutOfRange {
            index,
            label,
            classes,
        });
    }
    Ok(())
}

pub(super) fn softmax_cross_entropy_backward<E: Element>(
    probabilities: &[E],
    labels: &[usize],
    classes: usize,
    upstream: E,
) -> Vec<E> {
    let scale = upstream.as_f64() / labels.len() as f64;
    let mut dx: Vec<E> = probabilities
        .iter()
        .map(|p| E::from_f64(p.as_f64() * scale))
        .collect();
    for (row, &label) in labels.iter().enumerate() {
        let idx = row * classes + label;
        dx[idx] = E::from_f64((probabilities[idx].as_f64() - 1.0) * scale);
    }
    dx
}

pub(super) fn center_distance_backward<E: Element>(
    embeddings: &Tensor<E>,
    centers: &[E],
    labels: &[usize],
    upstream: E,
) -> Vec<E> {
    let dim = embeddings.shape()[1];
    let scale = upstream.as_f64() / labels.len() as f64;
    embeddings
        .data()
        .chunks_exact(dim)
        .zip(labels)
        .flat_map(|(row, &label)| {
            let center = &centers[label * dim..(label + 1) * dim];
            row.iter()
                .zip(center)
                .map(move |(e, c)| E::from_f64((e.as_f64() - c.as_f64()) * scale))
        })
        .collect()
}

impl<E: Element> Tape<E> {
    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    ///
    /// Returns the scalar loss and the `[N,C]` probabilities.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<(Var, Tensor<E>)> {
        let x = self.value(logits);
        let shape = x.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("expected [N,C] logits, got {shape:?}"),
            });
        }
        check_labels(labels, shape[0], shape[1], "softmax_cross_entropy")?;
        let mut total = 0.0f64;
        let mut probabilities = Vec::with_capacity(x.numel());
        for (row, &label) in x.data().chunks_exact(shape[1]).zip(labels) {
            let log_p = log_softmax_row(row);
            total -= log_p[label];
            probabilities.extend(log_p.iter().map(|l| E::from_f64(l.exp())));
        }
        let loss = Tensor::scalar(E::from_f64(total / shape[0] as f64));
        let probs = Tensor::from_parts(shape, probabilities.clone());
        let needs = self.needs_grad(logits);
        let var = self.push(
            loss,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probabilities,
            },
            needs,
        );
        Ok((var, probs))
    }

    /// `½ · mean_i ‖embedding_i − center[label_i]‖²`; centers are constants.
    pub fn center_distance(
        &mut self,
        embeddings: Var,
        centers: &Tensor<E>,
        labels: &[usize],
    ) -> Result<Var> {
        let e = self.value(embeddings);
        let shape = e.shape().to_vec();
        if shape.len() != 2 || centers.shape().len() != 2 || centers.shape()[1] != shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "center_distance",
                lhs: shape,
                rhs: centers.shape().to_vec(),
            });
        }
        let (rows, dim) = (shape[0], shape[1]);
        check_labels(labels, rows, centers.shape()[0], "center_distance")?;
        let mut total = 0.0f64;
        for (row, &label) in e.data().chunks_exact(dim).zip(labels) {
            let center = &centers.data()[label * dim..(label + 1) * dim];
            total += row
                .iter()
                .zip(center)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum::<f64>();
        }
        let value = Tensor::scalar(E::from_f64(0.5 * total / rows as f64));
        let needs = self.needs_grad(embeddings);
        Ok(self.push(
            value,
            Op::CenterDistance {
                embeddings,
                centers: centers.data().to_vec(),
                labels: labels.to_vec(),
            },
            needs,
        ))
    }
}
