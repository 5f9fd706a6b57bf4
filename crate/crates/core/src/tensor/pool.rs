use super::tape::Op;
use super::{Element, Result, Tape, Tensor, TensorError, Var};

/// Max pooling forward pass. Returns the output and, per output cell, the
/// flat input index of the first (row-major) maximal element.
pub(super) fn maxpool2d_forward<E: Element>(
    input: &Tensor<E>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<E>, Vec<usize>)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool2d",
            lhs: shape.to_vec(),
            rhs: vec![window, window],
        });
    }
    if window == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "maxpool2d",
            reason: "window and stride must be positive".into(),
        });
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h < window || w < window {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool2d",
            lhs: shape.to_vec(),
            rhs: vec![window, window],
        });
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        if window == 2 && stride == 2 {
            for i in 0..oh {
                let r0 = base + 2 * i * w;
                let (top, bottom) = (&data[r0..r0 + w], &data[r0 + w..r0 + 2 * w]);
                for j in 0..ow {
                    let candidates = [
                        (top[2 * j], r0 + 2 * j),
                        (top[2 * j + 1], r0 + 2 * j + 1),
                        (bottom[2 * j], r0 + w + 2 * j),
                        (bottom[2 * j + 1], r0 + w + 2 * j + 1),
                    ];
                    let mut best = candidates[0];
                    for cand in &candidates[1..] {
                        if cand.0 > best.0 {
                            best = *cand;
                        }
                    }
                    out.push(best.0);
                    argmax.push(best.1);
                }
            }
            continue;
        }
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * w + j * stride;
                for a in 0..window {
                    let row = base + (i * stride + a) * w + j * stride;
                    for idx in row..row + window {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

pub(super) fn global_avg_pool_backward<E: Element>(input: &Tensor<E>, grad: &[E]) -> Vec<E> {
    let shape = input.shape();
    let area = shape[2] * shape[3];
    let inv = E::from_f64(1.0 / area as f64);
    let mut dx = Vec::with_capacity(input.numel());
    for g in grad {
        dx.extend(std::iter::repeat_n(*g * inv, area));
    }
    dx
}

impl<E: Element> Tape<E> {
    /// Max pooling over square windows. Ties route the gradient to the first
    /// maximal element in row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = maxpool2d_forward(self.value(input), window, stride)?;
        let needs = self.needs_grad(input);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, needs))
    }

    /// Mean over the spatial axes: `[N,C,H,W]` to `[N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                reason: format!("expected [N,C,H,W], got {shape:?}"),
            });
        }
        let area = shape[2] * shape[3];
        let data = x
            .data()
            .chunks_exact(area)
            .map(|plane| E::from_f64(plane.iter().map(|v| v.as_f64()).sum::<f64>() / area as f64))
            .collect();
        let out = Tensor::from_parts(vec![shape[0], shape[1]], data);
        let needs = self.needs_grad(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, needs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn takes_window_maximum() {
        let (y, _) = maxpool2d_forward(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let (y, _) = maxpool2d_forward(&Tensor::full(&[2, 3, 6, 6], 1.25f32), 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        assert!(y.data().iter().all(|v| *v == 1.25));
    }

    #[test]
    fn tie_routes_gradient_to_first_element() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], vec![1.0; 4]).with_requires_grad(true));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let s = tape.dot(y, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn window_larger_than_input_is_a_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            maxpool2d_forward(&x, 4, 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn odd_sizes_floor() {
        let x = t(&[1, 1, 3, 5], (0..15).map(|v| v as f32).collect());
        let (y, arg) = maxpool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[6.0, 8.0]);
        assert_eq!(arg, vec![6, 8]);
    }

    #[test]
    fn global_average() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 2.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 0.0]);
        let s = tape.dot(y, &Tensor::new(vec![1, 2], vec![1.0, 4.0]).unwrap()).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.5, 0.5, 2.0, 2.0]);
    }
}
