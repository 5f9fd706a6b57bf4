use super::tape::Op;
use super::{Element, Result, Tape, Tensor, TensorError, Var};

pub(super) fn linear_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (xs, ws) = (input.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if bias.shape() != [ws[0]] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: ws.to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
    let mut out: Vec<E> = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    E::gemm(n, d_in, d_out, input.data(), false, weight.data(), true, &mut out, true);
    Ok(Tensor::from_parts(vec![n, d_out], out))
}

type LinearGrads<E> = (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>);

pub(super) fn linear_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad: &[E],
    want_input: bool,
    want_params: bool,
) -> LinearGrads<E> {
    let (n, d_in) = (input.shape()[0], input.shape()[1]);
    let d_out = weight.shape()[0];
    let dx = want_input.then(|| {
        let mut dx = vec![E::zero(); n * d_in];
        E::gemm(n, d_out, d_in, grad, false, weight.data(), false, &mut dx, false);
        dx
    });
    let (dw, db) = if want_params {
        let mut dw = vec![E::zero(); d_out * d_in];
        E::gemm(d_out, n, d_in, grad, true, input.data(), false, &mut dw, false);
        let db = (0..d_out)
            .map(|o| E::from_f64((0..n).map(|s| grad[s * d_out + o].as_f64()).sum()))
            .collect();
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    (dx, dw, db)
}

impl<E: Element> Tape<E> {
    /// Fully connected layer: `input·weightᵀ + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let needs = self.needs_grad(input) || self.needs_grad(weight) || self.needs_grad(bias);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|v| v.max(E::zero())).collect(),
        );
        let needs = self.needs_grad(input);
        self.push(out, Op::Relu { input }, needs)
    }
}
