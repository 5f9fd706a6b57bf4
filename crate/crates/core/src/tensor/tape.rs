use super::{conv, dense, loss, pool, Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `grad_output` has the shape of the op's output; the returned vector holds
/// one entry per input, `None` where `needs[i]` is false.
pub trait CustomOp<E: Element>: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        grad_output: &[E],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>>;
}

pub(super) enum Op<E: Element> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probabilities: Vec<E>,
    },
    CenterDistance {
        embeddings: Var,
        centers: Vec<E>,
        labels: Vec<usize>,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: E,
    },
    Dot {
        input: Var,
        weights: Vec<E>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomOp<E>>,
    },
}

pub(super) struct Node<E: Element> {
    pub(super) value: Tensor<E>,
    pub(super) op: Op<E>,
    pub(super) needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is single-use: build it during one forward pass, call
/// [`Tape::backward`] once, then drop it.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<E>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub(super) fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub(super) fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the output of a [`CustomOp`].
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<E>,
        rule: Box<dyn CustomOp<E>>,
    ) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs_grad(v));
        self.push(
            output.with_requires_grad(false),
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            needs_grad,
        )
    }

    /// Elementwise sum of two equally shaped values.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        let needs = self.needs_grad(lhs) || self.needs_grad(rhs);
        Ok(self.push(out, Op::Add { lhs, rhs }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: E) -> Var {
        let x = self.value(input);
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|v| *v * factor).collect(),
        );
        let needs = self.needs_grad(input);
        self.push(out, Op::Scale { input, factor }, needs)
    }

    /// `Σ input ∘ weights`, a scalar projection of any value.
    pub fn dot(&mut self, input: Var, weights: &Tensor<E>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: x.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let sum: f64 = x
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum();
        let needs = self.needs_grad(input);
        Ok(self.push(
            Tensor::scalar(E::from_f64(sum)),
            Op::Dot {
                input,
                weights: weights.data().to_vec(),
            },
            needs,
        ))
    }

    /// Back-propagates from a scalar `output`.
    ///
    /// Gradients of every recorded value that depends on a tracked leaf are
    /// returned; contributions from multiple uses of a value are summed.
    pub fn backward(&self, output: Var) -> Result<Gradients<E>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(vec![E::one()]);

        for index in (0..=output.0).rev() {
            let node = &self.nodes[index];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[index].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &grad);
            for (var, delta) in contributions {
                accumulate(&mut grads[var.0], delta);
            }
            if matches!(node.op, Op::Leaf) {
                grads[index] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<E>, grad: &[E]) -> Vec<(Var, Vec<E>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let g = conv::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    grad,
                    *stride,
                    *padding,
                    self.needs_grad(*input),
                    self.needs_grad(*kernel) || self.needs_grad(*bias),
                );
                push_some(&mut out, *input, g.input);
                push_some(&mut out, *kernel, g.kernel);
                push_some(&mut out, *bias, g.bias);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![E::zero(); self.value(*input).numel()];
                for (g, &src) in grad.iter().zip(argmax) {
                    dx[src] = dx[src] + *g;
                }
                out.push((*input, dx));
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let dx = x
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(x, g)| if *x > E::zero() { *g } else { E::zero() })
                    .collect();
                out.push((*input, dx));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let g = dense::linear_backward(
                    self.value(*input),
                    self.value(*weight),
                    grad,
                    self.needs_grad(*input),
                    self.needs_grad(*weight) || self.needs_grad(*bias),
                );
                push_some(&mut out, *input, g.0);
                push_some(&mut out, *weight, g.1);
                push_some(&mut out, *bias, g.2);
            }
            Op::GlobalAvgPool { input } => {
                out.push((*input, pool::global_avg_pool_backward(self.value(*input), grad)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probabilities,
            } => {
                let classes = self.value(*logits).shape()[1];
                out.push((
                    *logits,
                    loss::softmax_cross_entropy_backward(probabilities, labels, classes, grad[0]),
                ));
            }
            Op::CenterDistance {
                embeddings,
                centers,
                labels,
            } => {
                out.push((
                    *embeddings,
                    loss::center_distance_backward(
                        self.value(*embeddings),
                        centers,
                        labels,
                        grad[0],
                    ),
                ));
            }
            Op::Add { lhs, rhs } => {
                if self.needs_grad(*lhs) {
                    out.push((*lhs, grad.to_vec()));
                }
                if self.needs_grad(*rhs) {
                    out.push((*rhs, grad.to_vec()));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, grad.iter().map(|g| *g * *factor).collect()));
            }
            Op::Dot { input, weights } => {
                out.push((*input, weights.iter().map(|w| *w * grad[0]).collect()));
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor<E>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs_grad(*v)).collect();
                for (var, g) in inputs.iter().zip(rule.backward(&values, grad, &needs)) {
                    push_some(&mut out, *var, g);
                }
            }
        }
        out.retain(|(var, _)| self.needs_grad(*var));
        out
    }
}

fn push_some<E>(out: &mut Vec<(Var, Vec<E>)>, var: Var, grad: Option<Vec<E>>) {
    if let Some(g) = grad {
        out.push((var, g));
    }
}

fn accumulate<E: Element>(slot: &mut Option<Vec<E>>, delta: Vec<E>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a = *a + *d),
        None => *slot = Some(delta),
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<E> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the output with respect to `var`, if it depends on it.
    pub fn get(&self, var: Var) -> Option<&[E]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<E>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}
