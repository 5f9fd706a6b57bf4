use std::collections::BTreeMap;

use super::{Result, Tape, Tensor, TensorError, Var};

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    pub value: Tensor<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor<f32>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || !name.is_ascii() || name.chars().any(char::is_whitespace) {
            return Err(TensorError::InvalidParameterName { name });
        }
        Ok(Self {
            name,
            value: value.with_requires_grad(true),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Ordered set of parameters with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<()> {
        if self.get(param.name()).is_some() {
            return Err(TensorError::DuplicateParameter {
                name: param.name().to_string(),
            });
        }
        self.params.push(param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Records every parameter named by `filter` on the tape as a tracked leaf.
    pub fn attach(&self, tape: &mut Tape<f32>, filter: impl Fn(&str) -> bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .filter(|p| filter(&p.name))
            .map(|p| (p.name.clone(), tape.leaf(p.value.clone())))
            .collect()
    }
}

/// SGD with momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f32, momentum: f32) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: "sgd",
                reason: format!("learning rate must be positive, got {learning_rate}"),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::InvalidArgument {
                op: "sgd",
                reason: format!("momentum must be in [0, 1), got {momentum}"),
            });
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// One SGD step: `v ← μ·v + g; p ← p − lr·v`, then gradients are cleared.
///
/// Every parameter must carry a gradient; nothing is updated otherwise.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    state: &mut OptimizerState,
) -> Result<()> {
    let params: Vec<&mut Parameter> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.value.grad().is_none()) {
        return Err(TensorError::MissingGradient {
            name: p.name.clone(),
        });
    }
    let (lr, momentum) = (state.learning_rate, state.momentum);
    for p in params {
        let grad = p.value.grad().expect("checked above").to_vec();
        let v = state
            .velocity
            .entry(p.name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((w, v), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
        p.value.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f32, grad: Option<f32>) -> Parameter {
        let mut p = Parameter::new("w", Tensor::scalar(w)).unwrap();
        if let Some(g) = grad {
            p.value.accumulate_grad(&[g]).unwrap();
        }
        p
    }

    #[test]
    fn plain_step() {
        let mut p = scalar_param(1.0, Some(0.5));
        let mut state = OptimizerState::new(0.1, 0.0).unwrap();
        sgd_step([&mut p], &mut state).unwrap();
        assert!((p.value.data()[0] - 0.95).abs() < 1e-7);
        assert!(p.value.grad().is_none());
    }

    #[test]
    fn zero_gradient_is_a_bit_exact_no_op() {
        let mut p = scalar_param(0.123_456_79, Some(0.0));
        let before = p.value.data()[0].to_bits();
        let mut state = OptimizerState::new(0.3, 0.0).unwrap();
        sgd_step([&mut p], &mut state).unwrap();
        assert_eq!(p.value.data()[0].to_bits(), before);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = 1, w1 = -0.1; v2 = 0.9 + 1 = 1.9, w2 = -0.1 - 0.19 = -0.29
        let mut p = scalar_param(0.0, None);
        let mut state = OptimizerState::new(0.1, 0.9).unwrap();
        for _ in 0..2 {
            p.value.accumulate_grad(&[1.0]).unwrap();
            sgd_step([&mut p], &mut state).unwrap();
        }
        assert!((p.value.data()[0] + 0.29).abs() < 1e-6);
        assert!((state.velocity("w").unwrap()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut a = scalar_param(1.0, Some(1.0));
        let mut b = Parameter::new("head.bias", Tensor::scalar(2.0)).unwrap();
        let mut state = OptimizerState::new(0.1, 0.0).unwrap();
        let err = sgd_step([&mut a, &mut b], &mut state).unwrap_err();
        assert_eq!(
            err,
            TensorError::MissingGradient {
                name: "head.bias".into()
            }
        );
        assert_eq!(a.value.data()[0], 1.0);
    }

    #[test]
    fn names_are_validated_and_unique() {
        assert!(Parameter::new("", Tensor::scalar(0.0)).is_err());
        assert!(Parameter::new("has space", Tensor::scalar(0.0)).is_err());
        assert!(Parameter::new("poids.é", Tensor::scalar(0.0)).is_err());
        let mut store = ParamStore::new();
        store.insert(Parameter::new("a.b", Tensor::scalar(0.0)).unwrap()).unwrap();
        assert!(matches!(
            store.insert(Parameter::new("a.b", Tensor::scalar(1.0)).unwrap()),
            Err(TensorError::DuplicateParameter { .. })
        ));
    }

    #[test]
    fn optimizer_state_validation() {
        assert!(OptimizerState::new(0.0, 0.5).is_err());
        assert!(OptimizerState::new(0.1, 1.0).is_err());
        assert!(OptimizerState::new(0.1, -0.1).is_err());
    }
}
