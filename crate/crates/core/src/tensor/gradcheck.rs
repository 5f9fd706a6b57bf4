//! Finite-difference verification of analytic gradients.

use serde::Serialize;

use super::{Element, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<E, F>(f: &F, inputs: &[Tensor<E>]) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    value
        .item()
        .map(Element::as_f64)
        .ok_or_else(|| TensorError::NotScalar {
            shape: value.shape().to_vec(),
        })
}

/// Compares the tape's gradient of `f` with central differences
/// `(f(x+ε) − f(x−ε)) / 2ε`, element by element, for every named input.
pub fn grad_check<E, F>(
    f: F,
    inputs: &[(&str, Tensor<E>)],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            reason: format!("epsilon must be positive, got {epsilon}"),
        });
    }
    let mut values: Vec<Tensor<E>> = inputs
        .iter()
        .map(|(_, t)| t.clone().with_requires_grad(true))
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut entries = Vec::with_capacity(inputs.len());
    for (i, (name, _)) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; values[i].numel()],
        };
        let mut entry = GradCheckEntry {
            name: name.to_string(),
            elements: analytic.len(),
            max_relative_error: 0.0,
            max_abs_error: 0.0,
        };
        for (j, a) in analytic.iter().enumerate() {
            let original = values[i].data()[j];
            values[i].data_mut()[j] = E::from_f64(original.as_f64() + epsilon);
            let plus = evaluate(&f, &values)?;
            values[i].data_mut()[j] = E::from_f64(original.as_f64() - epsilon);
            let minus = evaluate(&f, &values)?;
            values[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            entry.max_relative_error = entry.max_relative_error.max(relative_error(*a, numeric));
            entry.max_abs_error = entry.max_abs_error.max((a - numeric).abs());
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { tolerance, entries })
}
