//! Named trainable weights plus their optimizer moments.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{EndxError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub value: Tensor<F>,
    pub(crate) first_moment: Tensor<F>,
    pub(crate) second_moment: Tensor<F>,
}

/// Hierarchically named parameters (`"dual.enc.layer0.wq"`) with Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<F> {
    params: BTreeMap<String, Parameter<F>>,
    pub(crate) step: u64,
}

pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) using the last two extents.
    Glorot,
    Zeros,
    Ones,
}

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(EndxError::Invalid(format!("duplicate parameter {name}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Parameter { value, first_moment: zeros.clone(), second_moment: zeros },
        );
        Ok(())
    }

    pub fn init<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Glorot => {
                let (fan_in, fan_out) = match shape {
                    [a] => (*a, *a),
                    [.., a, b] => (*a, *b),
                    [] => (1, 1),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect()
            }
        };
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name).map(|p| &p.value)
    }

    /// Replaces a value; the shape must match the existing one.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| EndxError::Invalid(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(EndxError::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<F>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn cast<G: Real>(&self) -> ParameterStore<G> {
        let mut out = ParameterStore::new();
        for (k, p) in &self.params {
            out.insert(k, p.value.cast()).expect("unique names");
        }
        out.step = self.step;
        out
    }
}

/// `∂loss/∂p` for every parameter in `store`; parameters the loss does not
/// reach get zeros.
pub fn gradient_of<F: Real>(
    graph: &Graph<F>,
    loss: Var,
    store: &ParameterStore<F>,
) -> Result<BTreeMap<String, Tensor<F>>> {
    let grads = graph.backward(loss)?;
    let vars = graph.param_vars();
    Ok(store
        .iter()
        .map(|(name, value)| {
            let g = vars
                .get(name)
                .and_then(|&v| grads.get(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            (name.to_string(), g)
        })
        .collect())
}

/// Gradients of the parameters that appear on the tape only.
pub fn tape_gradients<F: Real>(graph: &Graph<F>, loss: Var) -> Result<BTreeMap<String, Tensor<F>>> {
    let grads = graph.backward(loss)?;
    Ok(graph
        .param_vars()
        .iter()
        .map(|(name, &v)| {
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
            (name.clone(), g)
        })
        .collect())
}
