//! Parameterized building blocks shared by the encoder towers.
//!
//! Every block reads its weights from a [`ParameterStore`] under a name
//! prefix. `register_*` creates the weights, the graph functions use them.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{EndxError, Result};
use crate::params::{Init, ParameterStore};
use crate::tensor::{Real, Tensor};

/// FFN inner width as a multiple of the model width.
pub const FFN_EXPANSION: usize = 4;

pub fn register_linear<F: Real, R: Rng>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.init(&format!("{prefix}.w"), &[d_in, d_out], Init::Glorot, rng)?;
    store.init(&format!("{prefix}.b"), &[d_out], Init::Zeros, rng)
}

pub fn linear<F: Real>(g: &mut Graph<F>, store: &ParameterStore<F>, prefix: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{prefix}.w"));
    let b = g.param(store, &format!("{prefix}.b"));
    let xw = g.matmul(x, w);
    g.add_bias(xw, b)
}

pub fn register_layer_norm<F: Real, R: Rng>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    store.init(&format!("{prefix}.gain"), &[dim], Init::Ones, rng)?;
    store.init(&format!("{prefix}.bias"), &[dim], Init::Zeros, rng)
}

pub fn layer_norm<F: Real>(g: &mut Graph<F>, store: &ParameterStore<F>, prefix: &str, x: Var) -> Var {
    let gain = g.param(store, &format!("{prefix}.gain"));
    let bias = g.param(store, &format!("{prefix}.bias"));
    g.layer_norm(x, gain, bias)
}

pub fn register_feed_forward<F: Real, R: Rng>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    dim: usize,
    rng: &mut R,
) -> Result<()> {
    register_linear(store, &format!("{prefix}.in"), dim, FFN_EXPANSION * dim, rng)?;
    register_linear(store, &format!("{prefix}.out"), FFN_EXPANSION * dim, dim, rng)
}

/// `relu(x·W1 + b1)·W2 + b2`, applied position-wise.
pub fn feed_forward<F: Real>(g: &mut Graph<F>, store: &ParameterStore<F>, prefix: &str, x: Var) -> Var {
    let h = linear(g, store, &format!("{prefix}.in"), x);
    let h = g.relu(h);
    linear(g, store, &format!("{prefix}.out"), h)
}

/// Evaluates [`feed_forward`] on a plain tensor, checking shapes first.
pub fn feed_forward_eval<F: Real>(x: &Tensor<F>, store: &ParameterStore<F>, prefix: &str) -> Result<Tensor<F>> {
    let w1 = store
        .get(&format!("{prefix}.in.w"))
        .ok_or_else(|| EndxError::Invalid(format!("missing {prefix}.in.w")))?;
    let w2 = store
        .get(&format!("{prefix}.out.w"))
        .ok_or_else(|| EndxError::Invalid(format!("missing {prefix}.out.w")))?;
    if x.rank() != 2 || w1.shape()[0] != x.cols() || w2.shape()[0] != w1.shape()[1] || w2.shape()[1] != x.cols() {
        return Err(EndxError::Shape(format!(
            "feed_forward input {:?} with weights {:?} and {:?}",
            x.shape(),
            w1.shape(),
            w2.shape()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = feed_forward(&mut g, store, prefix, xv);
    g.check()?;
    Ok(g.value(y).clone())
}

/// Evaluates a layer norm with explicit gain and bias.
pub fn layer_norm_eval<F: Real>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(EndxError::Shape(format!(
            "layer_norm over {:?} with gain {:?} and bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(xv, gv, bv);
    g.check()?;
    Ok(g.value(y).clone())
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<F: Real>(len: usize, dim: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}
