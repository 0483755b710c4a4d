//! Multi-hop self-attention pooling of token representations into a single
//! sentence embedding.
//!
//! For a sequence `H` (`len x d_r`) each of the `r` hops attends over the
//! valid positions with weights `softmax(W2 · tanh(W1 · Hᵀ))`. The `r`
//! pooled vectors are flattened and projected to `d_e`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::{ContextualizedSeq, EncodedBatch};
use crate::error::{EndxError, Result};
use crate::layers;
use crate::params::{Init, ParameterStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub hops: usize,
    /// Hidden width of the scoring MLP; 0 means "same as d_r".
    pub attention_dim: usize,
    /// Output embedding width; 0 means "same as d_r".
    pub embedding_dim: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self { hops: 4, attention_dim: 0, embedding_dim: 0 }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops == 0 {
            return Err(EndxError::Config("aggregator needs at least one hop".into()));
        }
        Ok(())
    }

    pub fn attention_dim(&self, model_dim: usize) -> usize {
        if self.attention_dim == 0 { model_dim } else { self.attention_dim }
    }

    pub fn embedding_dim(&self, model_dim: usize) -> usize {
        if self.embedding_dim == 0 { model_dim } else { self.embedding_dim }
    }
}

pub fn register_aggregator<F: Real, R: Rng>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    cfg: &AggregatorConfig,
    model_dim: usize,
    rng: &mut R,
) -> Result<()> {
    let da = cfg.attention_dim(model_dim);
    store.init(&format!("{prefix}.w1"), &[model_dim, da], Init::Glorot, rng)?;
    store.init(&format!("{prefix}.w2"), &[da, cfg.hops], Init::Glorot, rng)?;
    layers::register_linear(store, &format!("{prefix}.proj"), cfg.hops * model_dim, cfg.embedding_dim(model_dim), rng)
}

/// Hop attention weights `[batch, hops, len]`; padding gets exact zeros.
pub fn hop_attention<F: Real>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    seq: &EncodedBatch,
    hops: usize,
) -> Result<Var> {
    for b in 0..seq.batch {
        if !seq.mask[b * seq.len..(b + 1) * seq.len].iter().any(|&m| m) {
            return Err(EndxError::Invalid("cannot aggregate an all-padding sequence".into()));
        }
    }
    let w1 = g.param(store, &format!("{prefix}.w1"));
    let w2 = g.param(store, &format!("{prefix}.w2"));
    let t = g.matmul(seq.h, w1);
    let t = g.tanh(t);
    let logits = g.matmul(t, w2);
    let logits = g.reshape(logits, &[seq.batch, seq.len, hops]);
    let logits = g.transpose(logits);
    let mask = hop_mask(&seq.mask, seq.batch, seq.len, hops);
    Ok(g.softmax(logits, Some(&mask)))
}

fn hop_mask(mask: &[bool], batch: usize, len: usize, hops: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * hops * len);
    for b in 0..batch {
        for _ in 0..hops {
            out.extend_from_slice(&mask[b * len..(b + 1) * len]);
        }
    }
    out
}

/// Pools an encoded batch into `[batch, d_e]`.
pub fn aggregate_batch<F: Real>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    cfg: &AggregatorConfig,
    seq: &EncodedBatch,
) -> Result<Var> {
    let d = g.value(seq.h).cols();
    let attn = hop_attention(g, store, prefix, seq, cfg.hops)?;
    let h3 = g.reshape(seq.h, &[seq.batch, seq.len, d]);
    let pooled = g.batch_matmul(attn, h3, false);
    let flat = g.reshape(pooled, &[seq.batch, cfg.hops * d]);
    Ok(layers::linear(g, store, &format!("{prefix}.proj"), flat))
}

/// Pools one sequence with frozen parameters, returning a length-`d_e` vector.
pub fn aggregate<F: Real>(
    seq: &ContextualizedSeq<F>,
    cfg: &AggregatorConfig,
    store: &ParameterStore<F>,
    prefix: &str,
) -> Result<Tensor<F>> {
    if seq.repr.rank() != 2 || seq.repr.rows() != seq.mask.len() {
        return Err(EndxError::Shape(format!("sequence {:?} with {} mask flags", seq.repr.shape(), seq.mask.len())));
    }
    let mut g = Graph::new();
    let h = g.constant(seq.repr.clone());
    let enc = EncodedBatch { h, mask: seq.mask.clone(), batch: 1, len: seq.mask.len() };
    let out = aggregate_batch(&mut g, store, prefix, cfg, &enc)?;
    g.check()?;
    let v = g.value(out).clone();
    let n = v.len();
    v.reshape(&[n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, hops: usize) -> (ParameterStore<f64>, AggregatorConfig) {
        let cfg = AggregatorConfig { hops, attention_dim: 5, embedding_dim: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        register_aggregator(&mut store, "agg", &cfg, d, &mut rng).unwrap();
        (store, cfg)
    }

    fn seq(rows: &[Vec<f64>], mask: &[bool]) -> ContextualizedSeq<f64> {
        ContextualizedSeq { repr: Tensor::from_rows(rows).unwrap(), mask: mask.to_vec() }
    }

    fn project(store: &ParameterStore<f64>, pooled: &[f64]) -> Vec<f64> {
        let w = store.get("agg.proj.w").unwrap();
        let b = store.get("agg.proj.b").unwrap();
        (0..w.cols())
            .map(|j| b.data()[j] + pooled.iter().enumerate().map(|(i, p)| p * w.at(i, j)).sum::<f64>())
            .collect()
    }

    #[test]
    fn single_token_is_projected_directly() {
        let (store, cfg) = setup(4, 3);
        let token = vec![0.5, -1.0, 2.0, 0.25];
        let out = aggregate(&seq(std::slice::from_ref(&token), &[true]), &cfg, &store, "agg").unwrap();
        let pooled: Vec<f64> = (0..3).flat_map(|_| token.clone()).collect();
        let want = project(&store, &pooled);
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_pool_the_mean() {
        let (mut store, cfg) = setup(2, 2);
        store.set("agg.w2", Tensor::zeros(&[5, 2])).unwrap();
        let rows = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 0.0], vec![-1.0, 4.0]];
        let out = aggregate(&seq(&rows, &[true; 4]), &cfg, &store, "agg").unwrap();
        let mean = [2.0, 1.0];
        let want = project(&store, &[mean[0], mean[1], mean[0], mean[1]]);
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn appended_padding_is_ignored() {
        let (store, cfg) = setup(2, 3);
        let rows = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![0.5, 0.7]];
        let a = aggregate(&seq(&rows, &[true; 3]), &cfg, &store, "agg").unwrap();
        let mut padded = rows.clone();
        padded.push(vec![0.0, 0.0]);
        padded.push(vec![0.0, 0.0]);
        let b = aggregate(&seq(&padded, &[true, true, true, false, false]), &cfg, &store, "agg").unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn hop_weights_are_distributions() {
        let (store, cfg) = setup(2, 3);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_f64(&[4, 2], &[1.0, 2.0, 3.0, -2.0, 0.5, 0.7, 0.0, 0.0]).unwrap());
        let enc = EncodedBatch { h, mask: vec![true, true, true, false], batch: 1, len: 4 };
        let attn = hop_attention(&mut g, &store, "agg", &enc, cfg.hops).unwrap();
        let a = g.value(attn);
        for r in 0..3 {
            let row = a.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[3], 0.0);
        }
    }

    #[test]
    fn all_padding_is_error() {
        let (store, cfg) = setup(2, 1);
        assert!(aggregate(&seq(&[vec![0.0, 0.0]], &[false]), &cfg, &store, "agg").is_err());
    }

    #[test]
    fn matches_loop_oracle() {
        let (store, cfg) = setup(4, 2);
        let rows = vec![vec![0.3, -0.2, 1.1, 0.0], vec![-0.7, 0.4, 0.2, 0.9], vec![1.5, -1.0, 0.3, 0.6]];
        let out = aggregate(&seq(&rows, &[true; 3]), &cfg, &store, "agg").unwrap();

        let w1 = store.get("agg.w1").unwrap();
        let w2 = store.get("agg.w2").unwrap();
        let mut pooled = vec![0.0; 2 * 4];
        for hop in 0..2 {
            let logits: Vec<f64> = rows
                .iter()
                .map(|h| {
                    (0..5)
                        .map(|a| {
                            let t: f64 = (0..4).map(|i| h[i] * w1.at(i, a)).sum::<f64>().tanh();
                            t * w2.at(a, hop)
                        })
                        .sum()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (t, h) in rows.iter().enumerate() {
                let w = logits[t].exp() / z;
                for i in 0..4 {
                    pooled[hop * 4 + i] += w * h[i];
                }
            }
        }
        let want = project(&store, &pooled);
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
