//! Cross-attention block of the Cross-Encoders.
//!
//! A `source` sentence is refined under guidance of its matched `guide`
//! sentence. The guide supplies queries and the source supplies keys and
//! values, so the refined sequence has one row per guide position:
//! refining a question of `N` tokens against an answer of `M` tokens gives
//! `M` rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoders::{multi_head_attention, ContextualizedSeq, EncodedBatch};
use crate::error::{EndxError, Result};
use crate::layers;
use crate::params::{Init, ParameterStore};
use crate::tensor::{Real, Tensor};

/// Parameter prefix of the (single) cross-attention block.
pub const CROSS_BLOCK: &str = "cross.xattn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossAttentionConfig {
    pub heads: usize,
}

impl Default for CrossAttentionConfig {
    fn default() -> Self {
        Self { heads: 4 }
    }
}

impl CrossAttentionConfig {
    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.heads == 0 || !model_dim.is_multiple_of(self.heads) {
            return Err(EndxError::Config(format!(
                "model_dim {model_dim} is not divisible by {} cross-attention heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self, model_dim: usize) -> usize {
        model_dim / self.heads
    }
}

pub fn register_cross_attention<F: Real, R: Rng>(
    store: &mut ParameterStore<F>,
    model_dim: usize,
    rng: &mut R,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        store.init(&format!("{CROSS_BLOCK}.{w}"), &[model_dim, model_dim], Init::Glorot, rng)?;
    }
    layers::register_feed_forward(store, &format!("{CROSS_BLOCK}.ffn"), model_dim, rng)?;
    layers::register_layer_norm(store, &format!("{CROSS_BLOCK}.ln"), model_dim, rng)
}

fn check_pair(source: &EncodedBatch, guide: &EncodedBatch) -> Result<()> {
    if source.batch != guide.batch {
        return Err(EndxError::Shape(format!("{} sources for {} guides", source.batch, guide.batch)));
    }
    if guide.len == 0 {
        return Err(EndxError::EmptyInput);
    }
    for b in 0..source.batch {
        if !source.mask[b * source.len..(b + 1) * source.len].iter().any(|&m| m) {
            return Err(EndxError::Invalid("cross attention over an all-padding source".into()));
        }
    }
    Ok(())
}

/// `LayerNorm(H' + FFN(H'))` with `H' = concat(heads)·W_o`. Output rows
/// follow the guide; guide padding rows are zeroed.
pub fn cross_refine_batch<F: Real>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    cfg: &CrossAttentionConfig,
    source: &EncodedBatch,
    guide: &EncodedBatch,
) -> Result<EncodedBatch> {
    check_pair(source, guide)?;
    let key_mask = source_key_mask(source, cfg.heads, guide.len);
    let attended = multi_head_attention(
        g,
        store,
        CROSS_BLOCK,
        guide.h,
        guide.len,
        source.h,
        source.len,
        source.batch,
        cfg.heads,
        &key_mask,
    );
    let f = layers::feed_forward(g, store, &format!("{CROSS_BLOCK}.ffn"), attended);
    let x = g.add(attended, f);
    let x = layers::layer_norm(g, store, &format!("{CROSS_BLOCK}.ln"), x);
    let h = g.row_mask(x, &guide.mask);
    Ok(EncodedBatch { h, mask: guide.mask.clone(), batch: guide.batch, len: guide.len })
}

fn source_key_mask(source: &EncodedBatch, heads: usize, queries: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(source.batch * heads * queries * source.len);
    for b in 0..source.batch {
        let row = &source.mask[b * source.len..(b + 1) * source.len];
        for _ in 0..heads * queries {
            out.extend_from_slice(row);
        }
    }
    out
}

fn to_batch<F: Real>(g: &mut Graph<F>, seq: &ContextualizedSeq<F>) -> Result<EncodedBatch> {
    if seq.repr.rank() != 2 || seq.repr.rows() != seq.mask.len() {
        return Err(EndxError::Shape(format!("sequence {:?} with {} mask flags", seq.repr.shape(), seq.mask.len())));
    }
    let h = g.constant(seq.repr.clone());
    Ok(EncodedBatch { h, mask: seq.mask.clone(), batch: 1, len: seq.mask.len() })
}

/// Output of head `head` alone: `softmax(G·Wq (S·Wk)ᵀ / √d_h) · S·Wv`
/// restricted to that head's column slice; `guide_len x d_h`.
pub fn cross_head<F: Real>(
    source: &ContextualizedSeq<F>,
    guide: &ContextualizedSeq<F>,
    store: &ParameterStore<F>,
    cfg: &CrossAttentionConfig,
    head: usize,
) -> Result<Tensor<F>> {
    if guide.mask.is_empty() {
        return Err(EndxError::EmptyInput);
    }
    if source.repr.cols() != guide.repr.cols() {
        return Err(EndxError::Shape("source and guide widths differ".into()));
    }
    let d = source.repr.cols();
    cfg.validate(d)?;
    if head >= cfg.heads {
        return Err(EndxError::Invalid(format!("head {head} of {}", cfg.heads)));
    }
    let dh = cfg.head_dim(d);
    let mut g = Graph::new();
    let s = to_batch(&mut g, source)?;
    let gd = to_batch(&mut g, guide)?;
    check_pair(&s, &gd)?;
    let proj = |g: &mut Graph<F>, x, w: &str| {
        let wv = g.param(store, &format!("{CROSS_BLOCK}.{w}"));
        let full = g.matmul(x, wv);
        g.slice_cols(full, head * dh, (head + 1) * dh)
    };
    let q = proj(&mut g, gd.h, "wq");
    let k = proj(&mut g, s.h, "wk");
    let v = proj(&mut g, s.h, "wv");
    let scores = g.matmul_t(q, k, false, true);
    let scores = g.scale(scores, F::one() / F::from_usize(dh).unwrap().sqrt());
    let mask: Vec<bool> = (0..gd.len).flat_map(|_| source.mask.iter().copied()).collect();
    let attn = g.softmax(scores, Some(&mask));
    let out = g.matmul(attn, v);
    g.check()?;
    Ok(g.value(out).clone())
}

/// Refines `source` under `guide` with frozen parameters.
pub fn cross_refine<F: Real>(
    source: &ContextualizedSeq<F>,
    guide: &ContextualizedSeq<F>,
    store: &ParameterStore<F>,
    cfg: &CrossAttentionConfig,
) -> Result<ContextualizedSeq<F>> {
    if source.repr.cols() != guide.repr.cols() {
        return Err(EndxError::Shape("source and guide widths differ".into()));
    }
    cfg.validate(source.repr.cols())?;
    let mut g = Graph::new();
    let s = to_batch(&mut g, source)?;
    let gd = to_batch(&mut g, guide)?;
    let out = cross_refine_batch(&mut g, store, cfg, &s, &gd)?;
    g.check()?;
    Ok(ContextualizedSeq { repr: g.value(out.h).clone(), mask: out.mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(d: usize) -> ParameterStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new();
        register_cross_attention(&mut s, d, &mut rng).unwrap();
        s
    }

    fn seq(rows: &[Vec<f64>]) -> ContextualizedSeq<f64> {
        ContextualizedSeq { repr: Tensor::from_rows(rows).unwrap(), mask: vec![true; rows.len()] }
    }

    #[test]
    fn single_source_token_gives_its_value_row() {
        let s = store(4);
        let cfg = CrossAttentionConfig { heads: 2 };
        let source = seq(&[vec![0.5, -1.0, 2.0, 0.3]]);
        let guide = seq(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, -1.0, 0.5], vec![0.3, 0.3, 0.3, 0.3]]);
        let out = cross_head(&source, &guide, &s, &cfg, 1).unwrap();
        assert_eq!(out.shape(), &[3, 2]);
        let wv = s.get("cross.xattn.wv").unwrap();
        for j in 0..2 {
            let want: f64 = (0..4).map(|i| source.repr.at(0, i) * wv.at(i, 2 + j)).sum();
            for r in 0..3 {
                assert!((out.at(r, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let mut s = store(2);
        s.set("cross.xattn.wq", Tensor::zeros(&[2, 2])).unwrap();
        let cfg = CrossAttentionConfig { heads: 1 };
        let source = seq(&[vec![1.0, 2.0], vec![3.0, -4.0]]);
        let guide = seq(&[vec![0.2, 0.1]]);
        let out = cross_head(&source, &guide, &s, &cfg, 0).unwrap();
        let wv = s.get("cross.xattn.wv").unwrap();
        for j in 0..2 {
            let v0 = 1.0 * wv.at(0, j) + 2.0 * wv.at(1, j);
            let v1 = 3.0 * wv.at(0, j) - 4.0 * wv.at(1, j);
            assert!((out.at(0, j) - 0.5 * (v0 + v1)).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_by_two() {
        // Wq = I, Wk = I, Wv = [[1,0],[0,2]], one head, d_h = 2.
        let mut s = store(2);
        s.set("cross.xattn.wq", Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        s.set("cross.xattn.wk", Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        s.set("cross.xattn.wv", Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let cfg = CrossAttentionConfig { heads: 1 };
        let source = seq(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let guide = seq(&[vec![2.0, 0.0], vec![0.0, 0.0]]);
        let out = cross_head(&source, &guide, &s, &cfg, 0).unwrap();
        // Row 0 logits: [2, 0]/√2 → weights [w, 1-w] with w = 1/(1+e^{-√2}).
        let w = 1.0 / (1.0 + (-(2.0f64).sqrt()).exp());
        let want = [[w, 2.0 * (1.0 - w)], [0.5, 1.0]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((out.at(r, c) - want[r][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn refine_rows_follow_the_guide() {
        let s = store(4);
        let cfg = CrossAttentionConfig { heads: 2 };
        let q = seq(&vec![vec![0.1, 0.2, 0.3, 0.4]; 3]);
        let a = seq(&vec![vec![0.5, -0.2, 0.1, 0.0]; 5]);
        assert_eq!(cross_refine(&q, &a, &s, &cfg).unwrap().repr.shape(), &[5, 4]);
        assert_eq!(cross_refine(&a, &q, &s, &cfg).unwrap().repr.shape(), &[3, 4]);
    }

    #[test]
    fn degenerate_weights_give_layer_norm_bias() {
        let mut s = store(4);
        for name in s.names().map(str::to_string).collect::<Vec<_>>() {
            if name.contains(".wo") || name.contains(".ffn.") {
                let shape = s.get(&name).unwrap().shape().to_vec();
                s.set(&name, Tensor::zeros(&shape)).unwrap();
            }
        }
        let bias = Tensor::from_f64(&[4], &[0.1, -0.2, 0.3, 0.4]).unwrap();
        s.set("cross.xattn.ln.bias", bias.clone()).unwrap();
        let cfg = CrossAttentionConfig { heads: 2 };
        let out = cross_refine(&seq(&[vec![1.0, 2.0, 3.0, 4.0]]), &seq(&[vec![0.5; 4], vec![1.5; 4]]), &s, &cfg).unwrap();
        for r in 0..2 {
            assert_eq!(out.repr.row(r), bias.data());
        }
    }

    #[test]
    fn empty_guide_is_error() {
        let s = store(2);
        let cfg = CrossAttentionConfig { heads: 1 };
        let empty = ContextualizedSeq { repr: Tensor::<f64>::zeros(&[0, 2]), mask: vec![] };
        assert!(cross_head(&seq(&[vec![1.0, 2.0]]), &empty, &s, &cfg, 0).is_err());
    }
}
