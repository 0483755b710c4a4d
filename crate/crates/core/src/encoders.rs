//! Token vocabulary, tokenization, and the contextual encoders
//! (transformer or bidirectional recurrent) used by both towers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{EndxError, Result};
use crate::layers::{self, sinusoidal_positions};
use crate::params::{Init, ParameterStore};
use crate::tensor::{Real, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_VOCAB_CAP: usize = 30_000;

/// Lowercases and splits on whitespace and punctuation boundaries.
/// Each punctuation character becomes its own token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `texts`, keeping at most `cap` ids
    /// (reserved ones included). Frequent tokens first, ties alphabetical.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap.saturating_sub(2));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    fn from_tokens(extra: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(extra);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// File form: one token per line, line `n` holds id `n + 2`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[2..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let mut extra = Vec::new();
        for (n, line) in s.lines().enumerate() {
            if line.is_empty() || !seen.insert(line) || line == PAD_TOKEN || line == UNK_TOKEN {
                return Err(EndxError::Parse {
                    path: format!("vocabulary line {}", n + 1),
                    message: format!("invalid or duplicate token {line:?}"),
                });
            }
            extra.push(line.to_string());
        }
        Ok(Self::from_tokens(extra))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| EndxError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| EndxError::io(path, e))?;
        Self::from_file_string(&s)
    }

    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Token ids for `text`, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Err(EndxError::EmptyInput);
    }
    let mut ids: Vec<usize> = split_tokens(text).iter().map(|t| vocab.id(t)).collect();
    ids.truncate(max_len.max(1));
    Ok(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Rnn,
    Gru,
    Lstm,
}

impl EncoderKind {
    fn gates(self) -> usize {
        match self {
            EncoderKind::Transformer | EncoderKind::Rnn => 1,
            EncoderKind::Gru => 3,
            EncoderKind::Lstm => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub max_question_len: usize,
    pub max_answer_len: usize,
    /// The cross tower reuses the dual tower's embedding table and encoder.
    pub shared_towers: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Transformer,
            layers: 2,
            model_dim: 64,
            heads: 4,
            max_question_len: 64,
            max_answer_len: 128,
            shared_towers: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 {
            return Err(EndxError::Config("encoder layers and model_dim must be positive".into()));
        }
        if self.kind == EncoderKind::Transformer && (self.heads == 0 || !self.model_dim.is_multiple_of(self.heads)) {
            return Err(EndxError::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.max_question_len == 0 || self.max_answer_len == 0 {
            return Err(EndxError::Config("maximum sequence lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.max_question_len.max(self.max_answer_len)
    }
}

/// Which tower a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Dual,
    Cross,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Dual => "dual",
            Tower::Cross => "cross",
        }
    }
}

/// Encoded tokens of one sentence: `len x d_r` plus a validity flag per
/// position. Padding rows are zero.
#[derive(Clone, Debug)]
pub struct ContextualizedSeq<F> {
    pub repr: Tensor<F>,
    pub mask: Vec<bool>,
}

/// A right-padded batch of token-id sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl SeqBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(EndxError::EmptyInput);
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 || seqs.iter().any(Vec::is_empty) {
            return Err(EndxError::EmptyInput);
        }
        Self::with_len(seqs, len)
    }

    /// Pads every sequence to exactly `len`.
    pub fn with_len(seqs: &[Vec<usize>], len: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.len() > len {
                return Err(EndxError::SequenceTooLong { len: s.len(), max: len });
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD_ID, len - s.len()));
            mask.extend(std::iter::repeat_n(true, s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Ok(Self { ids, mask, batch: seqs.len(), len })
    }

    /// Key mask for attention scores of shape `[batch*heads, queries, len]`.
    pub fn key_mask(&self, heads: usize, queries: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.batch * heads * queries * self.len);
        for b in 0..self.batch {
            let row = &self.mask[b * self.len..(b + 1) * self.len];
            for _ in 0..heads * queries {
                out.extend_from_slice(row);
            }
        }
        out
    }
}

/// Encoder output on the tape: `h` is `[batch*len, d_r]`.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub h: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Parameter prefix of the encoder stack actually used by `tower`.
pub fn encoder_prefix(cfg: &EncoderConfig, tower: Tower) -> &'static str {
    if cfg.shared_towers {
        Tower::Dual.prefix()
    } else {
        tower.prefix()
    }
}

pub fn register_encoder<F: Real, R: Rng>(
    store: &mut ParameterStore<F>,
    cfg: &EncoderConfig,
    vocab_size: usize,
    tower: Tower,
    rng: &mut R,
) -> Result<()> {
    if tower == Tower::Cross && cfg.shared_towers {
        return Ok(());
    }
    let p = tower.prefix();
    let d = cfg.model_dim;
    store.init(&format!("{p}.embed"), &[vocab_size, d], Init::Glorot, rng)?;
    for layer in 0..cfg.layers {
        let lp = format!("{p}.enc.layer{layer}");
        match cfg.kind {
            EncoderKind::Transformer => {
                for w in ["wq", "wk", "wv", "wo"] {
                    store.init(&format!("{lp}.attn.{w}"), &[d, d], Init::Glorot, rng)?;
                }
                layers::register_layer_norm(store, &format!("{lp}.ln1"), d, rng)?;
                layers::register_feed_forward(store, &format!("{lp}.ffn"), d, rng)?;
                layers::register_layer_norm(store, &format!("{lp}.ln2"), d, rng)?;
            }
            kind => {
                let gd = kind.gates() * d;
                for dir in ["fwd", "bwd"] {
                    store.init(&format!("{lp}.{dir}.wx"), &[d, gd], Init::Glorot, rng)?;
                    store.init(&format!("{lp}.{dir}.wh"), &[d, gd], Init::Glorot, rng)?;
                    store.init(&format!("{lp}.{dir}.b"), &[gd], Init::Zeros, rng)?;
                }
            }
        }
    }
    Ok(())
}

/// Multi-head scaled dot-product attention where `query_src` supplies the
/// queries and `kv_src` keys and values. `key_mask` covers the score tensor
/// `[batch*heads, q_len, kv_len]`. Shared by self- and cross-attention.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_attention<F: Real>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    query_src: Var,
    q_len: usize,
    kv_src: Var,
    kv_len: usize,
    batch: usize,
    heads: usize,
    key_mask: &[bool],
) -> Var {
    let d = g.value(query_src).cols();
    let dh = d / heads;
    let wq = g.param(store, &format!("{prefix}.wq"));
    let wk = g.param(store, &format!("{prefix}.wk"));
    let wv = g.param(store, &format!("{prefix}.wv"));
    let wo = g.param(store, &format!("{prefix}.wo"));
    let q = g.matmul(query_src, wq);
    let k = g.matmul(kv_src, wk);
    let v = g.matmul(kv_src, wv);
    let q = g.split_heads(q, batch, q_len, heads);
    let k = g.split_heads(k, batch, kv_len, heads);
    let v = g.split_heads(v, batch, kv_len, heads);
    let scores = g.batch_matmul(q, k, true);
    let scores = g.scale(scores, F::one() / F::from_usize(dh).unwrap().sqrt());
    let attn = g.softmax(scores, Some(key_mask));
    let heads_out = g.batch_matmul(attn, v, false);
    let merged = g.merge_heads(heads_out, batch, q_len, heads);
    g.matmul(merged, wo)
}

/// Runs the encoder of `tower` over a padded batch.
pub fn encode_batch<F: Real>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    cfg: &EncoderConfig,
    tower: Tower,
    seqs: &SeqBatch,
) -> Result<EncodedBatch> {
    if seqs.len > cfg.max_len() {
        return Err(EndxError::SequenceTooLong { len: seqs.len, max: cfg.max_len() });
    }
    let p = encoder_prefix(cfg, tower);
    let (batch, len, d) = (seqs.batch, seqs.len, cfg.model_dim);
    let table = g.param(store, &format!("{p}.embed"));
    let vocab = g.value(table).shape()[0];
    if let Some(&bad) = seqs.ids.iter().find(|&&id| id >= vocab) {
        return Err(EndxError::Invalid(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let emb = g.gather(table, &seqs.ids);
    // token vectors scaled by √d so they are not drowned by the positions
    let emb = g.scale(emb, F::from_usize(d).unwrap().sqrt());
    let pos = sinusoidal_positions::<F>(len, d);
    let mut pos_rep = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        pos_rep.extend_from_slice(pos.data());
    }
    let pos = g.constant(Tensor::from_parts(vec![batch * len, d], pos_rep));
    let mut h = g.add(emb, pos);
    h = g.row_mask(h, &seqs.mask);

    match cfg.kind {
        EncoderKind::Transformer => {
            let key_mask = seqs.key_mask(cfg.heads, len);
            for layer in 0..cfg.layers {
                let lp = format!("{p}.enc.layer{layer}");
                let a = multi_head_attention(g, store, &format!("{lp}.attn"), h, len, h, len, batch, cfg.heads, &key_mask);
                let x = g.add(h, a);
                let x = layers::layer_norm(g, store, &format!("{lp}.ln1"), x);
                let f = layers::feed_forward(g, store, &format!("{lp}.ffn"), x);
                let x = g.add(x, f);
                let x = layers::layer_norm(g, store, &format!("{lp}.ln2"), x);
                h = g.row_mask(x, &seqs.mask);
            }
        }
        kind => {
            for layer in 0..cfg.layers {
                let lp = format!("{p}.enc.layer{layer}");
                let fwd = recurrent_pass(g, store, kind, &format!("{lp}.fwd"), h, seqs, false);
                let bwd = recurrent_pass(g, store, kind, &format!("{lp}.bwd"), h, seqs, true);
                let sum = g.add(fwd, bwd);
                h = g.row_mask(sum, &seqs.mask);
            }
        }
    }
    Ok(EncodedBatch { h, mask: seqs.mask.clone(), batch, len })
}

/// One direction of a recurrent layer. Padding steps carry the previous
/// state through unchanged, so a reverse pass starts at the last real token.
fn recurrent_pass<F: Real>(
    g: &mut Graph<F>,
    store: &ParameterStore<F>,
    kind: EncoderKind,
    prefix: &str,
    x: Var,
    seqs: &SeqBatch,
    reverse: bool,
) -> Var {
    let (batch, len) = (seqs.batch, seqs.len);
    let d = g.value(x).cols();
    let wx = g.param(store, &format!("{prefix}.wx"));
    let wh = g.param(store, &format!("{prefix}.wh"));
    let b = g.param(store, &format!("{prefix}.b"));
    let xw = g.matmul(x, wx);
    let xw = g.add_bias(xw, b);
    let mut h = g.constant(Tensor::zeros(&[batch, d]));
    let mut c = g.constant(Tensor::zeros(&[batch, d]));
    let mut outputs = vec![h; len];
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for t in order {
        let valid: Vec<bool> = (0..batch).map(|bi| seqs.mask[bi * len + t]).collect();
        let xt = g.select_time(xw, t, len);
        let hw = g.matmul(h, wh);
        let (h_new, c_new) = match kind {
            EncoderKind::Rnn => {
                let pre = g.add(xt, hw);
                (g.tanh(pre), None)
            }
            EncoderKind::Gru => {
                let xzr = g.slice_cols(xt, 0, 2 * d);
                let hzr = g.slice_cols(hw, 0, 2 * d);
                let zr = g.add(xzr, hzr);
                let zr = g.sigmoid(zr);
                let z = g.slice_cols(zr, 0, d);
                let r = g.slice_cols(zr, d, 2 * d);
                let xn = g.slice_cols(xt, 2 * d, 3 * d);
                let hn = g.slice_cols(hw, 2 * d, 3 * d);
                let rhn = g.mul(r, hn);
                let n = g.add(xn, rhn);
                let n = g.tanh(n);
                // h' = n + z ⊙ (h - n)
                let diff = g.sub(h, n);
                let zd = g.mul(z, diff);
                (g.add(n, zd), None)
            }
            EncoderKind::Lstm => {
                let pre = g.add(xt, hw);
                let ifo = g.slice_cols(pre, 0, 3 * d);
                let ifo = g.sigmoid(ifo);
                let i = g.slice_cols(ifo, 0, d);
                let f = g.slice_cols(ifo, d, 2 * d);
                let o = g.slice_cols(ifo, 2 * d, 3 * d);
                let cand = g.slice_cols(pre, 3 * d, 4 * d);
                let cand = g.tanh(cand);
                let fc = g.mul(f, c);
                let ic = g.mul(i, cand);
                let c_next = g.add(fc, ic);
                let tc = g.tanh(c_next);
                (g.mul(o, tc), Some(c_next))
            }
            EncoderKind::Transformer => unreachable!("transformer has no recurrence"),
        };
        h = g.row_blend(h_new, h, &valid);
        if let Some(cn) = c_new {
            c = g.row_blend(cn, c, &valid);
        }
        outputs[t] = h;
    }
    g.stack_time(&outputs)
}

/// Encodes one sentence with a frozen parameter store.
pub fn encode_sequence<F: Real>(
    ids: &[usize],
    cfg: &EncoderConfig,
    store: &ParameterStore<F>,
    tower: Tower,
) -> Result<ContextualizedSeq<F>> {
    if ids.is_empty() {
        return Err(EndxError::EmptyInput);
    }
    if ids.len() > cfg.max_len() {
        return Err(EndxError::SequenceTooLong { len: ids.len(), max: cfg.max_len() });
    }
    let mut g = Graph::new();
    let batch = SeqBatch::new(&[ids.to_vec()])?;
    let enc = encode_batch(&mut g, store, cfg, tower, &batch)?;
    g.check()?;
    Ok(ContextualizedSeq { repr: g.value(enc.h).clone(), mask: enc.mask })
}
