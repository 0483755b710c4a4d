//! The two towers: Dual-Encoders (encoder + aggregator per side) and
//! Cross-Encoders (encoder + cross-attention + aggregator per side).

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate_batch, register_aggregator, AggregatorConfig};
use crate::autodiff::{Graph, Var};
use crate::cross_attention::{cross_refine_batch, register_cross_attention, CrossAttentionConfig};
use crate::encoders::{encode_batch, register_encoder, EncoderConfig, SeqBatch, Tower};
use crate::error::{EndxError, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Question,
    Answer,
}

impl Side {
    fn tag(self) -> &'static str {
        match self {
            Side::Question => "q",
            Side::Answer => "a",
        }
    }
}

/// Parameter prefix of the aggregator used by `tower` on `side`.
pub fn aggregator_prefix(tower: Tower, side: Side) -> String {
    format!("{}.agg.{}", tower.prefix(), side.tag())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub cross_attention: CrossAttentionConfig,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(EndxError::Config("vocab_size must include the reserved ids".into()));
        }
        self.encoder.validate()?;
        self.aggregator.validate()?;
        self.cross_attention.validate(self.encoder.model_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        self.aggregator.embedding_dim(self.encoder.model_dim)
    }

    /// Freshly initialized parameters for both towers.
    pub fn init_params<F: Real>(&self, seed: u64) -> Result<ParameterStore<F>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = self.encoder.model_dim;
        register_encoder(&mut store, &self.encoder, self.vocab_size, Tower::Dual, &mut rng)?;
        for side in [Side::Question, Side::Answer] {
            register_aggregator(&mut store, &aggregator_prefix(Tower::Dual, side), &self.aggregator, d, &mut rng)?;
        }
        register_encoder(&mut store, &self.encoder, self.vocab_size, Tower::Cross, &mut rng)?;
        register_cross_attention(&mut store, d, &mut rng)?;
        for side in [Side::Question, Side::Answer] {
            register_aggregator(&mut store, &aggregator_prefix(Tower::Cross, side), &self.aggregator, d, &mut rng)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Default)]
struct Counters {
    cross_attention: AtomicU64,
    dual_encodings: AtomicU64,
}

/// Both towers with their parameters and instrumentation counters.
#[derive(Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParameterStore<F>,
    counters: Counters,
}

impl<F: Real> Clone for Model<F> {
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), params: self.params.clone(), counters: Counters::default() }
    }
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params, counters: Counters::default() })
    }

    /// Wraps existing parameters, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParameterStore<F>) -> Result<Self> {
        let expected = config.init_params::<F>(0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                None => return Err(EndxError::Checkpoint(format!("missing parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(EndxError::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
            return Err(EndxError::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config, params, counters: Counters::default() })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Number of cross-attention evaluations (one per pair and direction).
    pub fn cross_attention_calls(&self) -> u64 {
        self.counters.cross_attention.load(Ordering::Relaxed)
    }

    /// Number of sentences encoded by the dual tower.
    pub fn dual_encodings(&self) -> u64 {
        self.counters.dual_encodings.load(Ordering::Relaxed)
    }

    pub fn max_len(&self, side: Side) -> usize {
        match side {
            Side::Question => self.config.encoder.max_question_len,
            Side::Answer => self.config.encoder.max_answer_len,
        }
    }

    /// Dual-embeddings `[batch, d_e]` on the tape. Only `seqs` reaches the
    /// output; no counterpart sentence is involved.
    pub fn dual_embed_batch(&self, g: &mut Graph<F>, side: Side, seqs: &SeqBatch) -> Result<Var> {
        self.counters.dual_encodings.fetch_add(seqs.batch as u64, Ordering::Relaxed);
        let enc = encode_batch(g, &self.params, &self.config.encoder, Tower::Dual, seqs)?;
        aggregate_batch(g, &self.params, &aggregator_prefix(Tower::Dual, side), &self.config.aggregator, &enc)
    }

    /// Cross-embeddings `(R_q, R_a)`, each `[batch, d_e]`, for aligned pairs.
    pub fn cross_embed_batch(&self, g: &mut Graph<F>, questions: &SeqBatch, answers: &SeqBatch) -> Result<(Var, Var)> {
        if questions.batch != answers.batch {
            return Err(EndxError::Shape(format!("{} questions for {} answers", questions.batch, answers.batch)));
        }
        self.counters.cross_attention.fetch_add(2 * questions.batch as u64, Ordering::Relaxed);
        let enc = &self.config.encoder;
        let hq = encode_batch(g, &self.params, enc, Tower::Cross, questions)?;
        let ha = encode_batch(g, &self.params, enc, Tower::Cross, answers)?;
        let cfg = &self.config.cross_attention;
        let q_refined = cross_refine_batch(g, &self.params, cfg, &hq, &ha)?;
        let a_refined = cross_refine_batch(g, &self.params, cfg, &ha, &hq)?;
        let agg = &self.config.aggregator;
        let rq = aggregate_batch(g, &self.params, &aggregator_prefix(Tower::Cross, Side::Question), agg, &q_refined)?;
        let ra = aggregate_batch(g, &self.params, &aggregator_prefix(Tower::Cross, Side::Answer), agg, &a_refined)?;
        Ok((rq, ra))
    }

    /// Frozen dual-embeddings for a list of token sequences, `[n, d_e]`.
    pub fn embed(&self, side: Side, seqs: &[Vec<usize>]) -> Result<Tensor<F>> {
        if seqs.is_empty() {
            return Ok(Tensor::zeros(&[0, self.embedding_dim()]));
        }
        let batch = SeqBatch::new(seqs)?;
        let mut g = Graph::new();
        let out = self.dual_embed_batch(&mut g, side, &batch)?;
        g.check()?;
        Ok(g.value(out).clone())
    }

    /// Frozen cross-embeddings for one question/answer pair.
    pub fn cross_embed(&self, question: &[usize], answer: &[usize]) -> Result<(Tensor<F>, Tensor<F>)> {
        let q = SeqBatch::new(&[question.to_vec()])?;
        let a = SeqBatch::new(&[answer.to_vec()])?;
        let mut g = Graph::new();
        let (rq, ra) = self.cross_embed_batch(&mut g, &q, &a)?;
        g.check()?;
        let d = self.embedding_dim();
        Ok((g.value(rq).clone().reshape(&[d])?, g.value(ra).clone().reshape(&[d])?))
    }
}
