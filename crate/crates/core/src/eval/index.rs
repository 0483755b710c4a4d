//! Offline answer index built with the dual tower, and ranking against it.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{rank_by_score, MetricsReport};
use crate::data::{one_to_many_subset, Answer, RetrievalDataset};
use crate::encoders::{tokenize, Vocabulary};
use crate::error::{EndxError, Result};
use crate::model::{Model, Side};
use crate::tensor::Tensor;

/// Sentences per forward pass when embedding many texts.
pub const EMBED_CHUNK: usize = 64;

pub const INDEX_META: &str = "index.json";
pub const INDEX_MATRIX: &str = "embeddings.bin";

/// Dual-embeddings of `texts`, one row each, computed in chunks.
pub fn embed_texts(model: &Model<f32>, vocab: &Vocabulary, side: Side, texts: &[&str]) -> Result<Tensor<f32>> {
    let d = model.embedding_dim();
    let mut data = Vec::with_capacity(texts.len() * d);
    for chunk in texts.chunks(EMBED_CHUNK) {
        let ids = chunk.iter().map(|t| tokenize(t, vocab, model.max_len(side))).collect::<Result<Vec<_>>>()?;
        data.extend_from_slice(model.embed(side, &ids)?.data());
    }
    Tensor::new(&[texts.len(), d], data)
}

/// Hash of a checkpoint's bytes together with the indexed answers.
pub fn fingerprint(checkpoint: &[u8], answers: &[Answer]) -> String {
    let mut h = Sha256::new();
    h.update(checkpoint);
    for a in answers {
        h.update(a.id.to_le_bytes());
        h.update((a.text.len() as u64).to_le_bytes());
        h.update(a.text.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct Meta {
    fingerprint: String,
    dim: usize,
    ids: Vec<u32>,
    texts: Vec<String>,
}

/// Answer embeddings in id order. Every score request is one
/// matrix-vector product and is counted.
#[derive(Debug)]
pub struct AnswerIndex {
    pub ids: Vec<u32>,
    pub texts: Vec<String>,
    pub embeddings: Tensor<f32>,
    pub fingerprint: String,
    matvecs: AtomicU64,
}

impl AnswerIndex {
    pub fn new(ids: Vec<u32>, texts: Vec<String>, embeddings: Tensor<f32>, fingerprint: String) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() != ids.len() || texts.len() != ids.len() {
            return Err(EndxError::Shape(format!("{} ids for embeddings {:?}", ids.len(), embeddings.shape())));
        }
        Ok(Self { ids, texts, embeddings, fingerprint, matvecs: AtomicU64::new(0) })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn matvecs(&self) -> u64 {
        self.matvecs.load(Ordering::Relaxed)
    }

    /// Inner product of every answer with `question`.
    pub fn scores(&self, question: &[f32]) -> Result<Vec<f32>> {
        if question.len() != self.dim() {
            return Err(EndxError::Shape(format!("question embedding of {} for index dim {}", question.len(), self.dim())));
        }
        self.matvecs.fetch_add(1, Ordering::Relaxed);
        let mut out = vec![0.0f32; self.len()];
        if !out.is_empty() {
            <f32 as crate::tensor::Real>::gemm(self.len(), self.dim(), 1, self.embeddings.data(), false, question, false, 0.0, &mut out);
        }
        Ok(out)
    }

    /// `(answer id, score)` best first, ties by ascending id.
    pub fn rank(&self, question: &[f32]) -> Result<Vec<(u32, f32)>> {
        let s = self.scores(question)?;
        let wide: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        Ok(rank_by_score(&wide, &self.ids).into_iter().map(|i| (self.ids[i], s[i])).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| EndxError::io(dir, e))?;
        let meta = Meta { fingerprint: self.fingerprint.clone(), dim: self.dim(), ids: self.ids.clone(), texts: self.texts.clone() };
        let meta_path = dir.join(INDEX_META);
        std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta).expect("meta serializes")).map_err(|e| EndxError::io(&meta_path, e))?;
        let bin = dir.join(INDEX_MATRIX);
        let mut f = std::fs::File::create(&bin).map_err(|e| EndxError::io(&bin, e))?;
        let bytes: Vec<u8> = self.embeddings.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        f.write_all(&bytes).map_err(|e| EndxError::io(&bin, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(INDEX_META);
        let raw = std::fs::read(&meta_path).map_err(|e| EndxError::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_slice(&raw)
            .map_err(|e| EndxError::Parse { path: meta_path.display().to_string(), message: e.to_string() })?;
        let bin = dir.join(INDEX_MATRIX);
        let mut bytes = Vec::new();
        std::fs::File::open(&bin).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| EndxError::io(&bin, e))?;
        if bytes.len() != meta.ids.len() * meta.dim * 4 {
            return Err(EndxError::Parse { path: bin.display().to_string(), message: "size does not match the metadata".into() });
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let matrix = Tensor::new(&[meta.ids.len(), meta.dim], data)?;
        Self::new(meta.ids, meta.texts, matrix, meta.fingerprint)
    }
}

/// Embeds every answer independently with the dual tower.
pub fn embed_corpus(answers: &[Answer], model: &Model<f32>, vocab: &Vocabulary, fingerprint: String) -> Result<AnswerIndex> {
    let texts: Vec<&str> = answers.iter().map(|a| a.text.as_str()).collect();
    let emb = embed_texts(model, vocab, Side::Answer, &texts)?;
    AnswerIndex::new(answers.iter().map(|a| a.id).collect(), texts.iter().map(|t| t.to_string()).collect(), emb, fingerprint)
}

/// Reuses the index cached in `dir` when its fingerprint matches, otherwise
/// builds and stores a fresh one. The flag reports a cache hit.
pub fn load_or_build(dir: &Path, fingerprint: &str, build: impl FnOnce() -> Result<AnswerIndex>) -> Result<(AnswerIndex, bool)> {
    if dir.join(INDEX_META).exists() {
        match AnswerIndex::load(dir) {
            Ok(ix) if ix.fingerprint == fingerprint => return Ok((ix, true)),
            Ok(_) => log::warn!("index in {} is stale, rebuilding", dir.display()),
            Err(e) => log::warn!("index in {} unreadable ({e}), rebuilding", dir.display()),
        }
    }
    let ix = build()?;
    ix.save(dir)?;
    Ok((ix, false))
}

/// Ranks the pool for one question text: one question encoding and one
/// matrix-vector product.
pub fn rank_answers(question: &str, index: &AnswerIndex, model: &Model<f32>, vocab: &Vocabulary) -> Result<Vec<(u32, f32)>> {
    if index.is_empty() {
        return Err(EndxError::EmptyInput);
    }
    let q = embed_texts(model, vocab, Side::Question, &[question])?;
    index.rank(q.data())
}

/// Metrics of `ds` against `index`. With `min_questions` only answers with
/// that many questions (and their questions) take part.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &Vocabulary,
    ds: &RetrievalDataset,
    index: &AnswerIndex,
    min_questions: Option<usize>,
) -> Result<MetricsReport> {
    let subset;
    let ds = match min_questions {
        Some(k) => {
            subset = one_to_many_subset(ds, k)?;
            if subset.is_empty() {
                return Err(EndxError::EmptySubset);
            }
            &subset
        }
        None => ds,
    };
    if ds.is_empty() {
        return Err(EndxError::EmptyInput);
    }
    if index.dim() != model.embedding_dim() {
        return Err(EndxError::Shape(format!("index dim {} but model dim {}", index.dim(), model.embedding_dim())));
    }
    let position: HashMap<u32, usize> = index.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    // candidate pool: the dataset's answers, located in the index
    let pool: Vec<usize> = ds
        .answers
        .iter()
        .map(|a| position.get(&a.id).copied().ok_or_else(|| EndxError::Invalid(format!("answer {} missing from index", a.id))))
        .collect::<Result<_>>()?;
    let pool_ids: Vec<u32> = ds.answers.iter().map(|a| a.id).collect();
    let gold = ds.gold_sets();
    let asked: Vec<usize> = (0..ds.questions.len()).filter(|&q| !gold[q].is_empty()).collect();
    let texts: Vec<&str> = asked.iter().map(|&q| ds.questions[q].text.as_str()).collect();
    let q_emb = embed_texts(model, vocab, Side::Question, &texts)?;
    let rankings: Vec<Vec<usize>> = (0..asked.len())
        .into_par_iter()
        .map(|i| {
            let full = index.scores(q_emb.row(i))?;
            let s: Vec<f64> = pool.iter().map(|&p| full[p] as f64).collect();
            Ok(rank_by_score(&s, &pool_ids))
        })
        .collect::<Result<_>>()?;
    let gold: Vec<Vec<usize>> = asked.iter().map(|&q| gold[q].clone()).collect();
    MetricsReport::from_rankings(&rankings, &gold, min_questions)
}
