//! Okapi BM25 over tokenized sentences.

use std::collections::HashMap;

use super::metrics::MetricsReport;
use crate::data::{one_to_many_subset, RetrievalDataset};
use crate::encoders::split_tokens;
use crate::error::{EndxError, Result};

#[derive(Clone, Debug)]
pub struct Bm25 {
    k1: f64,
    b: f64,
    doc_tf: Vec<HashMap<String, usize>>,
    doc_len: Vec<usize>,
    avg_len: f64,
    df: HashMap<String, usize>,
}

impl Bm25 {
    pub const K1: f64 = 1.2;
    pub const B: f64 = 0.75;

    pub fn new(docs: &[Vec<String>]) -> Result<Self> {
        Self::with_params(docs, Self::K1, Self::B)
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let docs: Vec<Vec<String>> = texts.into_iter().map(split_tokens).collect();
        Self::new(&docs)
    }

    pub fn with_params(docs: &[Vec<String>], k1: f64, b: f64) -> Result<Self> {
        if docs.is_empty() {
            return Err(EndxError::EmptyInput);
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut doc_tf = Vec::with_capacity(docs.len());
        for d in docs {
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in d {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            doc_tf.push(tf);
        }
        let doc_len: Vec<usize> = docs.iter().map(Vec::len).collect();
        let avg_len = doc_len.iter().sum::<usize>() as f64 / docs.len() as f64;
        Ok(Self { k1, b, doc_tf, doc_len, avg_len, df })
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of every document; each query token occurrence adds its term.
    pub fn scores(&self, query: &[String]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for t in query {
            if !self.df.contains_key(t) {
                continue;
            }
            let idf = self.idf(t);
            for (d, tf) in self.doc_tf.iter().enumerate() {
                let Some(&f) = tf.get(t) else { continue };
                let f = f as f64;
                let norm = 1.0 - self.b + self.b * self.doc_len[d] as f64 / self.avg_len;
                out[d] += idf * f * (self.k1 + 1.0) / (f + self.k1 * norm);
            }
        }
        out
    }

    /// Document positions, best first; ties keep document order.
    pub fn rank(&self, query: &[String]) -> Vec<usize> {
        let s = self.scores(query);
        let ids: Vec<u32> = (0..s.len() as u32).collect();
        super::metrics::rank_by_score(&s, &ids)
    }
}

/// Lexical baseline metrics over the dataset's own answer pool.
pub fn evaluate_bm25(ds: &RetrievalDataset, min_questions: Option<usize>) -> Result<MetricsReport> {
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
    let index = Bm25::from_texts(ds.answers.iter().map(|a| a.text.as_str()))?;
    let ids: Vec<u32> = ds.answers.iter().map(|a| a.id).collect();
    let gold = ds.gold_sets();
    let asked: Vec<usize> = (0..ds.questions.len()).filter(|&q| !gold[q].is_empty()).collect();
    let scores: Vec<Vec<f64>> = asked.iter().map(|&q| index.scores(&split_tokens(&ds.questions[q].text))).collect();
    let gold: Vec<Vec<usize>> = asked.iter().map(|&q| gold[q].clone()).collect();
    MetricsReport::from_scores(&scores, &ids, &gold, min_questions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        split_tokens(s)
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let b = Bm25::from_texts(["a b", "b c"]).unwrap();
        assert_eq!(b.scores(&toks("zzz")), vec![0.0, 0.0]);
    }

    #[test]
    fn single_document_query_is_itself() {
        let b = Bm25::from_texts(["the only doc"]).unwrap();
        let s = b.scores(&toks("the only doc"));
        assert!(s[0] > 0.0);
        assert_eq!(b.rank(&toks("the only doc")), vec![0]);
    }

    #[test]
    fn lexical_overlap_wins_on_a_toy_dataset() {
        use crate::data::{Answer, Question};
        let questions = vec![
            Question { id: "q0".into(), text: "where does the cat sleep ?".into() },
            Question { id: "q1".into(), text: "what does the dog eat ?".into() },
        ];
        let answers = vec![
            Answer { id: 0, text: "the cat sleeps on the sofa .".into() },
            Answer { id: 1, text: "the dog eats bones .".into() },
        ];
        let ds = RetrievalDataset::new(questions, answers, vec![(0, 0), (1, 1)]).unwrap();
        assert_eq!(evaluate_bm25(&ds, None).unwrap().mrr, 1.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Bm25::new(&[]).is_err());
    }
}
