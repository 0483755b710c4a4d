//! Sentence-level retrieval datasets.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EndxError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub id: u32,
    pub text: String,
}

/// One stored pair. Every stored pair is a match; negatives are the other
/// answers of a batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question_id: String,
    pub question: String,
    pub answer_id: u32,
    pub answer: String,
}

/// Unique questions, the candidate answer pool, and the many-to-many links
/// between them. `pairs` holds `(question index, answer index)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RetrievalDataset {
    pub questions: Vec<Question>,
    pub answers: Vec<Answer>,
    pub pairs: Vec<(usize, usize)>,
}

/// Table-style counts. Means are rounded to 2 decimals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub questions: usize,
    pub answers: usize,
    pub pairs: usize,
    pub answers_per_question: f64,
    pub questions_per_answer: f64,
    /// Size of the candidate pool; exceeds `answers` when unmatched
    /// sentences are kept as distractors.
    pub candidates: usize,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl RetrievalDataset {
    /// Assembles a dataset, checking indices and dropping repeated pairs.
    pub fn new(questions: Vec<Question>, answers: Vec<Answer>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut kept = Vec::with_capacity(pairs.len());
        for (q, a) in pairs {
            if q >= questions.len() || a >= answers.len() {
                return Err(EndxError::Invalid(format!("pair ({q}, {a}) out of range")));
            }
            if seen.insert((q, a)) {
                kept.push((q, a));
            }
        }
        let ids: BTreeSet<u32> = answers.iter().map(|a| a.id).collect();
        if ids.len() != answers.len() {
            return Err(EndxError::Invalid("duplicate answer id".into()));
        }
        Ok(Self { questions, answers, pairs: kept })
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Answer indices matched by each question.
    pub fn gold_sets(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.questions.len()];
        for &(q, a) in &self.pairs {
            out[q].push(a);
        }
        out
    }

    /// Question indices matched to each answer.
    pub fn questions_per_answer(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.answers.len()];
        for &(q, a) in &self.pairs {
            out[a].push(q);
        }
        out
    }

    pub fn stats(&self) -> DatasetStats {
        let q: BTreeSet<usize> = self.pairs.iter().map(|p| p.0).collect();
        let a: BTreeSet<usize> = self.pairs.iter().map(|p| p.1).collect();
        let n = self.pairs.len() as f64;
        let ratio = |k: usize| if k == 0 { 0.0 } else { round2(n / k as f64) };
        DatasetStats {
            questions: q.len(),
            answers: a.len(),
            pairs: self.pairs.len(),
            answers_per_question: ratio(q.len()),
            questions_per_answer: ratio(a.len()),
            candidates: self.answers.len(),
        }
    }

    pub fn qa_pairs(&self) -> Vec<QaPair> {
        self.pairs
            .iter()
            .map(|&(q, a)| QaPair {
                question_id: self.questions[q].id.clone(),
                question: self.questions[q].text.clone(),
                answer_id: self.answers[a].id,
                answer: self.answers[a].text.clone(),
            })
            .collect()
    }

    /// Keeps the chosen questions and every answer they link to. With
    /// `keep_all_answers` the whole candidate pool survives.
    pub fn restrict_questions(&self, keep: &[usize], keep_all_answers: bool) -> Self {
        let wanted: BTreeSet<usize> = keep.iter().copied().collect();
        let q_map: BTreeMap<usize, usize> = wanted.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let used: BTreeSet<usize> = if keep_all_answers {
            (0..self.answers.len()).collect()
        } else {
            self.pairs.iter().filter(|p| wanted.contains(&p.0)).map(|p| p.1).collect()
        };
        let a_map: BTreeMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        Self {
            questions: wanted.iter().map(|&q| self.questions[q].clone()).collect(),
            answers: used.iter().map(|&a| self.answers[a].clone()).collect(),
            pairs: self
                .pairs
                .iter()
                .filter(|p| wanted.contains(&p.0))
                .map(|&(q, a)| (q_map[&q], a_map[&a]))
                .collect(),
        }
    }
}

/// Seeded question-level split with `train_parts : (total_parts -
/// train_parts)` proportions. The training side gets `floor(n * train /
/// total)` questions.
pub fn make_splits(
    ds: &RetrievalDataset,
    train_parts: usize,
    total_parts: usize,
    seed: u64,
) -> Result<(RetrievalDataset, RetrievalDataset)> {
    if ds.questions.is_empty() {
        return Err(EndxError::EmptyInput);
    }
    if train_parts == 0 || train_parts >= total_parts {
        return Err(EndxError::Config(format!("split ratio {train_parts}:{}", total_parts - train_parts.min(total_parts))));
    }
    let mut order: Vec<usize> = (0..ds.questions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ds.questions.len() * train_parts / total_parts;
    let (train, val) = order.split_at(n_train);
    Ok((ds.restrict_questions(train, false), ds.restrict_questions(val, false)))
}

/// Answers with at least `min_questions` matched questions, their questions
/// and nothing else. The candidate pool shrinks to the kept answers.
pub fn one_to_many_subset(ds: &RetrievalDataset, min_questions: usize) -> Result<RetrievalDataset> {
    if min_questions == 0 {
        return Err(EndxError::Config("min_questions must be at least 1".into()));
    }
    if min_questions == 1 {
        let linked: BTreeSet<usize> = ds.pairs.iter().map(|p| p.1).collect();
        if linked.len() == ds.answers.len() {
            return Ok(ds.clone());
        }
    }
    let per_answer = ds.questions_per_answer();
    let kept_a: BTreeSet<usize> = (0..ds.answers.len()).filter(|&a| per_answer[a].len() >= min_questions).collect();
    let kept_q: BTreeSet<usize> = ds.pairs.iter().filter(|p| kept_a.contains(&p.1)).map(|p| p.0).collect();
    let q_map: HashMap<usize, usize> = kept_q.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    let a_map: HashMap<usize, usize> = kept_a.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    Ok(RetrievalDataset {
        questions: kept_q.iter().map(|&q| ds.questions[q].clone()).collect(),
        answers: kept_a.iter().map(|&a| ds.answers[a].clone()).collect(),
        pairs: ds
            .pairs
            .iter()
            .filter(|p| kept_a.contains(&p.1))
            .map(|&(q, a)| (q_map[&q], a_map[&a]))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(per_answer: &[usize]) -> RetrievalDataset {
        let mut questions = Vec::new();
        let mut answers = Vec::new();
        let mut pairs = Vec::new();
        for (a, &k) in per_answer.iter().enumerate() {
            answers.push(Answer { id: a as u32, text: format!("answer {a}") });
            for j in 0..k {
                pairs.push((questions.len(), a));
                questions.push(Question { id: format!("q{a}_{j}"), text: format!("question {a} {j}") });
            }
        }
        RetrievalDataset::new(questions, answers, pairs).unwrap()
    }

    #[test]
    fn stats_and_empty() {
        let s = toy(&[2, 1]).stats();
        assert_eq!((s.questions, s.answers, s.pairs), (3, 2, 3));
        assert_eq!(s.questions_per_answer, 1.5);
        assert_eq!(s.answers_per_question, 1.0);
        let e = RetrievalDataset::default().stats();
        assert_eq!(e, DatasetStats::default());
    }

    #[test]
    fn split_sizes_follow_floor() {
        let ds = toy(&[1; 100]);
        let (t, v) = make_splits(&ds, 9, 10, 1).unwrap();
        assert_eq!((t.questions.len(), v.questions.len()), (90, 10));
        let ds = toy(&[1; 37]);
        let (t, v) = make_splits(&ds, 9, 10, 1).unwrap();
        assert_eq!((t.questions.len(), v.questions.len()), (33, 4));
        assert_eq!(make_splits(&ds, 9, 10, 1).unwrap(), make_splits(&ds, 9, 10, 1).unwrap());
        assert_ne!(make_splits(&ds, 9, 10, 1).unwrap().0, make_splits(&ds, 9, 10, 2).unwrap().0);
    }

    #[test]
    fn subset_filters_answers() {
        let ds = toy(&[1, 3, 8]);
        let s = one_to_many_subset(&ds, 8).unwrap();
        assert_eq!(s.answers.len(), 1);
        assert_eq!(s.answers[0].id, 2);
        assert_eq!(s.questions.len(), 8);
        assert_eq!(one_to_many_subset(&ds, 1).unwrap(), ds);
        let sizes: Vec<usize> = (1..10).map(|k| one_to_many_subset(&ds, k).unwrap().pairs.len()).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        assert!(one_to_many_subset(&ds, 9).unwrap().is_empty());
    }

    #[test]
    fn repeated_pairs_are_dropped() {
        let q = vec![Question { id: "a".into(), text: "x".into() }];
        let a = vec![Answer { id: 4, text: "y".into() }];
        let ds = RetrievalDataset::new(q, a, vec![(0, 0), (0, 0)]).unwrap();
        assert_eq!(ds.pairs.len(), 1);
    }
}
