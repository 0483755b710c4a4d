//! Ranking and the MRR / R@N metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EndxError, Result};

pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

/// Candidate positions ordered by descending score; equal scores keep
/// ascending answer id, so the later id loses a tie.
pub fn rank_by_score(scores: &[f64], answer_ids: &[u32]) -> Vec<usize> {
    debug_assert_eq!(scores.len(), answer_ids.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| match scores[j].partial_cmp(&scores[i]).unwrap_or(Ordering::Equal) {
        Ordering::Equal => answer_ids[i].cmp(&answer_ids[j]),
        o => o,
    });
    order
}

/// 1-based rank of the best-placed correct candidate.
pub fn first_correct_rank(ranking: &[usize], gold: &[usize]) -> Option<usize> {
    ranking.iter().position(|c| gold.contains(c)).map(|p| p + 1)
}

/// Mean reciprocal rank. A question without any correct candidate in the
/// pool (`None`) is an error.
pub fn mrr(first_ranks: &[Option<usize>]) -> Result<f64> {
    if first_ranks.is_empty() {
        return Err(EndxError::EmptyInput);
    }
    let mut total = 0.0;
    for (i, r) in first_ranks.iter().enumerate() {
        match r {
            Some(r) if *r >= 1 => total += 1.0 / *r as f64,
            _ => return Err(EndxError::Invalid(format!("question {i} has no correct answer in the pool"))),
        }
    }
    Ok(total / first_ranks.len() as f64)
}

/// Mean over questions of `|top_n ∩ gold| / |gold|`. A question with two
/// correct answers can reach at most 0.5 at `n = 1`.
pub fn recall_at_n(rankings: &[Vec<usize>], gold: &[Vec<usize>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(EndxError::Config("N must be at least 1".into()));
    }
    if rankings.len() != gold.len() {
        return Err(EndxError::Shape(format!("{} rankings for {} gold sets", rankings.len(), gold.len())));
    }
    if rankings.is_empty() {
        return Err(EndxError::EmptyInput);
    }
    let mut total = 0.0;
    for (r, g) in rankings.iter().zip(gold) {
        if g.is_empty() {
            return Err(EndxError::Invalid("question without correct answers".into()));
        }
        let hits = r.iter().take(n).filter(|c| g.contains(c)).count();
        total += hits as f64 / g.len() as f64;
    }
    Ok(total / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub recall: BTreeMap<String, f64>,
    pub num_questions: usize,
    pub subset_min_questions: Option<usize>,
    #[serde(skip)]
    pub first_ranks: Vec<usize>,
}

impl MetricsReport {
    pub fn recall_at(&self, n: usize) -> f64 {
        self.recall.get(&n.to_string()).copied().unwrap_or(f64::NAN)
    }

    /// Report for full rankings against gold sets.
    pub fn from_rankings(rankings: &[Vec<usize>], gold: &[Vec<usize>], subset_min_questions: Option<usize>) -> Result<Self> {
        if rankings.len() != gold.len() {
            return Err(EndxError::Shape(format!("{} rankings for {} gold sets", rankings.len(), gold.len())));
        }
        let firsts: Vec<Option<usize>> = rankings.iter().zip(gold).map(|(r, g)| first_correct_rank(r, g)).collect();
        let mrr = mrr(&firsts)?;
        let mut recall = BTreeMap::new();
        for n in RECALL_CUTOFFS {
            recall.insert(n.to_string(), recall_at_n(rankings, gold, n)?);
        }
        Ok(Self {
            mrr,
            recall,
            num_questions: rankings.len(),
            subset_min_questions,
            first_ranks: firsts.into_iter().map(|r| r.unwrap_or(0)).collect(),
        })
    }

    /// Report from a `questions x candidates` score matrix.
    pub fn from_scores(scores: &[Vec<f64>], answer_ids: &[u32], gold: &[Vec<usize>], subset_min_questions: Option<usize>) -> Result<Self> {
        let rankings: Vec<Vec<usize>> = scores.iter().map(|s| rank_by_score(s, answer_ids)).collect();
        Self::from_rankings(&rankings, gold, subset_min_questions)
    }
}
