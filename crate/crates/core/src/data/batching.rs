//! In-batch-negative mini-batches.

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::RetrievalDataset;
use crate::error::{EndxError, Result};

/// Aligned question and answer indices: row `i` is a matched pair and every
/// other row's answer is a negative for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub questions: Vec<usize>,
    pub answers: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

/// Batches for one epoch. Pairs are shuffled with a stream derived from
/// `(seed, epoch)`. A pair whose question or answer already sits in the
/// forming batch waits for a later batch; it is only admitted as a
/// duplicate when nothing else is left. Answers with as many pairs left as
/// there are batches left are placed first so they never pile up at the
/// end. The last partial batch is dropped.
pub fn batch_iter(ds: &RetrievalDataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(EndxError::Config("batch size must be at least 2".into()));
    }
    if batch_size > ds.pairs.len() {
        return Err(EndxError::Config(format!("batch size {batch_size} exceeds {} pairs", ds.pairs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..ds.pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut pool: VecDeque<usize> = order.into();

    let mut remaining: HashMap<usize, usize> = HashMap::new();
    for &(_, a) in &ds.pairs {
        *remaining.entry(a).or_default() += 1;
    }
    let n_batches = ds.pairs.len() / batch_size;
    let mut out = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch = Batch { questions: Vec::with_capacity(batch_size), answers: Vec::with_capacity(batch_size) };
        let mut seen_q = HashSet::new();
        let mut seen_a = HashSet::new();
        let mut deferred = Vec::new();
        // answers with at least one pair per remaining batch go first
        let left = n_batches - b;
        let mut i = 0;
        while i < pool.len() && batch.len() < batch_size {
            let (q, a) = ds.pairs[pool[i]];
            if remaining[&a] >= left && !seen_a.contains(&a) && !seen_q.contains(&q) {
                pool.remove(i);
                seen_q.insert(q);
                seen_a.insert(a);
                batch.questions.push(q);
                batch.answers.push(a);
            } else {
                i += 1;
            }
        }
        while batch.len() < batch_size {
            let p = match pool.pop_front() {
                Some(p) => {
                    let (q, a) = ds.pairs[p];
                    if seen_q.contains(&q) || seen_a.contains(&a) {
                        deferred.push(p);
                        continue;
                    }
                    p
                }
                None => deferred.remove(0),
            };
            let (q, a) = ds.pairs[p];
            seen_q.insert(q);
            seen_a.insert(a);
            batch.questions.push(q);
            batch.answers.push(a);
        }
        for a in &batch.answers {
            *remaining.get_mut(a).unwrap() -= 1;
        }
        for p in deferred.into_iter().rev() {
            pool.push_front(p);
        }
        out.push(batch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{Answer, Question};

    fn dataset(per_answer: &[usize]) -> RetrievalDataset {
        let mut qs = Vec::new();
        let mut pairs = Vec::new();
        let answers = (0..per_answer.len()).map(|a| Answer { id: a as u32, text: format!("a{a}") }).collect();
        for (a, &k) in per_answer.iter().enumerate() {
            for _ in 0..k {
                pairs.push((qs.len(), a));
                qs.push(Question { id: format!("q{}", qs.len()), text: format!("q{}", qs.len()) });
            }
        }
        RetrievalDataset::new(qs, answers, pairs).unwrap()
    }

    #[test]
    fn ten_pairs_batch_three() {
        let b = batch_iter(&dataset(&[1; 10]), 3, 0, 0).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|x| x.len() == 3));
    }

    #[test]
    fn too_large_batch_is_an_error() {
        assert!(batch_iter(&dataset(&[1; 3]), 4, 0, 0).is_err());
        assert!(batch_iter(&dataset(&[1; 3]), 1, 0, 0).is_err());
    }

    #[test]
    fn epochs_reorder() {
        let ds = dataset(&[1; 40]);
        assert_ne!(batch_iter(&ds, 4, 7, 0).unwrap(), batch_iter(&ds, 4, 7, 1).unwrap());
        assert_eq!(batch_iter(&ds, 4, 7, 1).unwrap(), batch_iter(&ds, 4, 7, 1).unwrap());
    }

    #[test]
    fn busy_answer_spread_across_batches() {
        let ds = dataset(&[5, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
        for seed in 0..20 {
            for b in batch_iter(&ds, 4, seed, 0).unwrap() {
                let distinct: HashSet<_> = b.answers.iter().collect();
                assert_eq!(distinct.len(), b.len(), "seed {seed}: {b:?}");
            }
        }
    }
}
