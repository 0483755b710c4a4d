//! Property tests over randomly generated inputs.

use std::collections::HashSet;

use endx::autodiff::Graph;
use endx::checkpoint::Checkpoint;
use endx::data::{batch_iter, one_to_many_subset, split_sentences, Answer, Question, RetrievalDataset};
use endx::encoders::{tokenize, Vocabulary};
use endx::eval::{rank_by_score, significance_test, Bm25, MetricsReport};
use endx::losses::{conditional_distribution, kl_alignment, Direction, Kernel};
use endx::tensor::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

/// Questions and answers with arbitrary many-to-many links; every question
/// has at least one answer.
fn dataset() -> impl Strategy<Value = RetrievalDataset> {
    (2usize..12, 2usize..10).prop_flat_map(|(nq, na)| {
        prop::collection::vec(prop::collection::btree_set(0..na, 1..=na.min(3)), nq).prop_map(move |links| {
            let questions = (0..nq).map(|i| Question { id: format!("q{i}"), text: format!("question {i}") }).collect();
            let answers = (0..na).map(|i| Answer { id: i as u32, text: format!("answer {i}") }).collect();
            let pairs = links.iter().enumerate().flat_map(|(q, s)| s.iter().map(move |&a| (q, a))).collect();
            RetrievalDataset::new(questions, answers, pairs).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 6), mask_bits in prop::collection::vec(any::<bool>(), 24)) {
        let mut mask = mask_bits.clone();
        for r in 0..4 {
            mask[r * 6 + r] = true;
        }
        let mut g = Graph::new();
        let v = g.input(x, false);
        let p = g.softmax(v, Some(&mask));
        let out = g.value(p);
        for r in 0..4 {
            let row = out.row(r);
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for (c, &v) in row.iter().enumerate() {
                prop_assert!(v >= 0.0);
                if !mask[r * 6 + c] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn alignment_divergence_is_non_negative(a in matrix(5, 3), b in matrix(5, 3), c in matrix(5, 3), d in matrix(5, 3)) {
        for dir in Direction::ALL {
            let (t_rows, t_cols) = if dir.same_type() { (&a, &a) } else { (&a, &b) };
            let (s_rows, s_cols) = if dir.same_type() { (&c, &c) } else { (&c, &d) };
            let teacher = conditional_distribution(t_rows, t_cols, Kernel::Inner, 1.0, dir, true).unwrap();
            let student = conditional_distribution(s_rows, s_cols, Kernel::Inner, 1.0, dir, true).unwrap();
            prop_assert!(kl_alignment(&teacher, &student).unwrap() >= -1e-12);
            prop_assert!(kl_alignment(&teacher, &teacher).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn ranking_is_a_sorted_permutation(scores in prop::collection::vec(-3i32..3, 1..30)) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let ids: Vec<u32> = (0..s.len() as u32).rev().collect();
        let r = rank_by_score(&s, &ids);
        let seen: HashSet<usize> = r.iter().copied().collect();
        prop_assert_eq!(seen.len(), s.len());
        for w in r.windows(2) {
            prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && ids[w[0]] < ids[w[1]]));
        }
    }

    #[test]
    fn recall_grows_with_cutoff(ds in dataset(), seed in any::<u64>()) {
        let scores: Vec<Vec<f64>> = (0..ds.questions.len())
            .map(|q| (0..ds.answers.len()).map(|a| ((seed ^ (q * 31 + a) as u64).wrapping_mul(0x9e3779b97f4a7c15) >> 11) as f64).collect())
            .collect();
        let ids: Vec<u32> = ds.answers.iter().map(|a| a.id).collect();
        let rep = MetricsReport::from_scores(&scores, &ids, &ds.gold_sets(), None).unwrap();
        prop_assert!(rep.recall_at(1) <= rep.recall_at(5) && rep.recall_at(5) <= rep.recall_at(10));
        prop_assert!(rep.mrr > 0.0 && rep.mrr <= 1.0);
        prop_assert!(rep.recall_at(10) <= 1.0);
    }

    #[test]
    fn batching_is_deterministic_and_disjoint(ds in dataset(), seed in any::<u64>(), epoch in 0u64..4) {
        let b = 2.min(ds.pairs.len());
        let first = batch_iter(&ds, b, seed, epoch).unwrap();
        prop_assert_eq!(&first, &batch_iter(&ds, b, seed, epoch).unwrap());
        let mut used = HashSet::new();
        for batch in &first {
            prop_assert_eq!(batch.questions.len(), b);
            for (&q, &a) in batch.questions.iter().zip(&batch.answers) {
                prop_assert!(ds.pairs.contains(&(q, a)));
                prop_assert!(used.insert((q, a)), "pair used twice in one epoch");
            }
        }
        prop_assert_eq!(first.len(), ds.pairs.len() / b);
    }

    #[test]
    fn subset_shrinks_as_threshold_rises(ds in dataset()) {
        let mut prev = usize::MAX;
        for k in 1..6 {
            let n = one_to_many_subset(&ds, k).unwrap().answers.len();
            prop_assert!(n <= prev);
            prev = n;
        }
        prop_assert_eq!(one_to_many_subset(&ds, 1).unwrap().pairs.len(), ds.pairs.len());
    }

    #[test]
    fn sentences_are_slices_of_their_context(words in prop::collection::vec("[A-Za-z]{1,6}[.!?]?", 1..25)) {
        let text = words.join(" ");
        let sents = split_sentences(&text);
        let mut last_end = 0;
        for (s, r) in &sents {
            prop_assert_eq!(&text[r.clone()], s.as_str());
            prop_assert!(r.start >= last_end);
            prop_assert!(!s.trim().is_empty());
            last_end = r.end;
        }
        let joined: String = sents.iter().map(|(s, _)| s.split_whitespace().collect::<Vec<_>>().join(" ")).collect::<Vec<_>>().join(" ");
        prop_assert_eq!(joined, text.split_whitespace().collect::<Vec<_>>().join(" "));
    }

    #[test]
    fn tokens_stay_inside_vocabulary(text in "[a-z ]{1,40}[a-z]", max_len in 1usize..10) {
        let vocab = Vocabulary::build(["the cat sat on a mat"], 100);
        let ids = tokenize(&text, &vocab, max_len).unwrap();
        prop_assert!(!ids.is_empty() && ids.len() <= max_len);
        prop_assert!(ids.iter().all(|&i| i < vocab.len()));
    }

    #[test]
    fn bm25_scores_are_non_negative(query in "[a-d ]{0,12}") {
        let bm = Bm25::from_texts(["a b c", "b b d", "c a", "d d d a"]).unwrap();
        let q: Vec<String> = query.split_whitespace().map(str::to_string).collect();
        prop_assert!(bm.scores(&q).iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn welch_test_is_antisymmetric(a in prop::collection::vec(0.0f64..1.0, 2..8), b in prop::collection::vec(0.0f64..1.0, 2..8)) {
        let (t1, p1) = significance_test(&a, &b).unwrap();
        let (t2, p2) = significance_test(&b, &a).unwrap();
        prop_assert!((t1 + t2).abs() < 1e-9);
        prop_assert!((p1 - p2).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&p1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>()) {
        use endx::losses::{GamConfig, LossWeights};
        use endx::model::{Model, ModelConfig};
        let mut cfg = ModelConfig::default();
        cfg.vocab_size = 10;
        cfg.encoder.model_dim = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.layers = 1;
        cfg.cross_attention.heads = 2;
        let model = Model::<f32>::new(cfg, seed).unwrap();
        let vocab = Vocabulary::build(["x"], 10);
        let bytes = Checkpoint::new(&model, &GamConfig::default(), &LossWeights::default(), &vocab).to_bytes();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
}
