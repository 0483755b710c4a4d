//! Offline indexing, ranking metrics, the lexical baseline and analysis
//! helpers.

mod bm25;
mod index;
mod metrics;
mod stats;

pub use bm25::{evaluate_bm25, Bm25};
pub use index::{
    embed_corpus, embed_texts, evaluate, fingerprint, load_or_build, rank_answers, AnswerIndex, EMBED_CHUNK, INDEX_MATRIX,
    INDEX_META,
};
pub use metrics::{first_correct_rank, mrr, rank_by_score, recall_at_n, MetricsReport, RECALL_CUTOFFS};
pub use stats::{significance_test, similarity_matrix, write_similarity_csv};
