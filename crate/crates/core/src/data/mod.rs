//! Dataset construction: reading-comprehension JSON to sentence retrieval
//! pairs, splits, batching and storage.

mod batching;
mod dataset;
mod jsonl;
mod reqa;
mod sentences;
mod squad;
mod synthetic;

pub use batching::{batch_iter, Batch};
pub use dataset::{make_splits, one_to_many_subset, Answer, DatasetStats, QaPair, Question, RetrievalDataset};
pub use jsonl::{read_jsonl, stats_path, write_jsonl};
pub use reqa::{build_reqa, CandidatePool, ReqaBuild};
pub use sentences::{split_sentences, ABBREVIATIONS};
pub use squad::{parse_rc_json, parse_rc_str, Passage, RcQuestion};
pub use synthetic::{synthetic_one_to_many, SyntheticConfig, SyntheticData};
