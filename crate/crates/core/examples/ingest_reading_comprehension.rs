//! Turns a reading-comprehension file into a sentence-retrieval dataset.
//!
//! `cargo run --example ingest_reading_comprehension -- [squad.json]`
//! Without an argument a small inline document is used.

use endx::data::{build_reqa, parse_rc_json, parse_rc_str, split_sentences, CandidatePool};

const INLINE: &str = r#"{"data": [{"title": "demo", "paragraphs": [
  {"context": "Mount Ruapehu is in New Zealand. It erupted in 1996. Skiing is popular there.",
   "qas": [{"id": "a", "question": "Where is Ruapehu?", "answers": [{"text": "New Zealand", "answer_start": 20}]},
           {"id": "b", "question": "Which country has Mount Ruapehu?", "answers": [{"text": "New Zealand", "answer_start": 20}]},
           {"id": "c", "question": "When did it erupt?", "answers": [{"text": "1996", "answer_start": 45}]}]}]}]}"#;

fn main() -> endx::Result<()> {
    let passages = match std::env::args().nth(1) {
        Some(path) => parse_rc_json(std::path::Path::new(&path))?,
        None => parse_rc_str(INLINE, "inline")?,
    };
    for pool in [CandidatePool::Answers, CandidatePool::AllSentences] {
        let built = build_reqa(&passages, split_sentences, pool)?;
        println!("{pool:?}: {:?} (skipped {})", built.dataset.stats(), built.skipped);
    }
    let built = build_reqa(&passages, split_sentences, CandidatePool::Answers)?;
    for (a, qs) in built.dataset.answers.iter().zip(built.dataset.questions_per_answer()).take(5) {
        println!("{:>3} questions -> {}", qs.len(), a.text);
    }
    Ok(())
}
