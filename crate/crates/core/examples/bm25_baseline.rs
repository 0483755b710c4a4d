//! Scores the lexical baseline on the synthetic held-out paraphrases.
//!
//! `cargo run --example bm25_baseline -- [seed]`

use endx::data::{synthetic_one_to_many, SyntheticConfig};
use endx::eval::{evaluate_bm25, Bm25};

fn main() -> endx::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let data = synthetic_one_to_many(&SyntheticConfig { seed, ..Default::default() })?;
    let all = evaluate_bm25(&data.test, None)?;
    let many = evaluate_bm25(&data.test, Some(4))?;
    println!("all questions   MRR {:.4} R@1 {:.4} R@5 {:.4}", all.mrr, all.recall_at(1), all.recall_at(5));
    println!(">=4 per answer  MRR {:.4} R@1 {:.4} R@5 {:.4}", many.mrr, many.recall_at(1), many.recall_at(5));

    let bm = Bm25::from_texts(data.test.answers.iter().map(|a| a.text.as_str()))?;
    let q = &data.test.questions[0].text;
    let terms: Vec<String> = q.to_lowercase().split_whitespace().map(str::to_string).collect();
    let best = bm.rank(&terms)[0];
    println!("\n{q}\n  -> {}", data.test.answers[best].text);
    Ok(())
}
