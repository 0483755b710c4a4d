//! Compares how the two towers place the questions that share one answer.
//!
//! `cargo run --release --example similarity_export -- [out.csv]`

use endx::data::{make_splits, synthetic_one_to_many, SyntheticConfig};
use endx::eval::{embed_texts, similarity_matrix, write_similarity_csv};
use endx::model::Side;
use endx::trainer::{train, TrainConfig};

fn main() -> endx::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "similarity.csv".into());
    let data = synthetic_one_to_many(&SyntheticConfig { answers: 60, ..Default::default() })?;
    let (tr, val) = make_splits(&data.train, 9, 10, 0)?;
    let trained = train(&tr, &val, &TrainConfig { epochs: 2, batch_size: 16, ..Default::default() }, |_| {})?;

    let per_answer = data.train.questions_per_answer();
    let (answer, qs) = per_answer.iter().enumerate().max_by_key(|(i, q)| (q.len(), std::cmp::Reverse(*i))).unwrap();
    let texts: Vec<&str> = qs.iter().map(|&q| data.train.questions[q].text.as_str()).collect();
    let emb = embed_texts(&trained.best, &trained.vocab, Side::Question, &texts)?;
    let sim = similarity_matrix(&emb)?;
    let ids: Vec<String> = qs.iter().map(|&q| data.train.questions[q].id.clone()).collect();
    write_similarity_csv(std::path::Path::new(&out), &ids, &sim)?;

    println!("answer: {}", data.train.answers[answer].text);
    for (i, t) in texts.iter().enumerate() {
        let row: Vec<String> = (0..texts.len()).map(|j| format!("{:>6.3}", sim.at(i, j))).collect();
        println!("{}  {t}", row.join(" "));
    }
    println!("written to {out}");
    Ok(())
}
