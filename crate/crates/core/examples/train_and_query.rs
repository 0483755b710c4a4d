//! Trains a small jointly trained model, saves it, reloads it and answers
//! questions from a precomputed answer index.
//!
//! `cargo run --release --example train_and_query -- [epochs]`

use endx::checkpoint::load_model;
use endx::data::{synthetic_one_to_many, SyntheticConfig};
use endx::eval::{embed_corpus, rank_answers};
use endx::trainer::{train_to_dir, TrainConfig, BEST_CHECKPOINT};

fn main() -> endx::Result<()> {
    let epochs = std::env::args().nth(1).map_or(3, |s| s.parse().expect("epochs"));
    let data = synthetic_one_to_many(&SyntheticConfig { answers: 80, ..Default::default() })?;
    let dir = tempfile_dir();
    let mut cfg = TrainConfig { epochs, batch_size: 16, ..Default::default() };
    cfg.optimizer.learning_rate = 5e-4;
    let outcome = train_to_dir(&data.train, &cfg, &dir)?;
    println!("best epoch {} validation R@1 {:.3}", outcome.best_epoch, outcome.best_r1);

    let (model, vocab, header) = load_model(&dir.join(BEST_CHECKPOINT))?;
    println!("reloaded checkpoint: {} parameters in {} tensors", header.num_params, model.params.len());
    let index = embed_corpus(&data.test.answers, &model, &vocab, String::new())?;
    for q in data.test.questions.iter().take(3) {
        let ranked = rank_answers(&q.text, &index, &model, &vocab)?;
        println!("\n{}", q.text);
        for (id, score) in ranked.iter().take(3) {
            let text = &data.test.answers.iter().find(|a| a.id == *id).unwrap().text;
            println!("  {score:>7.3}  {text}");
        }
    }
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("endx-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}
