//! Trains the dual-only baseline and the jointly trained model on the
//! synthetic one-to-many corpus and compares them on held-out paraphrases.
//!
//! `cargo run --example synthetic_comparison -- [epochs] [seed]`

use std::time::Instant;

use endx::data::{make_splits, synthetic_one_to_many, SyntheticConfig};
use endx::eval::{embed_corpus, evaluate};
use endx::trainer::{train, TrainConfig};

fn main() -> endx::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: u32 = args.next().map_or(10, |s| s.parse().expect("epochs"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let data = synthetic_one_to_many(&SyntheticConfig { seed, ..Default::default() })?;
    let (tr, val) = make_splits(&data.train, 9, 10, seed)?;
    println!("train pairs {} validation questions {} test questions {}", tr.pairs.len(), val.questions.len(), data.test.questions.len());

    // desk-scale settings: smaller learning rate and alignment weights
    let mut base = TrainConfig { epochs, seed, ..Default::default() };
    base.optimizer.learning_rate = 5e-4;
    base.gam.weights.aq = 0.1;
    base.gam.weights.qa = 0.1;
    base.gam.weights.qq = 0.01;
    base.gam.weights.aa = 0.01;
    let mut dual = base.clone();
    dual.loss_weights.cross = 0.0;
    dual.loss_weights.ga = 0.0;

    for (name, cfg) in [("dual", dual), ("joint", base)] {
        let t = Instant::now();
        let out = train(&tr, &val, &cfg, |_| {})?;
        let index = embed_corpus(&data.test.answers, &out.best, &out.vocab, String::new())?;
        let all = evaluate(&out.best, &out.vocab, &data.test, &index, None)?;
        let many = evaluate(&out.best, &out.vocab, &data.test, &index, Some(4))?;
        println!(
            "{name:>5}: best epoch {} | R@1 {:.4} MRR {:.4} | >=4 questions R@1 {:.4} | {:.1}s",
            out.best_epoch,
            all.recall_at(1),
            all.mrr,
            many.recall_at(1),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
