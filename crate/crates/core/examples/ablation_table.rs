//! Trains the six alignment ablations and prints the CSV table.
//!
//! `cargo run --release --example ablation_table -- [epochs]`

use endx::data::{make_splits, synthetic_one_to_many, SyntheticConfig};
use endx::trainer::{ablation_configs, ablation_csv, ablation_matrix, TrainConfig};

fn main() -> endx::Result<()> {
    let epochs = std::env::args().nth(1).map_or(2, |s| s.parse().expect("epochs"));
    let data = synthetic_one_to_many(&SyntheticConfig { answers: 60, ..Default::default() })?;
    let (tr, val) = make_splits(&data.train, 9, 10, 0)?;
    let mut base = TrainConfig { epochs, batch_size: 16, ..Default::default() };
    base.encoder.model_dim = 32;
    for (name, cfg) in ablation_configs(&base) {
        println!("{name:<10} weights {:?} enabled {:?}", cfg.loss_weights, cfg.gam.enabled);
    }
    let rows = ablation_matrix(&tr, &val, &data.test, &base)?;
    print!("\n{}", ablation_csv(&rows));
    Ok(())
}
