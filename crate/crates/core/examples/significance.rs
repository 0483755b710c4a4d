//! Welch's t-test between two sets of per-seed scores.
//!
//! `cargo run --example significance -- 0.41,0.44,0.43 0.47,0.49,0.46`

use endx::eval::significance_test;

fn parse(s: &str) -> Vec<f64> {
    s.split(',').map(|x| x.trim().parse().expect("number")).collect()
}

fn main() -> endx::Result<()> {
    let mut args = std::env::args().skip(1);
    let a = args.next().map_or_else(|| vec![0.456, 0.431, 0.470, 0.442, 0.460], |s| parse(&s));
    let b = args.next().map_or_else(|| vec![0.486, 0.502, 0.471, 0.515, 0.490], |s| parse(&s));
    let (t, p) = significance_test(&b, &a)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("means {:.4} vs {:.4}, t = {t:.3}, two-sided p = {p:.4}", mean(&b), mean(&a));
    Ok(())
}
