//! Runs the synthetic temporal-block comparison for the given seeds
//! (default: 0) and prints one JSON outcome per seed.
//!
//! `cargo run --release --example tam_experiment -- 0 1 2`

use cvseq::experiment::{run_tam_experiment, TamExperiment};

fn main() -> cvseq::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let exp = TamExperiment::default();
    for seed in if seeds.is_empty() { vec![0] } else { seeds } {
        let out = run_tam_experiment(&exp, seed, &mut |line| eprintln!("{line}"))?;
        eprintln!("seed {seed}: reduction {:.1}%", 100.0 * out.reduction());
        println!("{}", serde_json::to_string(&out).expect("outcome serializes"));
    }
    Ok(())
}
