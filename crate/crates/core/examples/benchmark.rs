//! Runs the reference synthetic benchmark and prints one row per variant.
//!
//! `cargo run --release --example benchmark -- [seeds...]`

use std::time::Instant;

use lapr::bench::{reference_synth, reference_train, reference_variants, run_seed};

fn main() -> lapr::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse().expect("seed")).collect();
    let seeds = if seeds.is_empty() { vec![0, 1, 2, 3, 4] } else { seeds };
    for seed in seeds {
        let start = Instant::now();
        let out = run_seed(&reference_synth(seed), &reference_train(seed), &reference_variants())?;
        println!("seed {seed}  baseline {:.4}  consistency {:.3}  ({:.1}s)", out.baseline.mode_match_acc, out.consistency, start.elapsed().as_secs_f64());
        for v in &out.variants {
            let first = v.report.epochs.first().map_or(f64::NAN, |e| e.expert);
            let last = v.report.epochs.last().map_or(f64::NAN, |e| e.expert);
            println!(
                "  {:<10} acc {:.4}  label {:.4}  entropy {:.4}  expert loss {:.4} -> {:.4}",
                v.variant, v.metrics.mode_match_acc, v.metrics.mean_label_score, v.entropy, first, last
            );
        }
    }
    Ok(())
}
