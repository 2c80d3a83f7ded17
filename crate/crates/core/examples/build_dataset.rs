//! Self-generate a small Stage-1 dataset from the initial policy and print a
//! few targets plus marker statistics.
//!
//! ```text
//! cargo run --release --example build_dataset -- [n_examples]
//! ```

use timemark::config::RunConfig;
use timemark::dataset::{build_sft_dataset, SftExample};
use timemark::eval::marker_stats;
use timemark::pipeline::{initial_policy, setup};

fn main() -> anyhow::Result<()> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let cfg = RunConfig::default();
    let (vocab, clock) = setup(&cfg)?;
    let policy = initial_policy(&cfg, &vocab);
    let ds = build_sft_dataset(
        &policy,
        &clock,
        n,
        cfg.data.held_out_fraction,
        cfg.lengths.train_max_len,
        cfg.seed,
    )?;
    println!(
        "{} train, {} validation, {} empty generations skipped",
        ds.train.len(),
        ds.validation.len(),
        ds.skipped
    );
    for e in ds.train.iter().take(4) {
        println!("{}: {}", e.id, e.target.join(" "));
    }
    let responses: Vec<Vec<f64>> = ds.train.iter().map(SftExample::markers).collect();
    let stats = marker_stats(&responses, &cfg.stats)?;
    println!("\nmarkers per response\n{}", stats.markers_per_response.to_csv());
    println!("inter-marker intervals (s)\n{}", stats.inter_marker_intervals.to_csv());
    Ok(())
}
