//! Evaluate a checkpoint on duration prompts and print the binned report.
//! Without a checkpoint the untrained initial policy is evaluated.
//!
//! ```text
//! cargo run --release --example evaluate -- [checkpoint.json] [key=value ...]
//! ```

use std::path::PathBuf;

use timemark::config::RunConfig;
use timemark::eval::{bin_report, render_table};
use timemark::pipeline::{eval_targets, evaluate, initial_policy, load_policy, setup};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1).peekable();
    let checkpoint = args.next_if(|a| !a.contains('=')).map(PathBuf::from);
    let overrides: Vec<String> = args.collect();
    let cfg = RunConfig::default().with_overrides(&overrides)?;
    let (vocab, clock) = setup(&cfg)?;
    let policy = match &checkpoint {
        Some(path) => load_policy(&cfg, path)?,
        None => initial_policy(&cfg, &vocab),
    };
    let records = evaluate(
        &policy,
        &clock,
        &eval_targets(&cfg)?,
        cfg.lengths.eval_max_len,
        cfg.seed,
    )?;
    print!("{}", render_table(&bin_report(&records, cfg.eval.bin_width_s)?));
    for r in records.iter().take(3) {
        println!(
            "\ntarget {:.1} s, spoke {:.2} s: {}",
            r.t_inst_s,
            r.actual_s,
            r.text.as_deref().unwrap_or("")
        );
    }
    Ok(())
}
