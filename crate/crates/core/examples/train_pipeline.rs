//! Full toy run: build the self-generated dataset, Stage-1 SFT, Stage-2
//! GRPO with CHORD mixing, then evaluate both checkpoints.
//!
//! ```text
//! cargo run --release --example train_pipeline -- [out_dir] [key=value ...]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use timemark::config::RunConfig;
use timemark::eval::{format_mae_mape, render_table};
use timemark::pipeline::run_pipeline;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/example".into()));
    let overrides: Vec<String> = args.collect();
    let cfg = RunConfig::default().with_overrides(&overrides)?;

    let started = Instant::now();
    let summary = run_pipeline(&cfg, &out)?;
    for e in &summary.sft_log {
        println!(
            "sft epoch {}: train {:.4}  val {:.4}",
            e.epoch, e.train_loss, e.val_loss
        );
    }
    println!("\nStage 1 only\n{}", render_table(&summary.stage1));
    println!("Stage 2\n{}", render_table(&summary.stage2));
    println!(
        "MAE / MAPE: stage 1 {}  ->  stage 2 {}   ({:.1} s)",
        format_mae_mape(summary.stage1.mae_s, summary.stage1.mape_pct),
        format_mae_mape(summary.stage2.mae_s, summary.stage2.mape_pct),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
