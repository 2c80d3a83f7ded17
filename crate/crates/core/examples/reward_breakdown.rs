//! Reward breakdowns for a few marker lists against one target, including a
//! list that copies the target and is penalized for it.
//!
//! ```text
//! cargo run --example reward_breakdown -- [target_s]
//! ```

use timemark::reward::{total_reward, RewardConfig};

fn main() -> anyhow::Result<()> {
    let target: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10.0);
    let cfg = RewardConfig::default();
    let cases: [(&str, Vec<f64>); 5] = [
        ("calibrated", vec![1.8, 4.1, 7.0, target]),
        ("short by 3 s", vec![1.8, 4.1, target - 3.0]),
        ("no markers", vec![]),
        ("copies target", vec![target; 3]),
        ("out of order", vec![4.1, 1.8, 7.0, target]),
    ];
    println!("target {target} s");
    println!(
        "{:<14} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7}",
        "case", "main", "pres", "mono", "rep", "copy", "total"
    );
    for (name, markers) in cases {
        let b = total_reward(target, &markers, &cfg)?;
        println!(
            "{name:<14} {:>6.3} {:>6.1} {:>6.3} {:>7.3} {:>7.3} {:>7.3}",
            b.main, b.presence, b.monotonicity, b.repetition, b.copy, b.total
        );
    }
    Ok(())
}
