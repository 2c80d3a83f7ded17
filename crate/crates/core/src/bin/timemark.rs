use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use timemark::config::RunConfig;
use timemark::pipeline;

#[derive(Parser)]
#[command(
    name = "timemark",
    version,
    about = "Duration control with spoken time markers on a toy policy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Config override, repeatable: `--set grpo.kl_beta=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    hyper: Hyper,
}

/// Shorthands for the most tuned config keys.
#[derive(Args)]
struct Hyper {
    /// data.n_examples
    #[arg(long)]
    n_examples: Option<usize>,
    /// sft.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// sft.lr
    #[arg(long)]
    sft_lr: Option<f64>,
    /// grpo.steps
    #[arg(long)]
    grpo_steps: Option<u64>,
    /// grpo.lr
    #[arg(long)]
    grpo_lr: Option<f64>,
    /// grpo.group_size
    #[arg(long)]
    group_size: Option<usize>,
    /// grpo.clip_eps
    #[arg(long)]
    clip_eps: Option<f64>,
    /// grpo.kl_beta
    #[arg(long)]
    kl_beta: Option<f64>,
    /// reward.sigma_s
    #[arg(long)]
    sigma: Option<f64>,
    /// reward.tau_s
    #[arg(long)]
    tau: Option<f64>,
    /// lengths.train_max_len
    #[arg(long)]
    train_max_len: Option<usize>,
    /// lengths.eval_max_len
    #[arg(long)]
    eval_max_len: Option<usize>,
}

impl Hyper {
    fn overrides(&self) -> Vec<String> {
        let pairs: [(&str, Option<String>); 12] = [
            ("data.n_examples", self.n_examples.map(|v| v.to_string())),
            ("sft.epochs", self.epochs.map(|v| v.to_string())),
            ("sft.lr", self.sft_lr.map(|v| v.to_string())),
            ("grpo.steps", self.grpo_steps.map(|v| v.to_string())),
            ("grpo.lr", self.grpo_lr.map(|v| v.to_string())),
            ("grpo.group_size", self.group_size.map(|v| v.to_string())),
            ("grpo.clip_eps", self.clip_eps.map(|v| v.to_string())),
            ("grpo.kl_beta", self.kl_beta.map(|v| v.to_string())),
            ("reward.sigma_s", self.sigma.map(|v| v.to_string())),
            ("reward.tau_s", self.tau.map(|v| v.to_string())),
            ("lengths.train_max_len", self.train_max_len.map(|v| v.to_string())),
            ("lengths.eval_max_len", self.eval_max_len.map(|v| v.to_string())),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
            .collect()
    }
}

impl Common {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut overrides = self.overrides.clone();
        overrides.extend(self.hyper.overrides());
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        Ok(base.with_overrides(&overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Self-generate the Stage-1 dataset from the initial policy.
    BuildSft(Common),
    /// Stage-1 SFT on a built dataset.
    TrainSft {
        #[command(flatten)]
        common: Common,
        /// Directory written by build-sft (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Stage-2 GRPO with CHORD mixing from a Stage-1 checkpoint.
    TrainGrpo {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint (defaults to policy_sft.json in --out).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory holding train.jsonl (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// MAE/MAPE report of a checkpoint on duration prompts.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Reward breakdown of a marker list against a target.
    Reward {
        #[command(flatten)]
        common: Common,
        /// Comma-separated marker values in seconds.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        markers: Vec<f64>,
        /// Target duration in seconds.
        #[arg(long, allow_hyphen_values = true)]
        target: f64,
    },
    /// Marker histograms of a dataset file.
    Stats {
        #[command(flatten)]
        common: Common,
        /// A train.jsonl or val.jsonl file.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Export the word duration table.
    MakeDurations(Common),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildSft(c) => {
            let cfg = c.resolve()?;
            let ds = pipeline::cmd_build_sft(&cfg, &c.out)?;
            println!(
                "{} train, {} val, {} skipped -> {}",
                ds.train.len(),
                ds.validation.len(),
                ds.skipped,
                c.out.display()
            );
        }
        Command::TrainSft { common, data } => {
            let cfg = common.resolve()?;
            let data = data.unwrap_or_else(|| common.out.clone());
            let (_, log) = pipeline::cmd_train_sft(&cfg, &data, &common.out)?;
            for e in log {
                println!("epoch {}: train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss);
            }
        }
        Command::TrainGrpo {
            common,
            checkpoint,
            data,
        } => {
            let cfg = common.resolve()?;
            let checkpoint = checkpoint.unwrap_or_else(|| common.out.join(pipeline::SFT_CHECKPOINT));
            let data = data.unwrap_or_else(|| common.out.clone());
            pipeline::cmd_train_grpo(&cfg, &checkpoint, &data, &common.out)?;
            println!("wrote {}", common.out.join(pipeline::GRPO_CHECKPOINT).display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let report = pipeline::cmd_eval(&cfg, &checkpoint, &common.out)?;
            print!("{}", timemark::eval::render_table(&report));
        }
        Command::Reward {
            common,
            markers,
            target,
        } => {
            let cfg = common.resolve()?;
            let value = pipeline::cmd_reward(&cfg, &markers, target)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
        Command::Stats { common, dataset } => {
            let cfg = common.resolve()?;
            let stats = pipeline::cmd_stats(&cfg, &dataset, &common.out)
                .with_context(|| format!("computing stats of {}", dataset.display()))?;
            println!("{} responses, {} markers", stats.responses, stats.marker_times.total());
        }
        Command::MakeDurations(c) => {
            let cfg = c.resolve()?;
            let path = pipeline::cmd_make_durations(&cfg, &c.out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "status": "error",
                "error": err.to_string(),
                "chain": err.chain().skip(1).map(|e| e.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
