//! End-to-end drivers: dataset build, Stage-1 SFT, Stage-2 GRPO with CHORD
//! mixing, evaluation, and the file-level commands behind the CLI.
//!
//! Every `cmd_*` function writes its outputs plus a `manifest_<command>.json`
//! holding the resolved config, its hash, and sha256 checksums of all inputs
//! and outputs. Nothing time-dependent is written, so reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::clock::{make_duration_prompt, SpeechClock};
use crate::config::{OptimizerKind, RunConfig};
use crate::dataset::{build_sft_dataset, read_examples, tokenize, write_examples, SftDataset, SftExample};
use crate::error::{Error, Result};
use crate::eval::{
    bin_report, marker_stats, sample_targets, write_records, write_report, EvalRecord, EvalReport, MarkerStats,
    TargetSetting,
};
use crate::grpo::{chord_alpha, mixed_loss, GroupBatch, Rollout};
use crate::policy::{Adam, Params, PromptContext, ToyPolicy};
use crate::reward::total_reward;
use crate::seed;
use crate::vocab::Vocabulary;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const DURATIONS_FILE: &str = "durations.json";
pub const INIT_CHECKPOINT: &str = "policy_init.json";
pub const SFT_CHECKPOINT: &str = "policy_sft.json";
pub const GRPO_CHECKPOINT: &str = "policy_grpo.json";
pub const SFT_LOG: &str = "sft_log.jsonl";
pub const GRPO_LOG: &str = "grpo_log.jsonl";
pub const EVAL_RECORDS: &str = "eval_records.jsonl";
pub const EVAL_REPORT_STEM: &str = "eval_report";

/// Vocabulary and speech clock of a run.
pub fn setup(cfg: &RunConfig) -> Result<(Vocabulary, SpeechClock)> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg.vocab)?;
    let clock = SpeechClock::new(vocab.clone(), &cfg.clock, cfg.durations_seed)?;
    Ok((vocab, clock))
}

pub fn initial_policy(cfg: &RunConfig, vocab: &Vocabulary) -> ToyPolicy {
    ToyPolicy::init(vocab.clone(), cfg.policy, cfg.seed)
}

enum Optimizer {
    Sgd,
    Adam(Box<Adam>),
}

impl Optimizer {
    fn new(kind: OptimizerKind, policy: &ToyPolicy) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Box::new(Adam::new(policy))),
        }
    }

    fn step(&mut self, policy: &mut ToyPolicy, grad: &Params, lr: f64) {
        match self {
            Optimizer::Sgd => policy.apply_update(grad, lr),
            Optimizer::Adam(adam) => adam.step(policy, grad, lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Stage 1: minibatch SFT on self-generated examples. Epoch 0 in the log is
/// the starting point.
pub fn train_sft(
    cfg: &RunConfig,
    policy: &mut ToyPolicy,
    train: &[SftExample],
    validation: &[SftExample],
) -> Result<Vec<SftEpochLog>> {
    let vocab = policy.vocab().clone();
    let train = tokenize(train, &vocab)?;
    let validation = tokenize(validation, &vocab)?;
    let mut opt = Optimizer::new(cfg.sft.optimizer, policy);
    let mut log = vec![SftEpochLog {
        epoch: 0,
        train_loss: policy.sft_loss(&train)?,
        val_loss: policy.sft_loss(&validation)?,
    }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.sft.epochs {
        let mut rng = seed::rng_for(cfg.seed, &[seed::tag::SFT_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.sft.batch_size) {
            let batch: Vec<(PromptContext, Vec<u32>)> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (_, grad) = policy.sft_loss_and_grad(&batch)?;
            opt.step(policy, &grad, cfg.sft.lr);
        }
        if !policy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "SFT diverged in epoch {epoch}; lower sft.lr"
            )));
        }
        log.push(SftEpochLog {
            epoch,
            train_loss: policy.sft_loss(&train)?,
            val_loss: policy.sft_loss(&validation)?,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepLog {
    pub step: u64,
    pub alpha: f64,
    pub mean_reward: f64,
    pub loss_grpo: f64,
    pub loss_sft: f64,
    pub loss_mixed: f64,
    pub mean_kl: f64,
    pub clipped_fraction: f64,
    /// Mean |t_last - t_inst| over the rollouts that emitted a marker.
    pub mean_marker_gap_s: f64,
}

fn marker_seconds(vocab: &Vocabulary, tokens: &[u32]) -> Vec<f64> {
    tokens
        .iter()
        .filter_map(|&t| vocab.marker_index(t))
        .map(|k| vocab.marker_seconds(k))
        .collect()
}

/// One prompt's group of rollouts sampled from a frozen snapshot.
fn sample_group(
    cfg: &RunConfig,
    old: &ToyPolicy,
    reference: &ToyPolicy,
    prompt: &PromptContext,
    stream: &[u64],
) -> Result<GroupBatch> {
    let t_inst = prompt
        .t_inst_s
        .ok_or_else(|| Error::InvalidArgument("GRPO prompts need a target".into()))?;
    let vocab = old.vocab();
    let rollouts = (0..cfg.grpo.group_size as u64)
        .map(|g| {
            let mut path = stream.to_vec();
            path.push(g);
            let sample = old.sample_sequence(prompt, cfg.lengths.train_max_len, seed::derive_seed(cfg.seed, &path));
            let reward = total_reward(t_inst, &marker_seconds(vocab, &sample.tokens), &cfg.reward)?.total;
            let logp_ref = reference.sequence_logprob(prompt, &sample.tokens)?.1;
            Ok(Rollout {
                prompt_id: format!("{stream:?}"),
                tokens: sample.tokens,
                logp_theta: sample.logps.clone(),
                logp_old: sample.logps,
                logp_ref,
                reward,
                truncated: sample.truncated,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GroupBatch::new(rollouts)
}

/// Stage 2: GRPO on duration prompts, mixed with SFT on Stage-1 examples by
/// the CHORD weight. The reference policy is the Stage-1 policy and the old
/// policy is refreshed at the start of every step.
pub fn train_grpo(
    cfg: &RunConfig,
    policy: &mut ToyPolicy,
    sft_examples: &[SftExample],
    mut on_step: impl FnMut(&GrpoStepLog),
) -> Result<()> {
    let vocab = policy.vocab().clone();
    let reference = policy.clone();
    let sft = tokenize(sft_examples, &vocab)?;
    let grpo_cfg = cfg.grpo.grpo();
    let mut opt = Optimizer::new(cfg.grpo.optimizer, policy);
    let (lo, hi) = (cfg.train_targets.lo_s, cfg.train_targets.hi_s);

    for step in 0..cfg.grpo.steps {
        let alpha = chord_alpha(step, &cfg.grpo.chord);
        let mut prompt_rng = seed::rng_for(cfg.seed, &[seed::tag::GRPO_PROMPTS, step]);
        let prompts: Vec<PromptContext> = (0..cfg.grpo.prompts_per_step)
            .map(|_| make_duration_prompt(&vocab, prompt_rng.gen_range(lo..=hi)))
            .collect::<Result<_>>()?;

        let old = policy.clone();
        let mut groups: Vec<GroupBatch> = prompts
            .par_iter()
            .enumerate()
            .map(|(p, prompt)| {
                sample_group(
                    cfg,
                    &old,
                    &reference,
                    prompt,
                    &[seed::tag::GRPO_ROLLOUTS, step, p as u64],
                )
            })
            .collect::<Result<_>>()?;

        let sft_batch: Vec<(PromptContext, Vec<u32>)> = if sft.is_empty() || alpha == 0.0 {
            Vec::new()
        } else {
            let mut rng = seed::rng_for(cfg.seed, &[seed::tag::GRPO_SFT_BATCH, step]);
            (0..cfg.grpo.sft_batch)
                .map(|_| sft[rng.gen_range(0..sft.len())].clone())
                .collect()
        };

        for inner in 0..cfg.grpo.inner_steps {
            let n = groups.len() as f64;
            let per_group: Vec<_> = prompts
                .par_iter()
                .zip(groups.par_iter_mut())
                .map(|(prompt, batch)| {
                    policy.refresh_logprobs(prompt, batch)?;
                    policy.grpo_grad(prompt, batch, &grpo_cfg)
                })
                .collect::<Result<_>>()?;
            let mut grad = policy.zero_grad();
            let (mut loss_grpo, mut mean_kl, mut clipped) = (0.0, 0.0, 0.0);
            for (loss, g) in &per_group {
                grad.add_scaled(g, (1.0 - alpha) / n);
                loss_grpo += loss.loss / n;
                mean_kl += loss.mean_kl / n;
                clipped += loss.clipped_fraction / n;
            }
            let (loss_sft, sft_grad) = policy.sft_loss_and_grad(&sft_batch)?;
            grad.add_scaled(&sft_grad, alpha);

            if inner == 0 {
                let rollouts = groups.iter().flat_map(|g| &g.rollouts);
                let rewards: Vec<f64> = rollouts.clone().map(|r| r.reward).collect();
                let gaps: Vec<f64> = groups
                    .iter()
                    .zip(&prompts)
                    .flat_map(|(g, p)| {
                        g.rollouts.iter().filter_map(|r| {
                            marker_seconds(&vocab, &r.tokens)
                                .last()
                                .map(|t| (t - p.t_inst_s.unwrap_or(0.0)).abs())
                        })
                    })
                    .collect();
                on_step(&GrpoStepLog {
                    step,
                    alpha,
                    mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
                    loss_grpo,
                    loss_sft,
                    loss_mixed: mixed_loss(loss_grpo, loss_sft, alpha),
                    mean_kl,
                    clipped_fraction: clipped,
                    mean_marker_gap_s: gaps.iter().sum::<f64>() / gaps.len().max(1) as f64,
                });
            }
            opt.step(policy, &grad, cfg.grpo.lr);
        }
        if !policy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "GRPO diverged at step {step}; lower grpo.lr"
            )));
        }
    }
    Ok(())
}

/// One generation per target under a duration prompt, realized by the clock.
pub fn evaluate(
    policy: &ToyPolicy,
    clock: &SpeechClock,
    targets: &[f64],
    max_len: usize,
    master_seed: u64,
) -> Result<Vec<EvalRecord>> {
    let vocab = policy.vocab();
    targets
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let prompt = make_duration_prompt(vocab, t)?;
            let sample = policy.sample_sequence(
                &prompt,
                max_len,
                seed::derive_seed(master_seed, &[seed::tag::EVAL_ROLLOUTS, i as u64]),
            );
            let words: Vec<u32> = sample.tokens.iter().copied().filter(|&w| vocab.is_word(w)).collect();
            let speech = clock.realize(
                &words,
                seed::derive_seed(master_seed, &[seed::tag::JITTER, 1 << 32 | i as u64]),
            )?;
            let text: Vec<String> = sample
                .tokens
                .iter()
                .filter(|&&w| w != vocab.eos())
                .filter_map(|&w| vocab.token_str(w))
                .collect();
            Ok(EvalRecord {
                id: format!("eval-{i:05}"),
                source: "toy".into(),
                t_inst_s: t,
                actual_s: speech.duration_s,
                t_last_s: marker_seconds(vocab, &sample.tokens).last().copied(),
                text: Some(text.join(" ")),
                truncated: sample.truncated,
            })
        })
        .collect()
}

/// Eval targets: uniform over the configured range.
pub fn eval_targets(cfg: &RunConfig) -> Result<Vec<f64>> {
    let range = TargetSetting::Custom {
        lo_s: cfg.eval.targets.lo_s,
        hi_s: cfg.eval.targets.hi_s,
    };
    sample_targets(range, cfg.eval.n, cfg.seed)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: BTreeMap<String, Value>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: Value,
}

fn file_key(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Writes `manifest_<command>.json` into `out` and returns its path.
pub fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    summary: Value,
) -> Result<PathBuf> {
    let checksums = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
        paths.iter().map(|p| Ok((file_key(p), sha256_file(p)?))).collect()
    };
    let manifest = Manifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.to_flat(),
        inputs: checksums(inputs)?,
        outputs: checksums(outputs)?,
        summary,
    };
    let path = out.join(format!("manifest_{command}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for row in rows {
        writeln!(out, "{}", serde_json::to_string(row)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes the duration table of the run.
pub fn cmd_make_durations(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    ensure_dir(out)?;
    let (vocab, clock) = setup(cfg)?;
    let path = out.join(DURATIONS_FILE);
    clock.table.export(&vocab, &path)?;
    write_manifest(
        out,
        "make-durations",
        cfg,
        &[],
        std::slice::from_ref(&path),
        Value::Null,
    )?;
    Ok(path)
}

/// Initial policy, duration table, and the self-generated train/val split.
pub fn cmd_build_sft(cfg: &RunConfig, out: &Path) -> Result<SftDataset> {
    ensure_dir(out)?;
    let (vocab, clock) = setup(cfg)?;
    let policy = initial_policy(cfg, &vocab);
    let dataset = build_sft_dataset(
        &policy,
        &clock,
        cfg.data.n_examples,
        cfg.data.held_out_fraction,
        cfg.lengths.train_max_len,
        cfg.seed,
    )?;
    let paths = [
        out.join(TRAIN_FILE),
        out.join(VAL_FILE),
        out.join(DURATIONS_FILE),
        out.join(INIT_CHECKPOINT),
    ];
    write_examples(&paths[0], &dataset.train)?;
    write_examples(&paths[1], &dataset.validation)?;
    clock.table.export(&vocab, &paths[2])?;
    policy.save(&paths[3], &cfg.hash())?;
    let summary = serde_json::json!({
        "train": dataset.train.len(),
        "validation": dataset.validation.len(),
        "skipped_empty": dataset.skipped,
    });
    write_manifest(out, "build-sft", cfg, &[], &paths, summary)?;
    Ok(dataset)
}

pub fn load_policy(cfg: &RunConfig, path: &Path) -> Result<ToyPolicy> {
    let vocab = Vocabulary::new(cfg.vocab)?;
    Ok(ToyPolicy::load(path, vocab, cfg.policy)?.0)
}

/// Stage-1 SFT from the initial checkpoint in `data`.
pub fn cmd_train_sft(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(ToyPolicy, Vec<SftEpochLog>)> {
    ensure_dir(out)?;
    let inputs = [data.join(TRAIN_FILE), data.join(VAL_FILE), data.join(INIT_CHECKPOINT)];
    let train = read_examples(&inputs[0])?;
    let validation = read_examples(&inputs[1])?;
    let mut policy = load_policy(cfg, &inputs[2])?;
    let log = train_sft(cfg, &mut policy, &train, &validation)?;
    let outputs = [out.join(SFT_CHECKPOINT), out.join(SFT_LOG)];
    policy.save(&outputs[0], &cfg.hash())?;
    write_jsonl(&outputs[1], &log)?;
    let last = log.last().cloned();
    write_manifest(out, "train-sft", cfg, &inputs, &outputs, serde_json::to_value(last)?)?;
    Ok((policy, log))
}

/// Stage-2 GRPO+CHORD from the Stage-1 checkpoint.
pub fn cmd_train_grpo(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<ToyPolicy> {
    ensure_dir(out)?;
    let inputs = [checkpoint.to_path_buf(), data.join(TRAIN_FILE)];
    let mut policy = load_policy(cfg, &inputs[0])?;
    let examples = read_examples(&inputs[1])?;
    let mut log = Vec::new();
    train_grpo(cfg, &mut policy, &examples, |s| log.push(s.clone()))?;
    let outputs = [out.join(GRPO_CHECKPOINT), out.join(GRPO_LOG)];
    policy.save(&outputs[0], &cfg.hash())?;
    write_jsonl(&outputs[1], &log)?;
    write_manifest(
        out,
        "train-grpo",
        cfg,
        &inputs,
        &outputs,
        serde_json::to_value(log.last())?,
    )?;
    Ok(policy)
}

/// Evaluates a checkpoint on the configured target range.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    ensure_dir(out)?;
    let (_, clock) = setup(cfg)?;
    let policy = load_policy(cfg, checkpoint)?;
    let records = evaluate(&policy, &clock, &eval_targets(cfg)?, cfg.lengths.eval_max_len, cfg.seed)?;
    let report = bin_report(&records, cfg.eval.bin_width_s)?;
    let records_path = out.join(EVAL_RECORDS);
    write_records(&records_path, &records)?;
    let mut outputs = vec![records_path];
    outputs.extend(write_report(&report, out, EVAL_REPORT_STEM)?);
    let summary = serde_json::json!({ "n": report.n, "mae_s": report.mae_s, "mape_pct": report.mape_pct });
    write_manifest(out, "eval", cfg, &[checkpoint.to_path_buf()], &outputs, summary)?;
    Ok(report)
}

/// Marker histograms of a dataset file.
pub fn cmd_stats(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<MarkerStats> {
    ensure_dir(out)?;
    let examples = read_examples(dataset)?;
    let responses: Vec<Vec<f64>> = examples.iter().map(SftExample::markers).collect();
    let stats = marker_stats(&responses, &cfg.stats)?;
    let outputs = [
        (
            out.join("stats_markers_per_response.csv"),
            stats.markers_per_response.to_csv(),
        ),
        (out.join("stats_marker_times.csv"), stats.marker_times.to_csv()),
        (
            out.join("stats_inter_marker_intervals.csv"),
            stats.inter_marker_intervals.to_csv(),
        ),
        (out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n"),
    ];
    for (path, body) in &outputs {
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    let paths: Vec<PathBuf> = outputs.into_iter().map(|(p, _)| p).collect();
    write_manifest(out, "stats", cfg, &[dataset.to_path_buf()], &paths, Value::Null)?;
    Ok(stats)
}

/// Numbers rounded to 10 significant digits for printing.
pub fn round_significant(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits - 1 - magnitude);
    let r = (x * factor).round() / factor;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Reward breakdown as a JSON object, components rounded to 10 significant
/// digits.
pub fn cmd_reward(cfg: &RunConfig, markers: &[f64], t_inst_s: f64) -> Result<Value> {
    let b = total_reward(t_inst_s, markers, &cfg.reward)?;
    let r = |x: f64| round_significant(x, 10);
    Ok(serde_json::json!({
        "t_inst_s": t_inst_s,
        "markers": markers,
        "main": r(b.main),
        "presence": r(b.presence),
        "monotonicity": r(b.monotonicity),
        "repetition": r(b.repetition),
        "copy": r(b.copy),
        "total": r(b.total),
    }))
}

/// Summary of a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub sft_log: Vec<SftEpochLog>,
    pub stage1: EvalReport,
    pub stage2: EvalReport,
}

/// build-sft, train-sft, train-grpo, then eval of both checkpoints, all under
/// `out` (`out/stage1_eval` and `out/stage2_eval` hold the reports).
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineSummary> {
    cmd_build_sft(cfg, out)?;
    let (_, sft_log) = cmd_train_sft(cfg, out, out)?;
    cmd_train_grpo(cfg, &out.join(SFT_CHECKPOINT), out, out)?;
    let stage1 = cmd_eval(cfg, &out.join(SFT_CHECKPOINT), &out.join("stage1_eval"))?;
    let stage2 = cmd_eval(cfg, &out.join(GRPO_CHECKPOINT), &out.join("stage2_eval"))?;
    Ok(PipelineSummary {
        sft_log,
        stage1,
        stage2,
    })
}
