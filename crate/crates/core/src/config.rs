//! Run configuration.
//!
//! On disk a config is a JSON object with flat dotted keys such as
//! `"grpo.clip_eps": 0.2`. Missing keys take their defaults, unknown keys are
//! rejected, and `key=value` overrides are applied on top of the file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::clock::ClockConfig;
use crate::error::{Error, Result};
use crate::eval::StatsBins;
use crate::grpo::{ChordSchedule, GrpoConfig};
use crate::policy::PolicyConfig;
use crate::reward::RewardConfig;
use crate::vocab::VocabConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_examples: usize,
    pub held_out_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoRunConfig {
    pub steps: u64,
    pub prompts_per_step: usize,
    /// Policy updates per rollout phase; the first sees ratio 1.
    pub inner_steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Stage-1 examples per CHORD minibatch.
    pub sft_batch: usize,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub adv_eps: f64,
    pub chord: ChordSchedule,
}

impl GrpoRunConfig {
    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            adv_eps: self.adv_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthConfig {
    /// Token budget during dataset building and training rollouts.
    pub train_max_len: usize,
    /// Token budget at evaluation.
    pub eval_max_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRange {
    pub lo_s: f64,
    pub hi_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n: usize,
    pub targets: TargetRange,
    pub bin_width_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub durations_seed: u64,
    pub vocab: VocabConfig,
    pub clock: ClockConfig,
    pub policy: PolicyConfig,
    pub data: DataConfig,
    pub sft: SftConfig,
    pub grpo: GrpoRunConfig,
    pub reward: RewardConfig,
    pub lengths: LengthConfig,
    pub train_targets: TargetRange,
    pub eval: EvalConfig,
    pub stats: StatsBins,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grpo = GrpoConfig::default();
        Self {
            seed: 7,
            durations_seed: 11,
            vocab: VocabConfig::default(),
            clock: ClockConfig::default(),
            policy: PolicyConfig::default(),
            data: DataConfig {
                n_examples: 4000,
                held_out_fraction: 0.1,
            },
            sft: SftConfig {
                epochs: 5,
                lr: 0.05,
                batch_size: 16,
                optimizer: OptimizerKind::Adam,
            },
            grpo: GrpoRunConfig {
                steps: 500,
                prompts_per_step: 16,
                inner_steps: 2,
                lr: 0.01,
                optimizer: OptimizerKind::Adam,
                sft_batch: 16,
                group_size: grpo.group_size,
                clip_eps: grpo.clip_eps,
                kl_beta: grpo.kl_beta,
                adv_eps: grpo.adv_eps,
                chord: ChordSchedule::default(),
            },
            reward: RewardConfig::default(),
            lengths: LengthConfig {
                train_max_len: 34,
                eval_max_len: 56,
            },
            train_targets: TargetRange { lo_s: 4.0, hi_s: 12.0 },
            eval: EvalConfig {
                n: 500,
                targets: TargetRange { lo_s: 4.0, hi_s: 12.0 },
                bin_width_s: 2.0,
            },
            stats: StatsBins::default(),
        }
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                let child = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()));
                node = child
                    .as_object_mut()
                    .ok_or_else(|| Error::InvalidArgument(format!("config key {key:?} nests under a scalar")))?;
            }
        }
    }
    Ok(Value::Object(root))
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let defaults = Self::default().to_flat();
        let mut merged = defaults.clone();
        for (k, v) in flat {
            if !defaults.contains_key(k) {
                return Err(Error::InvalidArgument(format!("unknown config key {k:?}")));
            }
            merged.insert(k.clone(), v.clone());
        }
        let cfg: Self = serde_json::from_value(unflatten(&merged)?)
            .map_err(|e| Error::InvalidArgument(format!("bad config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat JSON text, keys sorted.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let flat: BTreeMap<String, Value> = serde_json::from_str(text)?;
        Self::from_flat(&flat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides. Values are parsed as JSON, falling back
    /// to a plain string (for enum values such as `adam`).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut flat = self.to_flat();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            if !flat.contains_key(key) {
                return Err(Error::InvalidArgument(format!("unknown config key {key:?}")));
            }
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            flat.insert(key.to_string(), value);
        }
        Self::from_flat(&flat)
    }

    /// Hex sha256 of the canonical flat JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.clock.validate()?;
        self.reward.validate()?;
        self.grpo.grpo().validate()?;
        self.grpo.chord.validate()?;
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.lengths.train_max_len == 0 || self.lengths.eval_max_len < self.lengths.train_max_len {
            return bad(format!(
                "need 1 <= train_max_len <= eval_max_len, got {:?}",
                self.lengths
            ));
        }
        for (name, r) in [
            ("train_targets", self.train_targets),
            ("eval.targets", self.eval.targets),
        ] {
            if !(r.lo_s > 0.0 && r.hi_s >= r.lo_s && r.hi_s.is_finite()) {
                return bad(format!("{name} must satisfy 0 < lo <= hi, got {r:?}"));
            }
        }
        if !(0.0..=1.0).contains(&self.data.held_out_fraction) {
            return bad(format!(
                "data.held_out_fraction must be in [0, 1], got {}",
                self.data.held_out_fraction
            ));
        }
        if self.sft.batch_size == 0 || self.grpo.prompts_per_step == 0 || self.grpo.inner_steps == 0 {
            return bad("batch sizes and inner steps must be positive".into());
        }
        if !(self.sft.lr >= 0.0 && self.grpo.lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.policy.temperature.is_nan() || self.policy.temperature <= 0.0 {
            return bad(format!(
                "policy.temperature must be positive, got {}",
                self.policy.temperature
            ));
        }
        Ok(())
    }
}
