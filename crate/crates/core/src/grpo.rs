//! Group-relative policy optimization objective.
//!
//! For a group of `G` rollouts sampled from a frozen snapshot of the policy,
//! each token `n` of rollout `g` contributes
//!
//! ```text
//! l[g,n] = min(rho * A[g], clip(rho, 1 - eps, 1 + eps) * A[g]) - beta * kl[g,n]
//! rho    = p_theta(token) / p_old(token)
//! kl     = exp(d) - d - 1,   d = log p_ref(token) - log p_theta(token)
//! ```
//!
//! and the loss is `-(1/G) sum_g (1/|g|) sum_n l[g,n]`. Advantages are the
//! group rewards standardized by the group mean and population standard
//! deviation. During training the loss is mixed with a supervised loss on
//! expert trajectories, `(1 - alpha) * L_grpo + alpha * L_sft`, with `alpha`
//! decaying linearly over a fixed number of steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub adv_eps: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip_eps: 0.2,
            kl_beta: 0.04,
            adv_eps: 1e-8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "group size must be at least 2, got {}",
                self.group_size
            )));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "clip epsilon must be in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kl beta must be non-negative, got {}",
                self.kl_beta
            )));
        }
        if !(self.adv_eps.is_finite() && self.adv_eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "advantage epsilon must be non-negative, got {}",
                self.adv_eps
            )));
        }
        Ok(())
    }
}

/// One sampled completion with per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: String,
    pub tokens: Vec<u32>,
    /// Under the policy being optimized.
    pub logp_theta: Vec<f64>,
    /// Under the frozen snapshot that sampled the rollout.
    pub logp_old: Vec<f64>,
    /// Under the frozen reference policy.
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    pub truncated: bool,
}

impl Rollout {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.logp_theta.len() != n || self.logp_old.len() != n || self.logp_ref.len() != n {
            return Err(Error::LengthMismatch(format!(
                "rollout for {} has {n} tokens but log-prob lengths {}/{}/{}",
                self.prompt_id,
                self.logp_theta.len(),
                self.logp_old.len(),
                self.logp_ref.len()
            )));
        }
        let all = self.logp_theta.iter().chain(&self.logp_old).chain(&self.logp_ref);
        if let Some(bad) = all.into_iter().find(|lp| !(lp.is_finite() && **lp <= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "log-probabilities must be finite and <= 0, got {bad}"
            )));
        }
        if !self.reward.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "reward must be finite, got {}",
                self.reward
            )));
        }
        Ok(())
    }
}

/// Rollouts that share one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub rollouts: Vec<Rollout>,
}

impl GroupBatch {
    pub fn new(rollouts: Vec<Rollout>) -> Result<Self> {
        let batch = Self { rollouts };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollouts.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a group needs at least 2 rollouts, got {}",
                self.rollouts.len()
            )));
        }
        let prompt = &self.rollouts[0].prompt_id;
        for r in &self.rollouts {
            if &r.prompt_id != prompt {
                return Err(Error::InvalidArgument(format!(
                    "group mixes prompts {prompt:?} and {:?}",
                    r.prompt_id
                )));
            }
            r.validate()?;
        }
        Ok(())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// `(r - mean) / max(population_std, adv_eps)`, so groups with any real
/// spread come out with unit variance and constant groups give zeros.
pub fn group_advantages(rewards: &[f64], adv_eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(adv_eps);
    if denom == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `min(rho * a, clip(rho, 1 - eps, 1 + eps) * a)`.
pub fn clipped_term(rho: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (rho * advantage).min(clipped * advantage)
}

/// True when the unclipped product attains the minimum, i.e. the term still
/// depends on `rho`. Ties count as unclipped.
pub fn unclipped_active(rho: f64, advantage: f64, clip_eps: f64) -> bool {
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    rho * advantage <= clipped * advantage
}

/// Non-negative per-token KL estimate `exp(d) - d - 1` with
/// `d = logp_ref - logp_theta`.
pub fn kl_term(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp_m1() - d
}

/// Per-token pieces of the loss needed to assemble its gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenCoefficient {
    pub ratio: f64,
    pub advantage: f64,
    pub unclipped: bool,
    /// `1 / (G * |rollout|)`.
    pub weight: f64,
    pub kl: f64,
    /// `exp(logp_ref - logp_theta)`.
    pub ref_ratio: f64,
}

impl TokenCoefficient {
    /// Derivative of the loss with respect to this token's `log p_theta`.
    pub fn dloss_dlogp(&self, kl_beta: f64) -> f64 {
        let surrogate = if self.unclipped {
            -self.weight * self.advantage * self.ratio
        } else {
            0.0
        };
        surrogate + self.weight * kl_beta * (1.0 - self.ref_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoLoss {
    pub loss: f64,
    pub advantages: Vec<f64>,
    /// Indexed `[rollout][token]`.
    pub coefficients: Vec<Vec<TokenCoefficient>>,
    pub mean_kl: f64,
    pub clipped_fraction: f64,
}

pub fn grpo_loss(batch: &GroupBatch, cfg: &GrpoConfig) -> Result<GrpoLoss> {
    cfg.validate()?;
    batch.validate()?;
    let advantages = group_advantages(&batch.rewards(), cfg.adv_eps)?;
    let g = batch.rollouts.len() as f64;
    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut tokens = 0usize;
    let mut clipped = 0usize;
    let mut coefficients = Vec::with_capacity(batch.rollouts.len());

    for (rollout, &advantage) in batch.rollouts.iter().zip(&advantages) {
        let len = rollout.tokens.len();
        let mut per_token = Vec::with_capacity(len);
        if len == 0 {
            coefficients.push(per_token);
            continue;
        }
        let weight = 1.0 / (g * len as f64);
        let mut seq_sum = 0.0;
        for n in 0..len {
            let ratio = (rollout.logp_theta[n] - rollout.logp_old[n]).exp();
            let kl = kl_term(rollout.logp_theta[n], rollout.logp_ref[n]);
            let unclipped = unclipped_active(ratio, advantage, cfg.clip_eps);
            seq_sum += clipped_term(ratio, advantage, cfg.clip_eps) - cfg.kl_beta * kl;
            kl_sum += kl;
            tokens += 1;
            if !unclipped {
                clipped += 1;
            }
            per_token.push(TokenCoefficient {
                ratio,
                advantage,
                unclipped,
                weight,
                kl,
                ref_ratio: (rollout.logp_ref[n] - rollout.logp_theta[n]).exp(),
            });
        }
        loss -= seq_sum / (g * len as f64);
        coefficients.push(per_token);
    }

    let denom = tokens.max(1) as f64;
    Ok(GrpoLoss {
        loss,
        advantages,
        coefficients,
        mean_kl: kl_sum / denom,
        clipped_fraction: clipped as f64 / denom,
    })
}

/// Linear decay of the SFT mixing weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChordSchedule {
    pub alpha_peak: f64,
    pub alpha_valley: f64,
    pub decay_steps: u64,
}

impl Default for ChordSchedule {
    fn default() -> Self {
        Self {
            alpha_peak: 0.8,
            alpha_valley: 0.3,
            decay_steps: 500,
        }
    }
}

impl ChordSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.alpha_valley)
            && (0.0..=1.0).contains(&self.alpha_peak)
            && self.alpha_valley <= self.alpha_peak
            && self.decay_steps >= 1;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "chord schedule needs 0 <= valley <= peak <= 1 and decay_steps >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn chord_alpha(step: u64, sched: &ChordSchedule) -> f64 {
    if step >= sched.decay_steps {
        return sched.alpha_valley;
    }
    let frac = step as f64 / sched.decay_steps as f64;
    sched.alpha_peak + (sched.alpha_valley - sched.alpha_peak) * frac
}

/// `(1 - alpha) * l_grpo + alpha * l_sft`.
pub fn mixed_loss(l_grpo: f64, l_sft: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * l_grpo + alpha * l_sft
}
