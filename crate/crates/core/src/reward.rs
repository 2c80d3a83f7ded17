//! Verifiable reward over a generated marker list.
//!
//! The total reward is a weighted sum of five terms:
//!
//! | term          | range    | rewards                                        |
//! |---------------|----------|------------------------------------------------|
//! | main          | [0, 1]   | final marker close to the instructed duration  |
//! | presence      | {0, 1}   | at least one marker                            |
//! | monotonicity  | [0, 1]   | strictly increasing consecutive markers        |
//! | repetition    | [-1, 0]  | penalizes duplicated marker values             |
//! | copy          | (-1, 0]  | penalizes non-final markers equal to the target|
//!
//! With unit weights the total lies in (-2, 3].

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub main: f64,
    pub presence: f64,
    pub monotonicity: f64,
    pub repetition: f64,
    pub copy: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            main: 1.0,
            presence: 1.0,
            monotonicity: 1.0,
            repetition: 1.0,
            copy: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Width of the Gaussian duration score, seconds.
    pub sigma_s: f64,
    /// Copy-penalty tolerance, seconds.
    pub tau_s: f64,
    pub weights: RewardWeights,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            sigma_s: 5.0,
            tau_s: 0.5,
            weights: RewardWeights::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s.is_finite() && self.sigma_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma_s must be positive, got {}",
                self.sigma_s
            )));
        }
        if !(self.tau_s.is_finite() && self.tau_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau_s must be positive, got {}",
                self.tau_s
            )));
        }
        let w = &self.weights;
        if ![w.main, w.presence, w.monotonicity, w.repetition, w.copy]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(Error::InvalidArgument("reward weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub main: f64,
    pub presence: f64,
    pub monotonicity: f64,
    pub repetition: f64,
    pub copy: f64,
    pub total: f64,
}

/// `exp(-delta^2 / (2 sigma^2))`.
pub fn gaussian_score(delta_s: f64, sigma_s: f64) -> Result<f64> {
    if !delta_s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "duration error must be finite, got {delta_s}"
        )));
    }
    if !(sigma_s.is_finite() && sigma_s > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma_s}")));
    }
    Ok((-(delta_s * delta_s) / (2.0 * sigma_s * sigma_s)).exp())
}

/// Gaussian score of the gap between the target and the final marker; 0 when
/// there is no marker.
pub fn main_reward(t_inst_s: f64, markers: &[f64], cfg: &RewardConfig) -> f64 {
    match markers.last() {
        // Markers and targets are validated finite upstream; a non-finite gap
        // scores like a missing marker.
        Some(&last) => gaussian_score(t_inst_s - last, cfg.sigma_s).unwrap_or(0.0),
        None => 0.0,
    }
}

pub fn presence_reward(markers: &[f64]) -> f64 {
    if markers.is_empty() {
        0.0
    } else {
        1.0
    }
}

/// Fraction of consecutive pairs that strictly increase; 1 for fewer than two
/// markers.
pub fn monotonicity_reward(markers: &[f64]) -> f64 {
    if markers.len() <= 1 {
        return 1.0;
    }
    let increasing = markers.windows(2).filter(|w| w[1] > w[0]).count();
    increasing as f64 / (markers.len() - 1) as f64
}

/// `-(1 - |unique| / M)`, 0 for an empty list.
pub fn repetition_penalty(markers: &[f64]) -> f64 {
    if markers.is_empty() {
        return 0.0;
    }
    let unique: HashSet<u64> = markers.iter().map(|&t| canonical_bits(t)).collect();
    unique.len() as f64 / markers.len() as f64 - 1.0
}

fn canonical_bits(t: f64) -> u64 {
    // -0.0 and 0.0 are the same marker value.
    if t == 0.0 {
        0.0_f64.to_bits()
    } else {
        t.to_bits()
    }
}

/// Share of non-final markers within `tau_s` of the target, negated and
/// normalized by the full marker count.
pub fn copy_penalty(markers: &[f64], t_inst_s: f64, tau_s: f64) -> f64 {
    let m = markers.len();
    if m <= 1 {
        return 0.0;
    }
    let copies = markers[..m - 1]
        .iter()
        .filter(|&&t| (t - t_inst_s).abs() < tau_s)
        .count();
    (0 - copies as i64) as f64 / m as f64
}

pub fn total_reward(t_inst_s: f64, markers: &[f64], cfg: &RewardConfig) -> Result<RewardBreakdown> {
    cfg.validate()?;
    if !(t_inst_s.is_finite() && t_inst_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target duration must be positive, got {t_inst_s}"
        )));
    }
    if let Some(bad) = markers.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "marker values must be finite and non-negative, got {bad}"
        )));
    }
    let main = main_reward(t_inst_s, markers, cfg);
    let presence = presence_reward(markers);
    let monotonicity = monotonicity_reward(markers);
    let repetition = repetition_penalty(markers);
    let copy = copy_penalty(markers, t_inst_s, cfg.tau_s);
    let w = &cfg.weights;
    let total = w.main * main
        + w.presence * presence
        + w.monotonicity * monotonicity
        + w.repetition * repetition
        + w.copy * copy;
    Ok(RewardBreakdown {
        main,
        presence,
        monotonicity,
        repetition,
        copy,
        total,
    })
}
