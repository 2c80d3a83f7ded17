//! Deterministic speech-duration oracle.
//!
//! Every word token has a fixed base duration drawn once per vocabulary.
//! An utterance's realized duration is the sum of its word durations scaled
//! by a global rate factor and a per-utterance jitter factor. Markers and
//! control tokens take no time.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PromptContext;
use crate::seed;
use crate::vocab::{Bucket, TokenKind, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockConfig {
    pub word_min_s: f64,
    pub word_max_s: f64,
    /// Global duration multiplier.
    pub rate: f64,
    /// Half-width of the per-utterance multiplicative jitter.
    pub jitter: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            word_min_s: 0.2,
            word_max_s: 0.8,
            rate: 1.0,
            jitter: 0.05,
        }
    }
}

impl ClockConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.word_min_s > 0.0
            && self.word_max_s >= self.word_min_s
            && self.word_max_s.is_finite()
            && self.rate > 0.0
            && self.rate.is_finite()
            && (0.0..1.0).contains(&self.jitter);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid clock settings {self:?}")))
        }
    }
}

/// Base duration of every token id, seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationTable {
    seconds: Vec<f64>,
}

impl DurationTable {
    pub fn build(vocab: &Vocabulary, cfg: &ClockConfig, table_seed: u64) -> Self {
        let mut rng = seed::rng_for(table_seed, &[seed::tag::DURATIONS]);
        let seconds = (0..vocab.len() as u32)
            .map(|id| {
                if vocab.is_word(id) {
                    rng.gen_range(cfg.word_min_s..=cfg.word_max_s)
                } else {
                    0.0
                }
            })
            .collect();
        Self { seconds }
    }

    /// Explicit durations, indexed by token id.
    pub fn from_seconds(seconds: Vec<f64>) -> Self {
        Self { seconds }
    }

    pub fn get(&self, token: u32) -> f64 {
        self.seconds.get(token as usize).copied().unwrap_or(0.0)
    }

    pub fn to_map(&self, vocab: &Vocabulary) -> BTreeMap<String, f64> {
        (0..self.seconds.len() as u32)
            .filter_map(|id| Some((vocab.token_str(id)?, self.seconds[id as usize])))
            .collect()
    }

    pub fn export(&self, vocab: &Vocabulary, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_map(vocab))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateModel {
    pub rate: f64,
    pub jitter: f64,
}

impl RateModel {
    pub fn multiplier(&self, utterance_seed: u64) -> f64 {
        if self.jitter == 0.0 {
            return self.rate;
        }
        let mut rng = seed::rng_for(utterance_seed, &[seed::tag::JITTER]);
        self.rate * rng.gen_range(1.0 - self.jitter..=1.0 + self.jitter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizedSpeech {
    /// Word tokens in order; control tokens are dropped.
    pub tokens: Vec<u32>,
    /// Cumulative end time of each word, seconds.
    pub end_times: Vec<f64>,
    pub duration_s: f64,
}

#[derive(Debug, Clone)]
pub struct SpeechClock {
    pub vocab: Vocabulary,
    pub table: DurationTable,
    pub rate: RateModel,
}

impl SpeechClock {
    pub fn new(vocab: Vocabulary, cfg: &ClockConfig, table_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let table = DurationTable::build(&vocab, cfg, table_seed);
        Ok(Self {
            vocab,
            table,
            rate: RateModel {
                rate: cfg.rate,
                jitter: cfg.jitter,
            },
        })
    }

    /// Cumulative timing of a marker-free token sequence. Marker tokens are an
    /// error; end-of-sequence and other control tokens are skipped.
    pub fn realize(&self, tokens: &[u32], utterance_seed: u64) -> Result<RealizedSpeech> {
        let scale = self.rate.multiplier(utterance_seed);
        let mut elapsed = 0.0;
        let mut words = Vec::with_capacity(tokens.len());
        let mut end_times = Vec::with_capacity(tokens.len());
        for &t in tokens {
            match self.vocab.kind(t) {
                Some(TokenKind::Word { .. }) => {
                    elapsed += self.table.get(t) * scale;
                    words.push(t);
                    end_times.push(elapsed);
                }
                Some(TokenKind::Marker { .. }) => {
                    return Err(Error::InvalidArgument(format!(
                        "marker token {} must be stripped before realization",
                        self.vocab.token_str(t).unwrap_or_default()
                    )))
                }
                Some(_) => {}
                None => return Err(Error::UnknownToken(format!("#{t}"))),
            }
        }
        Ok(RealizedSpeech {
            tokens: words,
            end_times,
            duration_s: elapsed,
        })
    }
}

/// Duration prompt for a target: bucket `round(t_inst)` clamped to the
/// vocabulary's bucket range, with the exact target kept alongside.
pub fn make_duration_prompt(vocab: &Vocabulary, t_inst_s: f64) -> Result<PromptContext> {
    if !(t_inst_s.is_finite() && t_inst_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target duration must be positive, got {t_inst_s}"
        )));
    }
    let secs = (t_inst_s.round().max(1.0) as u32).min(vocab.config().bucket_max_s);
    Ok(PromptContext {
        bucket: Bucket::Seconds(secs),
        t_inst_s: Some(t_inst_s),
        prefix: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::VocabConfig;
    use approx::assert_abs_diff_eq;

    fn clock(jitter: f64) -> SpeechClock {
        let vocab = Vocabulary::new(VocabConfig::default()).unwrap();
        SpeechClock::new(
            vocab,
            &ClockConfig {
                jitter,
                ..ClockConfig::default()
            },
            17,
        )
        .unwrap()
    }

    #[test]
    fn word_durations_in_range_and_controls_free() {
        let c = clock(0.0);
        for id in 0..c.vocab.len() as u32 {
            let d = c.table.get(id);
            if c.vocab.is_word(id) {
                assert!((0.2..=0.8).contains(&d), "{d}");
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn realize_sums_durations() {
        let mut c = clock(0.0);
        let mut secs = vec![0.0; c.vocab.len()];
        secs[0] = 0.5;
        secs[1] = 0.5;
        c.table = DurationTable::from_seconds(secs);
        let r = c.realize(&[0, 1, c.vocab.eos()], 3).unwrap();
        assert_eq!(r.end_times, vec![0.5, 1.0]);
        assert_eq!(r.duration_s, 1.0);
        assert_eq!(c.realize(&[], 3).unwrap().duration_s, 0.0);
    }

    #[test]
    fn markers_rejected() {
        let c = clock(0.0);
        assert!(c.realize(&[0, c.vocab.marker_token(1).unwrap()], 0).is_err());
    }

    #[test]
    fn jitter_is_deterministic_and_bounded() {
        let c = clock(0.05);
        let free = clock(0.0);
        let tokens: Vec<u32> = (0..20).collect();
        let base = free.realize(&tokens, 0).unwrap().duration_s;
        for seed in 0..50 {
            let a = c.realize(&tokens, seed).unwrap().duration_s;
            assert_eq!(a, c.realize(&tokens, seed).unwrap().duration_s);
            assert!((a - base).abs() <= 0.05 * base + 1e-12);
        }
    }

    #[test]
    fn duration_prompts() {
        let v = Vocabulary::new(VocabConfig::default()).unwrap();
        assert_eq!(make_duration_prompt(&v, 25.0).unwrap().bucket, Bucket::Seconds(25));
        assert_eq!(make_duration_prompt(&v, 0.4).unwrap().bucket, Bucket::Seconds(1));
        let p = make_duration_prompt(&v, 14.6).unwrap();
        assert_eq!(p.bucket, Bucket::Seconds(15));
        assert_abs_diff_eq!(p.t_inst_s.unwrap(), 14.6);
        assert!(make_duration_prompt(&v, -2.0).is_err());
    }
}
