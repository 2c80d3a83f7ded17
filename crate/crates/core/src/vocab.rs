//! Token inventory of the toy policy.
//!
//! Ids are dense and laid out so that every token the policy can emit comes
//! first: words, then markers, then end-of-sequence. Beginning-of-sequence
//! and the duration-bucket prompt tokens follow and are never emitted.

use serde::{Deserialize, Serialize};

use crate::codec::{PunctuationSet, TimeMarker};
use crate::error::{Error, Result};

const PUNCT_CYCLE: [char; 5] = [',', '.', '!', '?', ';'];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub words: usize,
    /// Every `punct_every`-th word closes a clause.
    pub punct_every: usize,
    pub marker_quantum_s: f64,
    pub t_max_s: f64,
    /// Largest duration-bucket prompt, seconds.
    pub bucket_max_s: u32,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            words: 30,
            punct_every: 3,
            marker_quantum_s: 0.5,
            t_max_s: 20.0,
            bucket_max_s: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Word {
        punct: bool,
    },
    /// Marker at `index * quantum` seconds, `index >= 1`.
    Marker {
        index: u32,
    },
    Eos,
    Bos,
    Bucket(Bucket),
}

/// Duration-bucket prompt: free generation or a target rounded to seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Bucket {
    Free,
    Seconds(u32),
}

impl Bucket {
    pub fn label(self) -> String {
        match self {
            Bucket::Free => "B(free)".to_string(),
            Bucket::Seconds(s) => format!("B({s}s)"),
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        let inner = label.strip_prefix("B(")?.strip_suffix(')')?;
        if inner == "free" {
            return Some(Bucket::Free);
        }
        inner
            .strip_suffix('s')?
            .parse()
            .ok()
            .filter(|&s| s >= 1)
            .map(Bucket::Seconds)
    }
}

impl From<Bucket> for String {
    fn from(b: Bucket) -> Self {
        b.label()
    }
}

impl TryFrom<String> for Bucket {
    type Error = String;

    fn try_from(label: String) -> Result<Self, String> {
        Bucket::parse(&label).ok_or_else(|| format!("bad bucket label {label:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    config: VocabConfig,
    words: Vec<String>,
    punct: Vec<bool>,
    n_markers: u32,
}

impl Vocabulary {
    pub fn new(config: VocabConfig) -> Result<Self> {
        if config.words == 0 || config.punct_every == 0 {
            return Err(Error::InvalidArgument(
                "vocabulary needs at least one word and punct_every >= 1".into(),
            ));
        }
        if !(config.marker_quantum_s > 0.0 && config.t_max_s >= config.marker_quantum_s) {
            return Err(Error::InvalidArgument(format!(
                "marker quantum {} must be positive and no larger than t_max {}",
                config.marker_quantum_s, config.t_max_s
            )));
        }
        // Marker token text is rendered at 0.1 s precision.
        let tenths = config.marker_quantum_s * 10.0;
        if (tenths - tenths.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "marker quantum {} must be a multiple of 0.1 s",
                config.marker_quantum_s
            )));
        }
        if config.bucket_max_s == 0 {
            return Err(Error::InvalidArgument("bucket_max_s must be at least 1".into()));
        }
        let n_markers = (config.t_max_s / config.marker_quantum_s + 1e-9).floor() as u32;
        let mut words = Vec::with_capacity(config.words);
        let mut punct = Vec::with_capacity(config.words);
        for i in 0..config.words {
            let is_punct = i % config.punct_every == config.punct_every - 1;
            let mut w = format!("w{i:02}");
            if is_punct {
                w.push(PUNCT_CYCLE[(i / config.punct_every) % PUNCT_CYCLE.len()]);
            }
            words.push(w);
            punct.push(is_punct);
        }
        Ok(Self {
            config,
            words,
            punct,
            n_markers,
        })
    }

    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_markers(&self) -> u32 {
        self.n_markers
    }

    pub fn quantum(&self) -> f64 {
        self.config.marker_quantum_s
    }

    /// Size of the emittable range: words, markers and end-of-sequence.
    pub fn n_out(&self) -> usize {
        self.words.len() + self.n_markers as usize + 1
    }

    pub fn len(&self) -> usize {
        self.n_out() + 2 + self.config.bucket_max_s as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos(&self) -> u32 {
        (self.words.len() + self.n_markers as usize) as u32
    }

    pub fn bos(&self) -> u32 {
        self.eos() + 1
    }

    pub fn marker_token(&self, index: u32) -> Option<u32> {
        (1..=self.n_markers)
            .contains(&index)
            .then(|| (self.words.len() as u32) + index - 1)
    }

    pub fn bucket_token(&self, bucket: Bucket) -> Option<u32> {
        let free = self.bos() + 1;
        match bucket {
            Bucket::Free => Some(free),
            Bucket::Seconds(s) if (1..=self.config.bucket_max_s).contains(&s) => Some(free + s),
            Bucket::Seconds(_) => None,
        }
    }

    pub fn kind(&self, id: u32) -> Option<TokenKind> {
        let id_us = id as usize;
        let k = self.words.len();
        let m = self.n_markers as usize;
        if id_us < k {
            Some(TokenKind::Word {
                punct: self.punct[id_us],
            })
        } else if id_us < k + m {
            Some(TokenKind::Marker {
                index: (id_us - k + 1) as u32,
            })
        } else if id == self.eos() {
            Some(TokenKind::Eos)
        } else if id == self.bos() {
            Some(TokenKind::Bos)
        } else if id_us < self.len() {
            let offset = id - self.bos() - 1;
            Some(TokenKind::Bucket(if offset == 0 {
                Bucket::Free
            } else {
                Bucket::Seconds(offset)
            }))
        } else {
            None
        }
    }

    pub fn is_word(&self, id: u32) -> bool {
        (id as usize) < self.words.len()
    }

    pub fn is_punct_word(&self, id: u32) -> bool {
        self.punct.get(id as usize).copied().unwrap_or(false)
    }

    pub fn marker_index(&self, id: u32) -> Option<u32> {
        match self.kind(id) {
            Some(TokenKind::Marker { index }) => Some(index),
            _ => None,
        }
    }

    pub fn marker_seconds(&self, index: u32) -> f64 {
        f64::from(index) * self.config.marker_quantum_s
    }

    /// Nearest marker index, clamped to the representable range.
    pub fn snap_index(&self, seconds: f64) -> u32 {
        let k = (seconds / self.config.marker_quantum_s).round();
        (k.max(1.0) as u32).min(self.n_markers)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn token_str(&self, id: u32) -> Option<String> {
        Some(match self.kind(id)? {
            TokenKind::Word { .. } => self.words[id as usize].clone(),
            TokenKind::Marker { index } => {
                let tenths = (self.marker_seconds(index) * 10.0).round() as u32;
                TimeMarker::from_tenths(tenths).to_string()
            }
            TokenKind::Eos => "</s>".to_string(),
            TokenKind::Bos => "<s>".to_string(),
            TokenKind::Bucket(b) => b.label(),
        })
    }

    pub fn token_id(&self, text: &str) -> Result<u32> {
        if let Some(i) = self.words.iter().position(|w| w == text) {
            return Ok(i as u32);
        }
        if let Some(m) = crate::codec::parse_marker(text) {
            let k = f64::from(m.tenths()) / (self.config.marker_quantum_s * 10.0);
            if (k - k.round()).abs() < 1e-9 {
                if let Some(id) = self.marker_token(k.round() as u32) {
                    return Ok(id);
                }
            }
            return Err(Error::UnknownToken(text.to_string()));
        }
        match text {
            "</s>" => Ok(self.eos()),
            "<s>" => Ok(self.bos()),
            _ => Bucket::parse(text)
                .and_then(|b| self.bucket_token(b))
                .ok_or_else(|| Error::UnknownToken(text.to_string())),
        }
    }

    pub fn listing(&self) -> Vec<String> {
        (0..self.len() as u32)
            .map(|id| self.token_str(id).expect("dense ids"))
            .collect()
    }

    /// Punctuation set matching the word suffixes used here.
    pub fn punctuation(&self) -> PunctuationSet {
        PunctuationSet::new(PUNCT_CYCLE)
    }
}
