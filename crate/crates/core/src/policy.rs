//! Tabular autoregressive policy over words, markers and end-of-sequence.
//!
//! The next-token logits are a sum of three tables, each indexed by a
//! different view of the decoding state:
//!
//! - `base[prev]`: bigram on the previous token. Markers share one column
//!   (this table decides whether a marker comes, not which) and two rows,
//!   split by whether the marker closed a clause;
//! - `inc`: scores for the next marker as an offset from the last one, so
//!   marker values are learned as increments of elapsed time rather than as
//!   absolute values. One row per word spoken since the last marker plus one
//!   row for their count are summed, which makes the expected increment
//!   additive in per-word durations;
//! - `ctrl[last marker - target, previous token kind, words since marker]`:
//!   active only under a duration prompt, so stopping behaviour is learned
//!   relative to the target and transfers to targets never seen in training.
//!
//! Because the logit of token `u` is linear in the table entries, the
//! gradient of `log p(v | ctx)` with respect to any entry feeding logit `u`
//! is `(1[u = v] - p(u | ctx)) / temperature`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{grpo_loss, GroupBatch, GrpoConfig, GrpoLoss};
use crate::seed;
use crate::vocab::{Bucket, TokenKind, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Cap on the words-since-marker count feature of the increment table.
    pub inc_span: u32,
    /// Largest marker increment, in quanta, scored by the increment table.
    pub inc_max_offset: u32,
    /// Clip radius, in quanta, of the marker-minus-target feature.
    pub ctrl_radius: u32,
    /// Cap on the words-since-marker feature of the control table.
    pub ctrl_span: u32,
    pub temperature: f64,
    /// Expected words per free generation of the initial policy.
    pub init_mean_words: f64,
    /// Std of the random word logits of the initial policy.
    pub init_word_scale: f64,
    /// Initial logit of marker tokens (the untrained policy rarely emits them).
    pub init_marker_logit: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            inc_span: 12,
            inc_max_offset: 40,
            ctrl_radius: 6,
            ctrl_span: 3,
            temperature: 1.0,
            init_mean_words: 6.0,
            init_word_scale: 1.0,
            init_marker_logit: -8.0,
        }
    }
}

const PREV_KINDS: usize = 4;

/// Kind of the previous token as seen by the control table.
fn prev_kind(vocab: &Vocabulary, prev: u32) -> usize {
    match vocab.kind(prev) {
        Some(TokenKind::Word { punct: true }) => 1,
        Some(TokenKind::Word { punct: false }) => 2,
        Some(TokenKind::Marker { .. }) => 3,
        _ => 0,
    }
}

const PREV_KIND_NAMES: [&str; PREV_KINDS] = ["start", "punct", "word", "marker"];

/// Prompt the policy conditions on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub bucket: Bucket,
    /// Exact instructed duration kept for reward computation.
    pub t_inst_s: Option<f64>,
    /// Opaque query tokens consumed before generation.
    pub prefix: Vec<u32>,
}

impl PromptContext {
    pub fn free() -> Self {
        Self {
            bucket: Bucket::Free,
            t_inst_s: None,
            prefix: Vec::new(),
        }
    }
}

/// Words since the last marker that the increment table can see.
pub const SEGMENT_CAP: usize = 24;

/// State after consuming a prompt and a prefix of the response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeState {
    pub bucket: Bucket,
    pub prev: u32,
    /// Index of the last emitted marker, 0 before the first.
    pub last_marker: u32,
    pub words_since_marker: u32,
    /// The first `SEGMENT_CAP` words since the last marker.
    pub segment: [u32; SEGMENT_CAP],
    /// Whether the last marker followed a clause-closing word.
    pub marker_closed_clause: bool,
}

impl DecodeState {
    pub fn start(vocab: &Vocabulary, prompt: &PromptContext) -> Self {
        let mut state = Self {
            bucket: prompt.bucket,
            prev: vocab.bos(),
            last_marker: 0,
            words_since_marker: 0,
            segment: [0; SEGMENT_CAP],
            marker_closed_clause: false,
        };
        for &t in &prompt.prefix {
            state.advance(vocab, t);
        }
        state
    }

    pub fn segment(&self) -> &[u32] {
        &self.segment[..(self.words_since_marker as usize).min(SEGMENT_CAP)]
    }

    pub fn advance(&mut self, vocab: &Vocabulary, token: u32) {
        match vocab.kind(token) {
            Some(TokenKind::Word { .. }) => {
                if let Some(slot) = self.segment.get_mut(self.words_since_marker as usize) {
                    *slot = token;
                }
                self.words_since_marker += 1;
            }
            Some(TokenKind::Marker { index }) => {
                self.last_marker = index;
                self.marker_closed_clause = vocab.is_punct_word(self.prev);
                self.words_since_marker = 0;
            }
            _ => {}
        }
        self.prev = token;
    }
}

/// Row indices of the three tables for one decoding state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ActiveRows {
    base: usize,
    inc: Option<usize>,
    ctrl: Option<usize>,
}

/// Parameter tables; also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub base: Vec<f64>,
    pub inc: Vec<f64>,
    pub ctrl: Vec<f64>,
}

impl Params {
    fn zeros(shape: &Shape) -> Self {
        Self {
            base: vec![0.0; shape.base_rows * shape.n_cols],
            inc: vec![0.0; shape.inc_rows * shape.inc_cols],
            ctrl: vec![0.0; shape.ctrl_rows * shape.n_cols],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            base: vec![0.0; self.base.len()],
            inc: vec![0.0; self.inc.len()],
            ctrl: vec![0.0; self.ctrl.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.inc.len() + self.ctrl.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.base.iter().chain(&self.inc).chain(&self.ctrl)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.base
            .iter_mut()
            .chain(self.inc.iter_mut())
            .chain(self.ctrl.iter_mut())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.iter_mut() {
            *a *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Shape {
    n_words: usize,
    n_out: usize,
    /// Base and control columns: one per word, one shared by all markers,
    /// one for end-of-sequence.
    n_cols: usize,
    base_rows: usize,
    inc_span: usize,
    inc_rows: usize,
    inc_cols: usize,
    ctrl_radius: i64,
    ctrl_span: usize,
    ctrl_rows: usize,
}

impl Shape {
    fn new(vocab: &Vocabulary, cfg: &PolicyConfig) -> Self {
        let n_words = vocab.n_words();
        let ctrl_radius = i64::from(cfg.ctrl_radius);
        Self {
            n_words,
            n_out: vocab.n_out(),
            n_cols: n_words + 2,
            // <s>, one per word, marker after a clause-closing word, other marker
            base_rows: n_words + 3,
            inc_span: cfg.inc_span.max(1) as usize,
            inc_rows: n_words + cfg.inc_span.max(1) as usize,
            // offsets 0..=max, then one column for every other marker
            inc_cols: cfg.inc_max_offset as usize + 2,
            ctrl_radius,
            ctrl_span: cfg.ctrl_span as usize,
            ctrl_rows: (2 * ctrl_radius as usize + 1) * PREV_KINDS * (cfg.ctrl_span as usize + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vocabulary,
    cfg: PolicyConfig,
    shape: Shape,
    pub params: Params,
}

/// Output of [`ToyPolicy::sample_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub logps: Vec<f64>,
    /// True when `max_len` was reached before end-of-sequence.
    pub truncated: bool,
}

impl ToyPolicy {
    /// All-zero tables: uniform next-token distribution everywhere.
    pub fn uniform(vocab: Vocabulary, cfg: PolicyConfig) -> Self {
        let shape = Shape::new(&vocab, &cfg);
        Self {
            params: Params::zeros(&shape),
            vocab,
            cfg,
            shape,
        }
    }

    /// The untrained policy: random word preferences, rare markers, and an
    /// end-of-sequence logit set per row so free generations have a
    /// geometric length with mean `init_mean_words`.
    pub fn init(vocab: Vocabulary, cfg: PolicyConfig, master_seed: u64) -> Self {
        let mut policy = Self::uniform(vocab, cfg);
        let mut rng = seed::rng_for(master_seed, &[seed::tag::POLICY_INIT]);
        let n_cols = policy.shape.n_cols;
        let n_words = policy.shape.n_words;
        let p_stop = (1.0 / cfg.init_mean_words.max(1.0)).clamp(1e-6, 0.999);
        for row in 0..policy.shape.base_rows {
            let slice = &mut policy.params.base[row * n_cols..(row + 1) * n_cols];
            let mut word_mass = 0.0;
            for logit in &mut slice[..n_words] {
                // Box-Muller keeps the draw independent of rand_distr.
                let (a, b): (f64, f64) = (rng.gen::<f64>().max(1e-300), rng.gen());
                *logit = cfg.init_word_scale * (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos();
                word_mass += logit.exp();
            }
            slice[n_words] = cfg.init_marker_logit;
            // Row 0 is the start-of-sequence row: never stop before a word.
            slice[n_words + 1] = if row == 0 {
                cfg.init_marker_logit
            } else {
                (word_mass * p_stop / (1.0 - p_stop)).ln()
            };
        }
        policy
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn rows(&self, state: &DecodeState) -> Option<ActiveRows> {
        let vocab = &self.vocab;
        let base = match vocab.kind(state.prev)? {
            TokenKind::Bos => 0,
            TokenKind::Word { .. } => 1 + state.prev as usize,
            TokenKind::Marker { .. } => self.shape.n_words + if state.marker_closed_clause { 1 } else { 2 },
            TokenKind::Eos | TokenKind::Bucket(_) => return None,
        };
        let inc = vocab.is_word(state.prev).then(|| {
            let since = (state.words_since_marker.max(1) as usize).min(self.shape.inc_span);
            self.shape.n_words + since - 1
        });
        let ctrl = match state.bucket {
            Bucket::Free => None,
            Bucket::Seconds(s) => {
                let target = (f64::from(s) / vocab.quantum()).round() as i64;
                let r = self.shape.ctrl_radius;
                let rel = (i64::from(state.last_marker) - target).clamp(-r, r);
                let since = (state.words_since_marker as usize).min(self.shape.ctrl_span);
                Some(
                    ((rel + r) as usize * PREV_KINDS + prev_kind(vocab, state.prev)) * (self.shape.ctrl_span + 1)
                        + since,
                )
            }
        };
        Some(ActiveRows { base, inc, ctrl })
    }

    /// Base/control column of output token `u`.
    fn col(&self, u: usize) -> usize {
        let n_words = self.shape.n_words;
        if u < n_words {
            u
        } else if u + 1 < self.shape.n_out {
            n_words
        } else {
            n_words + 1
        }
    }

    /// Increment column of output token `u`, `None` for non-markers.
    fn inc_col(&self, state: &DecodeState, u: usize) -> Option<usize> {
        let index = self.vocab.marker_index(u as u32)?;
        let other = self.shape.inc_cols - 1;
        Some(match index.checked_sub(state.last_marker) {
            Some(off) if (off as usize) < other => off as usize,
            _ => other,
        })
    }

    /// Increment rows active in `state`: the count row, then one row per
    /// segment word (repeats included).
    fn inc_rows<'a>(&self, state: &'a DecodeState, count_row: usize) -> impl Iterator<Item = usize> + 'a {
        std::iter::once(count_row).chain(state.segment().iter().map(|&w| w as usize))
    }

    fn inc_scores(&self, state: &DecodeState, count_row: usize) -> Vec<f64> {
        let cols = self.shape.inc_cols;
        let mut sum = vec![0.0; cols];
        for r in self.inc_rows(state, count_row) {
            for (s, x) in sum.iter_mut().zip(&self.params.inc[r * cols..(r + 1) * cols]) {
                *s += x;
            }
        }
        sum
    }

    fn logits_into(&self, state: &DecodeState, rows: &ActiveRows, out: &mut [f64]) {
        let n_cols = self.shape.n_cols;
        let base = &self.params.base[rows.base * n_cols..(rows.base + 1) * n_cols];
        let ctrl = rows.ctrl.map(|c| &self.params.ctrl[c * n_cols..(c + 1) * n_cols]);
        let inc = rows.inc.map(|i| self.inc_scores(state, i));
        for (u, o) in out.iter_mut().enumerate() {
            let col = self.col(u);
            *o = base[col] + ctrl.map_or(0.0, |c| c[col]);
            if let (Some(inc), Some(k)) = (&inc, self.inc_col(state, u)) {
                *o += inc[k];
            }
        }
        let t = self.cfg.temperature;
        if t != 1.0 {
            for o in out.iter_mut() {
                *o /= t;
            }
        }
    }

    /// Softmax over the emittable tokens. States whose previous token cannot
    /// be followed (end-of-sequence, a prompt token, an unknown id) fall back
    /// to the uniform distribution.
    pub fn next_token_distribution(&self, state: &DecodeState) -> Vec<f64> {
        let mut probs = vec![0.0; self.shape.n_out];
        self.distribution_into(state, &mut probs);
        probs
    }

    fn distribution_into(&self, state: &DecodeState, probs: &mut [f64]) -> Option<ActiveRows> {
        let Some(rows) = self.rows(state) else {
            probs.fill(1.0 / self.shape.n_out as f64);
            return None;
        };
        self.logits_into(state, &rows, probs);
        softmax_in_place(probs);
        Some(rows)
    }

    /// Ancestral sampling until end-of-sequence or `max_len` tokens.
    pub fn sample_sequence(&self, prompt: &PromptContext, max_len: usize, rng_seed: u64) -> Sample {
        let mut rng = seed::rng_for(rng_seed, &[]);
        let mut state = DecodeState::start(&self.vocab, prompt);
        let mut probs = vec![0.0; self.shape.n_out];
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        let eos = self.vocab.eos();
        for _ in 0..max_len.max(1) {
            self.distribution_into(&state, &mut probs);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut choice = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    choice = i;
                    break;
                }
            }
            // Guard against rounding leaving `acc` just below 1.
            while probs[choice] == 0.0 && choice > 0 {
                choice -= 1;
            }
            tokens.push(choice as u32);
            logps.push(probs[choice].ln());
            if choice as u32 == eos {
                return Sample {
                    tokens,
                    logps,
                    truncated: false,
                };
            }
            state.advance(&self.vocab, choice as u32);
        }
        Sample {
            tokens,
            logps,
            truncated: true,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.shape.n_out) {
            Some(&bad) => Err(Error::UnknownToken(
                self.vocab.token_str(bad).unwrap_or_else(|| format!("#{bad}")),
            )),
            None => Ok(()),
        }
    }

    /// Total and per-token log-probability of `tokens` after `prompt`.
    pub fn sequence_logprob(&self, prompt: &PromptContext, tokens: &[u32]) -> Result<(f64, Vec<f64>)> {
        self.check_tokens(tokens)?;
        let mut state = DecodeState::start(&self.vocab, prompt);
        let mut probs = vec![0.0; self.shape.n_out];
        let mut per_token = Vec::with_capacity(tokens.len());
        for &t in tokens {
            self.distribution_into(&state, &mut probs);
            per_token.push(probs[t as usize].ln());
            state.advance(&self.vocab, t);
        }
        Ok((per_token.iter().sum(), per_token))
    }

    /// Adds `weight * d log p(tokens[n] | ...) / d params` for every position
    /// `n`, with a per-position weight.
    fn accumulate_logp_grad(&self, prompt: &PromptContext, tokens: &[u32], weights: &[f64], grad: &mut Params) {
        let n_out = self.shape.n_out;
        let inv_t = 1.0 / self.cfg.temperature;
        let mut state = DecodeState::start(&self.vocab, prompt);
        let mut probs = vec![0.0; n_out];
        for (&t, &w) in tokens.iter().zip(weights) {
            let rows = self.distribution_into(&state, &mut probs);
            if let (Some(rows), true) = (rows, w != 0.0) {
                let scale = w * inv_t;
                // g[u] = scale * (1[u = t] - p[u])
                let g = |u: usize| scale * (f64::from(u32::from(u == t as usize)) - probs[u]);
                let n_cols = self.shape.n_cols;
                let inc_cols = self.shape.inc_cols;
                let mut inc_grad = vec![0.0; inc_cols];
                for u in 0..n_out {
                    let gu = g(u);
                    let col = self.col(u);
                    grad.base[rows.base * n_cols + col] += gu;
                    if let Some(c) = rows.ctrl {
                        grad.ctrl[c * n_cols + col] += gu;
                    }
                    if let Some(k) = self.inc_col(&state, u) {
                        inc_grad[k] += gu;
                    }
                }
                if let Some(i) = rows.inc {
                    for r in self.inc_rows(&state, i) {
                        for (d, x) in grad.inc[r * inc_cols..(r + 1) * inc_cols].iter_mut().zip(&inc_grad) {
                            *d += x;
                        }
                    }
                }
            }
            state.advance(&self.vocab, t);
        }
    }

    pub fn zero_grad(&self) -> Params {
        Params::zeros(&self.shape)
    }

    /// Mean per-token negative log-likelihood over a minibatch and its
    /// gradient.
    pub fn sft_loss_and_grad(&self, batch: &[(PromptContext, Vec<u32>)]) -> Result<(f64, Params)> {
        let count: usize = batch.iter().map(|(_, t)| t.len()).sum();
        let mut grad = self.zero_grad();
        if count == 0 {
            return Ok((0.0, grad));
        }
        let mut nll = 0.0;
        let w = -1.0 / count as f64;
        let mut weights = Vec::new();
        for (prompt, tokens) in batch {
            let (lp, _) = self.sequence_logprob(prompt, tokens)?;
            nll -= lp;
            weights.clear();
            weights.resize(tokens.len(), w);
            self.accumulate_logp_grad(prompt, tokens, &weights, &mut grad);
        }
        Ok((nll / count as f64, grad))
    }

    pub fn sft_loss(&self, batch: &[(PromptContext, Vec<u32>)]) -> Result<f64> {
        let count: usize = batch.iter().map(|(_, t)| t.len()).sum();
        if count == 0 {
            return Ok(0.0);
        }
        let mut nll = 0.0;
        for (prompt, tokens) in batch {
            nll -= self.sequence_logprob(prompt, tokens)?.0;
        }
        Ok(nll / count as f64)
    }

    /// Replaces each rollout's `logp_theta` with this policy's values.
    pub fn refresh_logprobs(&self, prompt: &PromptContext, batch: &mut GroupBatch) -> Result<()> {
        for r in &mut batch.rollouts {
            r.logp_theta = self.sequence_logprob(prompt, &r.tokens)?.1;
        }
        Ok(())
    }

    /// GRPO loss at the current parameters and its gradient. Old and
    /// reference log-probabilities are taken from the batch as frozen
    /// constants.
    pub fn grpo_grad(
        &self,
        prompt: &PromptContext,
        batch: &GroupBatch,
        cfg: &GrpoConfig,
    ) -> Result<(GrpoLoss, Params)> {
        let mut current = batch.clone();
        self.refresh_logprobs(prompt, &mut current)?;
        let loss = grpo_loss(&current, cfg)?;
        let mut grad = self.zero_grad();
        let mut weights = Vec::new();
        for (rollout, coeffs) in current.rollouts.iter().zip(&loss.coefficients) {
            weights.clear();
            weights.extend(coeffs.iter().map(|c| c.dloss_dlogp(cfg.kl_beta)));
            self.accumulate_logp_grad(prompt, &rollout.tokens, &weights, &mut grad);
        }
        Ok((loss, grad))
    }

    /// Plain gradient-descent step.
    pub fn apply_update(&mut self, grad: &Params, learning_rate: f64) {
        self.params.add_scaled(grad, -learning_rate);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint(config_hash))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: Vocabulary, cfg: PolicyConfig) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(ckpt, vocab, cfg)
    }

    fn table_names(&self) -> (Vec<String>, Vec<String>, Vec<String>) {
        let v = &self.vocab;
        let mut base = vec!["prev=<s>".to_string()];
        base.extend((0..self.shape.n_words as u32).map(|w| format!("prev={}", v.word(w).unwrap_or("?"))));
        base.push("prev=<marker>,after=punct".to_string());
        base.push("prev=<marker>,after=word".to_string());
        let mut inc: Vec<String> = (0..self.shape.n_words as u32)
            .map(|w| format!("word={}", v.word(w).unwrap_or("?")))
            .collect();
        inc.extend((1..=self.shape.inc_span).map(|s| format!("since={s}")));
        let r = self.shape.ctrl_radius;
        let mut ctrl = Vec::with_capacity(self.shape.ctrl_rows);
        for rel in -r..=r {
            for kind in PREV_KIND_NAMES {
                for since in 0..=self.shape.ctrl_span {
                    ctrl.push(format!("rel={rel},after={kind},since={since}"));
                }
            }
        }
        (base, inc, ctrl)
    }

    fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let (base_ctx, inc_ctx, ctrl_ctx) = self.table_names();
        let listing = self.vocab.listing();
        let mut out_cols: Vec<String> = listing[..self.shape.n_words].to_vec();
        out_cols.extend(["<marker>".to_string(), listing[self.shape.n_out - 1].clone()]);
        let mut inc_cols: Vec<String> = (0..self.shape.inc_cols - 1).map(|o| format!("+{o}")).collect();
        inc_cols.push("other".into());
        let rows = |data: &[f64], width: usize| data.chunks(width).map(<[f64]>::to_vec).collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash.to_string(),
            vocabulary: listing,
            policy: self.cfg,
            tables: vec![
                Table {
                    name: "base".into(),
                    contexts: base_ctx,
                    columns: out_cols.clone(),
                    rows: rows(&self.params.base, self.shape.n_cols),
                },
                Table {
                    name: "inc".into(),
                    contexts: inc_ctx,
                    columns: inc_cols,
                    rows: rows(&self.params.inc, self.shape.inc_cols),
                },
                Table {
                    name: "ctrl".into(),
                    contexts: ctrl_ctx,
                    columns: out_cols,
                    rows: rows(&self.params.ctrl, self.shape.n_cols),
                },
            ],
        }
    }

    fn from_checkpoint(ckpt: Checkpoint, vocab: Vocabulary, cfg: PolicyConfig) -> Result<(Self, String)> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint format {:?}",
                ckpt.format
            )));
        }
        if ckpt.vocabulary != vocab.listing() {
            return Err(Error::InvalidArgument(
                "checkpoint vocabulary does not match the configuration".into(),
            ));
        }
        if ckpt.policy != cfg {
            return Err(Error::InvalidArgument(
                "checkpoint policy settings do not match the configuration".into(),
            ));
        }
        let mut policy = Self::uniform(vocab, cfg);
        let expected = policy.table_names();
        for table in ckpt.tables {
            let (dest, contexts, width) = match table.name.as_str() {
                "base" => (&mut policy.params.base, &expected.0, policy.shape.n_cols),
                "inc" => (&mut policy.params.inc, &expected.1, policy.shape.inc_cols),
                "ctrl" => (&mut policy.params.ctrl, &expected.2, policy.shape.n_cols),
                other => return Err(Error::InvalidArgument(format!("unknown checkpoint table {other:?}"))),
            };
            if &table.contexts != contexts || table.rows.iter().any(|r| r.len() != width) {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint table {:?} has the wrong shape",
                    table.name
                )));
            }
            *dest = table.rows.concat();
        }
        Ok((policy, ckpt.config_hash))
    }
}

const CHECKPOINT_FORMAT: &str = "timemark-policy/1";

#[derive(Debug, Serialize, Deserialize)]
struct Table {
    name: String,
    contexts: Vec<String>,
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config_hash: String,
    vocabulary: Vec<String>,
    policy: PolicyConfig,
    tables: Vec<Table>,
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Adam over the policy tables.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Params,
    v: Params,
    t: u64,
}

impl Adam {
    pub fn new(policy: &ToyPolicy) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: policy.zero_grad(),
            v: policy.zero_grad(),
            t: 0,
        }
    }

    pub fn step(&mut self, policy: &mut ToyPolicy, grad: &Params, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.t.min(i32::MAX as u64) as i32);
        let params = policy.params.iter_mut();
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, g), (m, v)) in params.zip(grad.iter()).zip(moments) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}
