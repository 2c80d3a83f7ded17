//! Self-generated supervision: the policy speaks freely, the clock times each
//! word, and markers are inserted after clause-closing words and at the end.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::SpeechClock;
use crate::codec::{insert_markers_with, AlignedTranscript, AlignedWord, AugmentedSequence, Item, TimeMarker};
use crate::error::{Error, Result};
use crate::policy::{PromptContext, ToyPolicy};
use crate::seed;
use crate::vocab::{Bucket, Vocabulary};

/// Prompt as stored in dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub bucket: String,
    pub t_inst_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub id: String,
    pub prompt: PromptRecord,
    /// Words and `<X.Y seconds>` markers, without end-of-sequence.
    pub target: Vec<String>,
}

impl SftExample {
    pub fn prompt_context(&self) -> Result<PromptContext> {
        let bucket =
            Bucket::parse(&self.prompt.bucket).ok_or_else(|| Error::UnknownToken(self.prompt.bucket.clone()))?;
        Ok(PromptContext {
            bucket,
            t_inst_s: self.prompt.t_inst_s,
            prefix: Vec::new(),
        })
    }

    /// Target token ids with end-of-sequence appended.
    pub fn target_tokens(&self, vocab: &Vocabulary) -> Result<Vec<u32>> {
        let mut ids = self
            .target
            .iter()
            .map(|t| vocab.token_id(t))
            .collect::<Result<Vec<_>>>()?;
        ids.push(vocab.eos());
        Ok(ids)
    }

    pub fn augmented(&self) -> AugmentedSequence {
        AugmentedSequence::from_text(&self.target.join(" "))
    }

    pub fn markers(&self) -> Vec<f64> {
        self.augmented().marker_list().iter().map(|m| m.seconds()).collect()
    }
}

/// One self-generated example before serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedExample {
    pub transcript: AlignedTranscript,
    pub target: AugmentedSequence,
    /// Target token ids, end-of-sequence included.
    pub tokens: Vec<u32>,
    pub duration_s: f64,
}

/// Marker indices for cumulative times, snapped to the vocabulary quantum and
/// forced strictly increasing. Collisions push markers later, except that the
/// terminal marker keeps its own snapped time and earlier ones give way to it
/// when there is room above the first quantum.
pub fn snap_marker_times(vocab: &Vocabulary, times: &[f64]) -> Vec<u32> {
    let mut prev = 0u32;
    let forward: Vec<u32> = times
        .iter()
        .map(|&t| {
            let k = vocab.snap_index(t).max(prev + 1).min(vocab.n_markers());
            prev = k;
            k
        })
        .collect();
    let Some(&last) = times.last() else { return forward };
    let mut pulled = vec![0i64; forward.len()];
    let mut next = i64::from(vocab.snap_index(last)) + 1;
    for (slot, &k) in pulled.iter_mut().zip(&forward).rev() {
        next = i64::from(k).min(next - 1);
        *slot = next;
    }
    if pulled[0] >= 1 {
        pulled.into_iter().map(|k| k as u32).collect()
    } else {
        forward
    }
}

/// Builds the supervised target for a marker-free word sequence.
pub fn annotate(clock: &SpeechClock, id: &str, words: &[u32], utterance_seed: u64) -> Result<Option<GeneratedExample>> {
    let vocab = &clock.vocab;
    let speech = clock.realize(words, utterance_seed)?;
    if speech.tokens.is_empty() {
        return Ok(None);
    }
    let mut start = 0.0;
    let aligned = speech
        .tokens
        .iter()
        .zip(&speech.end_times)
        .map(|(&t, &end)| {
            let w = AlignedWord::new(vocab.word(t).unwrap_or_default(), start, end);
            start = end;
            w
        })
        .collect();
    let transcript = AlignedTranscript::new(id, aligned);
    let punctuation = vocab.punctuation();
    let mut target = insert_markers_with(&transcript, &punctuation)?;

    // Re-derive each marker from the exact end time of the word it follows.
    let last = transcript.words.len() - 1;
    let marker_times: Vec<f64> = transcript
        .words
        .iter()
        .enumerate()
        .filter(|(i, w)| punctuation.ends_clause(&w.text) || *i == last)
        .map(|(_, w)| w.end_s)
        .collect();
    let snapped = snap_marker_times(vocab, &marker_times);
    let mut next = snapped.iter();
    let mut tokens = Vec::with_capacity(target.items.len() + 1);
    for item in target.items.iter_mut() {
        match item {
            Item::Marker(m) => {
                let k = *next.next().expect("one snapped time per marker");
                *m = TimeMarker::from_seconds(vocab.marker_seconds(k))?;
                tokens.push(vocab.marker_token(k).expect("snapped index in range"));
            }
            Item::Token(w) => tokens.push(vocab.token_id(w)?),
        }
    }
    tokens.push(vocab.eos());
    Ok(Some(GeneratedExample {
        transcript,
        target,
        tokens,
        duration_s: speech.duration_s,
    }))
}

/// Samples a free response, drops any stray markers, times it with the clock
/// and inserts snapped markers. `None` for an empty response.
pub fn self_generate_example(
    policy: &ToyPolicy,
    prompt: &PromptContext,
    clock: &SpeechClock,
    max_len: usize,
    id: &str,
    sample_seed: u64,
    utterance_seed: u64,
) -> Result<Option<GeneratedExample>> {
    if prompt.bucket != Bucket::Free {
        return Err(Error::InvalidArgument(
            "self-generation uses the free-generation prompt".into(),
        ));
    }
    let sample = policy.sample_sequence(prompt, max_len, sample_seed);
    let words: Vec<u32> = sample
        .tokens
        .into_iter()
        .filter(|&t| policy.vocab().is_word(t))
        .collect();
    annotate(clock, id, &words, utterance_seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftDataset {
    pub train: Vec<SftExample>,
    pub validation: Vec<SftExample>,
    pub skipped: usize,
}

pub fn example_id(index: u64) -> String {
    format!("sft-{index:05}")
}

/// `n` self-generated examples, the last `round(n * held_out_fraction)` of
/// which form the validation split.
pub fn build_sft_dataset(
    policy: &ToyPolicy,
    clock: &SpeechClock,
    n_examples: usize,
    held_out_fraction: f64,
    max_len: usize,
    master_seed: u64,
) -> Result<SftDataset> {
    if !(0.0..=1.0).contains(&held_out_fraction) {
        return Err(Error::InvalidArgument(format!(
            "held-out fraction must be in [0, 1], got {held_out_fraction}"
        )));
    }
    let vocab = policy.vocab();
    let prompt = PromptContext::free();
    let make = |index: u64| -> Result<Option<SftExample>> {
        let id = example_id(index);
        let generated = self_generate_example(
            policy,
            &prompt,
            clock,
            max_len,
            &id,
            seed::derive_seed(master_seed, &[seed::tag::SELF_GEN, index]),
            seed::derive_seed(master_seed, &[seed::tag::JITTER, index]),
        )?;
        Ok(generated.map(|g| SftExample {
            id,
            prompt: PromptRecord {
                bucket: Bucket::Free.label(),
                t_inst_s: None,
            },
            target: g.tokens[..g.tokens.len() - 1]
                .iter()
                .map(|&t| vocab.token_str(t).unwrap_or_default())
                .collect(),
        }))
    };

    let mut examples = Vec::with_capacity(n_examples);
    let mut skipped = 0;
    let mut next_index = 0u64;
    // Empty generations are rare; refill in rounds until enough examples.
    while examples.len() < n_examples {
        let want = (n_examples - examples.len()) as u64;
        let batch: Vec<Option<SftExample>> = (next_index..next_index + want)
            .into_par_iter()
            .map(make)
            .collect::<Result<_>>()?;
        next_index += want;
        for e in batch {
            match e {
                Some(e) => examples.push(e),
                None => skipped += 1,
            }
        }
        if skipped > 10 * n_examples.max(1) {
            return Err(Error::InvalidArgument(
                "policy produces almost only empty generations".into(),
            ));
        }
    }
    let n_val = (n_examples as f64 * held_out_fraction).round() as usize;
    let validation = examples.split_off(n_examples - n_val);
    Ok(SftDataset {
        train: examples,
        validation,
        skipped,
    })
}

pub fn write_examples(path: &Path, examples: &[SftExample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for e in examples {
        writeln!(out, "{}", serde_json::to_string(e)?).map_err(|err| Error::io(path, err))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: &Path) -> Result<Vec<SftExample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Tokenized `(prompt, target)` pairs for training.
pub fn tokenize(examples: &[SftExample], vocab: &Vocabulary) -> Result<Vec<(PromptContext, Vec<u32>)>> {
    examples
        .iter()
        .map(|e| Ok((e.prompt_context()?, e.target_tokens(vocab)?)))
        .collect()
}

/// Final marker of one generation against its realized duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub t_last_s: f64,
    pub actual_s: f64,
    pub abs_error_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub n: usize,
    /// Generations without any marker.
    pub missing: usize,
    pub mean_abs_error_s: f64,
}

pub fn calibration_of(tokens: &[u32], clock: &SpeechClock, utterance_seed: u64) -> Result<Option<CalibrationSample>> {
    let vocab = &clock.vocab;
    let Some(t_last) = tokens
        .iter()
        .rev()
        .find_map(|&t| vocab.marker_index(t))
        .map(|k| vocab.marker_seconds(k))
    else {
        return Ok(None);
    };
    let words: Vec<u32> = tokens.iter().copied().filter(|&t| vocab.is_word(t)).collect();
    let actual = clock.realize(&words, utterance_seed)?.duration_s;
    Ok(Some(CalibrationSample {
        t_last_s: t_last,
        actual_s: actual,
        abs_error_s: (t_last - actual).abs(),
    }))
}

/// Samples one response per prompt and compares its final marker with the
/// clock-realized duration.
pub fn marker_calibration(
    policy: &ToyPolicy,
    clock: &SpeechClock,
    prompts: &[PromptContext],
    max_len: usize,
    master_seed: u64,
) -> Result<(Vec<CalibrationSample>, CalibrationSummary)> {
    let results: Vec<Option<CalibrationSample>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let sample = policy.sample_sequence(
                prompt,
                max_len,
                seed::derive_seed(master_seed, &[seed::tag::EVAL_ROLLOUTS, i as u64]),
            );
            calibration_of(
                &sample.tokens,
                clock,
                seed::derive_seed(master_seed, &[seed::tag::JITTER, i as u64]),
            )
        })
        .collect::<Result<_>>()?;
    let missing = results.iter().filter(|r| r.is_none()).count();
    let samples: Vec<CalibrationSample> = results.into_iter().flatten().collect();
    Ok((samples.clone(), summarize_calibration(&samples, missing)))
}

pub fn summarize_calibration(samples: &[CalibrationSample], missing: usize) -> CalibrationSummary {
    let n = samples.len();
    let mean = if n == 0 {
        0.0
    } else {
        samples.iter().map(|s| s.abs_error_s).sum::<f64>() / n as f64
    };
    CalibrationSummary {
        n,
        missing,
        mean_abs_error_s: mean,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{ClockConfig, DurationTable};
    use crate::policy::PolicyConfig;
    use crate::vocab::VocabConfig;

    fn vocab() -> Vocabulary {
        Vocabulary::new(VocabConfig::default()).unwrap()
    }

    fn fixed_clock(durations: &[(u32, f64)]) -> SpeechClock {
        let v = vocab();
        let mut c = SpeechClock::new(
            v.clone(),
            &ClockConfig {
                jitter: 0.0,
                ..ClockConfig::default()
            },
            1,
        )
        .unwrap();
        let mut secs = vec![0.0; v.len()];
        for &(t, d) in durations {
            secs[t as usize] = d;
        }
        c.table = DurationTable::from_seconds(secs);
        c
    }

    #[test]
    fn single_punctuated_word() {
        // w02, is punctuated
        let c = fixed_clock(&[(2, 0.5)]);
        let g = annotate(&c, "x", &[2], 0).unwrap().unwrap();
        let v = &c.vocab;
        assert_eq!(g.tokens, vec![2, v.marker_token(1).unwrap(), v.eos()]);
        assert_eq!(g.target.render(), "w02, <0.5 seconds>");
    }

    #[test]
    fn two_clause_boundaries() {
        let c = fixed_clock(&[(0, 0.4), (2, 0.6), (3, 0.5), (5, 0.7), (6, 0.3)]);
        // w00 w02, w03 w05. -> two boundaries, last word punctuated
        let g = annotate(&c, "a", &[0, 2, 3, 5], 0).unwrap().unwrap();
        assert_eq!(g.target.marker_list().len(), 2);
        // 2.2 s snaps to 2.0 s
        assert_eq!(g.target.render(), "w00 w02, <1.0 seconds> w03 w05. <2.0 seconds>");
        // ... followed by an unpunctuated word -> terminal marker added
        let g = annotate(&c, "b", &[0, 2, 3, 5, 6], 0).unwrap().unwrap();
        assert_eq!(g.target.marker_list().len(), 3);
        assert_eq!(g.target.last_marker().unwrap().seconds(), 2.5);
    }

    #[test]
    fn colliding_markers_are_bumped() {
        let v = vocab();
        assert_eq!(snap_marker_times(&v, &[1.3, 1.45, 1.6, 3.0]), vec![3, 4, 5, 6]);
        assert_eq!(snap_marker_times(&v, &[0.1]), vec![1]);
        // The terminal marker keeps its time and the one before gives way.
        assert_eq!(snap_marker_times(&v, &[2.9, 3.0]), vec![5, 6]);
        // No room below: fall back to pushing later.
        assert_eq!(snap_marker_times(&v, &[0.2, 0.4, 0.6]), vec![1, 2, 3]);
    }

    #[test]
    fn empty_generation_skipped() {
        let c = fixed_clock(&[]);
        assert!(annotate(&c, "e", &[], 0).unwrap().is_none());
    }

    #[test]
    fn split_sizes_and_ids() {
        let v = vocab();
        let clock = SpeechClock::new(v.clone(), &ClockConfig::default(), 3).unwrap();
        let policy = ToyPolicy::init(v, PolicyConfig::default(), 3);
        let ds = build_sft_dataset(&policy, &clock, 10, 0.1, 34, 42).unwrap();
        assert_eq!((ds.train.len(), ds.validation.len()), (9, 1));
        let mut ids: Vec<&str> = ds.train.iter().chain(&ds.validation).map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert_eq!(ds, build_sft_dataset(&policy, &clock, 10, 0.1, 34, 42).unwrap());
    }

    #[test]
    fn calibration_of_constructed_sequences() {
        let c = fixed_clock(&[(0, 2.0), (1, 3.0), (2, 0.3)]);
        let v = &c.vocab;
        let exact = calibration_of(&[0, 1, v.marker_token(10).unwrap(), v.eos()], &c, 0)
            .unwrap()
            .unwrap();
        assert_eq!(exact.abs_error_s, 0.0);
        let off = calibration_of(&[0, 1, 2, v.marker_token(10).unwrap()], &c, 0)
            .unwrap()
            .unwrap();
        assert!((off.abs_error_s - 0.3).abs() < 1e-12);
        assert!(calibration_of(&[0, 1], &c, 0).unwrap().is_none());
        let s = summarize_calibration(&[exact, off], 1);
        assert_eq!((s.n, s.missing), (2, 1));
        assert!((s.mean_abs_error_s - 0.15).abs() < 1e-12);
    }
}
