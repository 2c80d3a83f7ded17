//! Spoken time markers: textual form, parsing, stripping and insertion into
//! word-aligned transcripts.
//!
//! A marker is the cumulative speaking time at a point in a response, written
//! inline as `<6.8 seconds>`. Markers are stored as integer tenths so that the
//! textual form round-trips exactly.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Punctuation marks that close a clause by default.
pub const DEFAULT_PUNCTUATION: &[char] = &['.', ',', '!', '?', ';'];

/// Cumulative speaking time quantized to 0.1 s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TimeMarker {
    tenths: u32,
}

impl TimeMarker {
    pub const fn from_tenths(tenths: u32) -> Self {
        Self { tenths }
    }

    /// Rounds to the nearest tenth of a second.
    pub fn from_seconds(seconds: f64) -> Result<Self> {
        if !seconds.is_finite() || seconds < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "time marker must be a finite non-negative number of seconds, got {seconds}"
            )));
        }
        let tenths = (seconds * 10.0).round();
        if tenths > f64::from(u32::MAX) {
            return Err(Error::InvalidArgument(format!(
                "time marker {seconds} s is out of range"
            )));
        }
        Ok(Self { tenths: tenths as u32 })
    }

    pub fn tenths(self) -> u32 {
        self.tenths
    }

    pub fn seconds(self) -> f64 {
        f64::from(self.tenths) / 10.0
    }
}

impl fmt::Display for TimeMarker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}.{} seconds>", self.tenths / 10, self.tenths % 10)
    }
}

/// `<X.Y seconds>`, always one decimal digit and the plural unit.
pub fn format_marker(marker: TimeMarker) -> String {
    marker.to_string()
}

fn marker_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"<([0-9]+)\.([0-9]) seconds>").expect("valid marker regex"))
}

/// Parses a single marker that spans the whole input, e.g. `<1.5 seconds>`.
pub fn parse_marker(text: &str) -> Option<TimeMarker> {
    let caps = marker_pattern().captures(text)?;
    let whole = caps.get(0)?;
    if whole.start() != 0 || whole.end() != text.len() {
        return None;
    }
    marker_from_captures(&caps)
}

fn marker_from_captures(caps: &regex::Captures<'_>) -> Option<TimeMarker> {
    let int: u32 = caps[1].parse().ok()?;
    let frac: u32 = caps[2].parse().ok()?;
    int.checked_mul(10)?.checked_add(frac).map(TimeMarker::from_tenths)
}

/// Marker extracted from text, with its character offset in the cleaned text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedMarker {
    pub offset: usize,
    pub marker: TimeMarker,
}

/// Removes every well-formed marker from `text`.
///
/// Whitespace touching a removed marker collapses to a single space (or to
/// nothing at either end of the text). The offset of each marker is the
/// character position in the cleaned text where the text following it begins.
/// Anything that does not match the grammar, such as `<abc seconds>`, is kept
/// verbatim.
pub fn parse_markers(text: &str) -> (String, Vec<ParsedMarker>) {
    let mut clean = String::with_capacity(text.len());
    let mut clean_chars = 0usize;
    let mut markers = Vec::new();
    let mut cursor = 0usize;
    // Set after a marker: the next plain segment must drop its leading
    // whitespace and be joined with a single space.
    let mut pending_join = false;

    for caps in marker_pattern().captures_iter(text) {
        let whole = caps.get(0).expect("group 0 always present");
        let Some(marker) = marker_from_captures(&caps) else {
            continue;
        };
        push_segment(
            &text[cursor..whole.start()],
            &mut clean,
            &mut clean_chars,
            &mut pending_join,
        );
        // Trailing whitespace before the marker is folded into the join.
        let trimmed_len = clean.trim_end().len();
        if trimmed_len != clean.len() {
            clean_chars -= clean[trimmed_len..].chars().count();
            clean.truncate(trimmed_len);
        }
        pending_join = true;
        let offset = if clean.is_empty() { 0 } else { clean_chars + 1 };
        markers.push(ParsedMarker { offset, marker });
        cursor = whole.end();
    }
    push_segment(&text[cursor..], &mut clean, &mut clean_chars, &mut pending_join);

    // A trailing marker points at the end of the text.
    for m in markers.iter_mut() {
        m.offset = m.offset.min(clean_chars);
    }
    (clean, markers)
}

fn push_segment(segment: &str, clean: &mut String, clean_chars: &mut usize, pending_join: &mut bool) {
    let segment = if *pending_join { segment.trim_start() } else { segment };
    if segment.is_empty() {
        return;
    }
    if *pending_join && !clean.is_empty() {
        clean.push(' ');
        *clean_chars += 1;
    }
    *pending_join = false;
    clean.push_str(segment);
    *clean_chars += segment.chars().count();
}

/// The clean text of [`parse_markers`].
pub fn strip_markers(text: &str) -> String {
    parse_markers(text).0
}

/// One element of an interleaved word/marker sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Token(String),
    Marker(TimeMarker),
}

/// Words interleaved with time markers. Produced by [`insert_markers`], the
/// sequence ends with a marker whenever it contains any.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AugmentedSequence {
    pub items: Vec<Item>,
}

impl AugmentedSequence {
    pub fn new(items: Vec<Item>) -> Self {
        Self { items }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// Markers in order of appearance.
    pub fn marker_list(&self) -> Vec<TimeMarker> {
        self.items
            .iter()
            .filter_map(|item| match item {
                Item::Marker(m) => Some(*m),
                Item::Token(_) => None,
            })
            .collect()
    }

    /// The final marker in sequence order (not the largest).
    pub fn last_marker(&self) -> Option<TimeMarker> {
        self.items.iter().rev().find_map(|item| match item {
            Item::Marker(m) => Some(*m),
            Item::Token(_) => None,
        })
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.items.iter().filter_map(|item| match item {
            Item::Token(t) => Some(t.as_str()),
            Item::Marker(_) => None,
        })
    }

    /// Single-space-separated text form, markers rendered inline.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, item) in self.items.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match item {
                Item::Token(t) => out.push_str(t),
                Item::Marker(m) => out.push_str(&m.to_string()),
            }
        }
        out
    }

    /// Inverse of [`render`](Self::render) for text whose words contain no
    /// whitespace.
    pub fn from_text(text: &str) -> Self {
        let mut items = Vec::new();
        let mut cursor = 0;
        for caps in marker_pattern().captures_iter(text) {
            let whole = caps.get(0).expect("group 0 always present");
            let Some(marker) = marker_from_captures(&caps) else {
                continue;
            };
            items.extend(
                text[cursor..whole.start()]
                    .split_whitespace()
                    .map(|w| Item::Token(w.to_string())),
            );
            items.push(Item::Marker(marker));
            cursor = whole.end();
        }
        items.extend(text[cursor..].split_whitespace().map(|w| Item::Token(w.to_string())));
        Self { items }
    }
}

pub fn marker_list(seq: &AugmentedSequence) -> Vec<TimeMarker> {
    seq.marker_list()
}

pub fn last_marker(seq: &AugmentedSequence) -> Option<TimeMarker> {
    seq.last_marker()
}

/// A transcribed word with its time span in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedWord {
    #[serde(rename = "w")]
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl AlignedWord {
    pub fn new(text: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self {
            text: text.into(),
            start_s,
            end_s,
        }
    }
}

/// Word-level timestamps for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedTranscript {
    pub id: String,
    pub words: Vec<AlignedWord>,
}

impl AlignedTranscript {
    pub fn new(id: impl Into<String>, words: Vec<AlignedWord>) -> Self {
        Self { id: id.into(), words }
    }

    /// Checks `0 <= start <= end` per word and non-decreasing end times.
    /// Overlapping words are allowed.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0.0_f64;
        for (i, w) in self.words.iter().enumerate() {
            if !(w.start_s.is_finite() && w.end_s.is_finite()) || w.start_s < 0.0 || w.start_s > w.end_s {
                return Err(Error::InvalidTranscript(format!(
                    "{}: word {i} ({:?}) has invalid span [{}, {}]",
                    self.id, w.text, w.start_s, w.end_s
                )));
            }
            if w.end_s < prev_end {
                return Err(Error::InvalidTranscript(format!(
                    "{}: word {i} ({:?}) ends at {} before the previous word ({prev_end})",
                    self.id, w.text, w.end_s
                )));
            }
            prev_end = w.end_s;
        }
        Ok(())
    }

    pub fn text(&self) -> String {
        self.words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Decides which words close a clause.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PunctuationSet {
    marks: Vec<char>,
}

impl Default for PunctuationSet {
    fn default() -> Self {
        Self {
            marks: DEFAULT_PUNCTUATION.to_vec(),
        }
    }
}

impl PunctuationSet {
    pub fn new(marks: impl IntoIterator<Item = char>) -> Self {
        Self {
            marks: marks.into_iter().collect(),
        }
    }

    pub fn ends_clause(&self, word: &str) -> bool {
        word.chars().last().is_some_and(|c| self.marks.contains(&c))
    }
}

/// Interleaves markers after clause-closing words, using the default
/// punctuation set.
pub fn insert_markers(transcript: &AlignedTranscript) -> Result<AugmentedSequence> {
    insert_markers_with(transcript, &PunctuationSet::default())
}

/// Emits each word, a marker with its end time after every clause-closing
/// word, and a terminal marker with the last word's end time unless the last
/// word already carried one.
pub fn insert_markers_with(transcript: &AlignedTranscript, punctuation: &PunctuationSet) -> Result<AugmentedSequence> {
    transcript.validate()?;
    let mut items = Vec::with_capacity(transcript.words.len() * 2);
    for word in &transcript.words {
        items.push(Item::Token(word.text.clone()));
        if punctuation.ends_clause(&word.text) {
            items.push(Item::Marker(TimeMarker::from_seconds(word.end_s)?));
        }
    }
    if let Some(last) = transcript.words.last() {
        if !matches!(items.last(), Some(Item::Marker(_))) {
            items.push(Item::Marker(TimeMarker::from_seconds(last.end_s)?));
        }
    }
    Ok(AugmentedSequence { items })
}

/// Reads transcripts, one JSON object per line. Blank lines are skipped.
pub fn read_transcripts(path: &Path) -> Result<Vec<AlignedTranscript>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let transcript: AlignedTranscript = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        transcript.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(transcript);
    }
    Ok(out)
}

pub fn write_transcripts(path: &Path, transcripts: &[AlignedTranscript]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for t in transcripts {
        let line = serde_json::to_string(t)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tm(s: f64) -> TimeMarker {
        TimeMarker::from_seconds(s).unwrap()
    }

    // Fifteen-second answer with a marker after each clause.
    const OCEAN_15S: &str = "Well, <0.9 seconds> so, <1.6 seconds> the sea floor sits far below the surface in many spots.\n\
<3.8 seconds> Its lowest known point lies in a Pacific trench, <7.2 seconds> roughly eleven kilometers down.\n\
<9.4 seconds> Averaged across the globe, <11.0 seconds> ocean depth comes to a little under four kilometers. <15.0 seconds>";

    #[test]
    fn format_examples() {
        assert_eq!(format_marker(tm(6.8)), "<6.8 seconds>");
        assert_eq!(format_marker(tm(0.0)), "<0.0 seconds>");
        assert_eq!(format_marker(tm(15.0)), "<15.0 seconds>");
    }

    #[test]
    fn negative_and_nan_rejected() {
        assert!(TimeMarker::from_seconds(-0.1).is_err());
        assert!(TimeMarker::from_seconds(f64::NAN).is_err());
    }

    #[test]
    fn parse_examples() {
        let (clean, markers) = parse_markers("Well, <0.9 seconds> you");
        assert_eq!(clean, "Well, you");
        assert_eq!(
            markers,
            vec![ParsedMarker {
                offset: 6,
                marker: tm(0.9)
            }]
        );

        assert_eq!(
            parse_markers("no markers here"),
            ("no markers here".to_string(), vec![])
        );
        assert_eq!(parse_markers("<abc seconds>"), ("<abc seconds>".to_string(), vec![]));
    }

    #[test]
    fn malformed_markers_pass_through() {
        for text in [
            "<1.25 seconds>",
            "<1 seconds>",
            "<1.5 second>",
            "<-1.0 seconds>",
            "< 1.0 seconds>",
        ] {
            assert_eq!(strip_markers(text), text, "{text}");
        }
    }

    #[test]
    fn strip_examples() {
        assert_eq!(strip_markers("Hi, <0.5 seconds> there. <1.1 seconds>"), "Hi, there.");
        assert_eq!(strip_markers(""), "");
        assert_eq!(strip_markers("  keeps   odd spacing "), "  keeps   odd spacing ");
    }

    #[test]
    fn leading_and_adjacent_markers() {
        let (clean, markers) = parse_markers("<1.0 seconds> <2.0 seconds>  go");
        assert_eq!(clean, "go");
        assert_eq!(markers.iter().map(|m| m.offset).collect::<Vec<_>>(), vec![0, 0]);

        let (clean, markers) = parse_markers("a<1.0 seconds>b");
        assert_eq!(clean, "a b");
        assert_eq!(markers[0].offset, 2);

        let (clean, markers) = parse_markers("end <3.0 seconds>");
        assert_eq!(clean, "end");
        assert_eq!(markers[0].offset, 3);
    }

    #[test]
    fn ocean_box_strips_and_lists_markers() {
        let (clean, markers) = parse_markers(OCEAN_15S);
        assert!(!clean.contains("seconds>"));
        assert!(clean.starts_with("Well, so, the sea floor"));
        assert!(clean.ends_with("under four kilometers."));
        let values: Vec<f64> = markers.iter().map(|m| m.marker.seconds()).collect();
        assert_eq!(values, vec![0.9, 1.6, 3.8, 7.2, 9.4, 11.0, 15.0]);

        let seq = AugmentedSequence::from_text(OCEAN_15S);
        assert_eq!(seq.last_marker(), Some(tm(15.0)));
        assert_eq!(seq.marker_list().len(), 7);
    }

    #[test]
    fn insert_examples() {
        let t = AlignedTranscript::new(
            "x",
            vec![AlignedWord::new("Hi,", 0.0, 0.5), AlignedWord::new("there.", 0.6, 1.1)],
        );
        let seq = insert_markers(&t).unwrap();
        assert_eq!(
            seq.items,
            vec![
                Item::Token("Hi,".into()),
                Item::Marker(tm(0.5)),
                Item::Token("there.".into()),
                Item::Marker(tm(1.1)),
            ]
        );

        let t = AlignedTranscript::new("y", vec![AlignedWord::new("go", 0.0, 0.4)]);
        assert_eq!(
            insert_markers(&t).unwrap().items,
            vec![Item::Token("go".into()), Item::Marker(tm(0.4))]
        );

        let t = AlignedTranscript::new("z", vec![]);
        assert!(insert_markers(&t).unwrap().is_empty());
    }

    #[test]
    fn custom_punctuation_set() {
        let t = AlignedTranscript::new(
            "x",
            vec![
                AlignedWord::new("a:", 0.0, 0.3),
                AlignedWord::new("b,", 0.3, 0.7),
                AlignedWord::new("c", 0.7, 1.0),
            ],
        );
        let seq = insert_markers_with(&t, &PunctuationSet::new([':'])).unwrap();
        assert_eq!(seq.marker_list(), vec![tm(0.3), tm(1.0)]);
    }

    #[test]
    fn marker_list_keeps_order_and_duplicates() {
        let seq = AugmentedSequence::new(vec![
            Item::Token("w".into()),
            Item::Marker(tm(2.0)),
            Item::Token("w".into()),
            Item::Marker(tm(2.0)),
        ]);
        assert_eq!(marker_list(&seq), vec![tm(2.0), tm(2.0)]);

        let seq = AugmentedSequence::new(vec![Item::Marker(tm(5.0)), Item::Marker(tm(3.0))]);
        assert_eq!(last_marker(&seq), Some(tm(3.0)));
        assert_eq!(last_marker(&AugmentedSequence::default()), None);
        assert!(marker_list(&AugmentedSequence::new(vec![Item::Token("a".into())])).is_empty());
    }

    #[test]
    fn transcript_validation() {
        let bad = AlignedTranscript::new("b", vec![AlignedWord::new("a", 0.5, 0.2)]);
        assert!(bad.validate().is_err());
        let regress = AlignedTranscript::new(
            "r",
            vec![AlignedWord::new("a", 0.0, 1.0), AlignedWord::new("b", 0.2, 0.8)],
        );
        assert!(regress.validate().is_err());
        let overlap = AlignedTranscript::new(
            "o",
            vec![AlignedWord::new("a", 0.0, 1.0), AlignedWord::new("b", 0.8, 1.2)],
        );
        assert!(overlap.validate().is_ok());
    }

    #[test]
    fn transcript_jsonl_uses_short_word_key() {
        let t = AlignedTranscript::new("u1", vec![AlignedWord::new("Hi,", 0.0, 0.5)]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"id":"u1","words":[{"w":"Hi,","start_s":0.0,"end_s":0.5}]}"#);
    }
}
