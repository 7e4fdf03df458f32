//! Event sequences, corpus ingestion and cross-validation folds.
//!
//! A corpus file holds one melody per line:
//!
//! ```text
//! <id> <ts-num>/<ts-den> <anacrusis> | <pitch>:<onset>:<duration> , ...
//! ```
//!
//! Onsets, durations and the anacrusis are exact rationals in quarter-note
//! units, written either as `n/d` or as a bare integer. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Exact position or length in quarter notes.
pub type Rational = Ratio<i64>;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty corpus")]
    Empty,
    #[error("sequence {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub pitch: i32,
    pub onset: Rational,
    pub duration: Rational,
}

impl Event {
    pub fn new(pitch: i32, onset: Rational, duration: Rational) -> Self {
        Event {
            pitch,
            onset,
            duration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EventSequence {
    pub id: String,
    pub events: Vec<Event>,
    pub time_signature: (u32, u32),
    pub anacrusis: Rational,
}

impl EventSequence {
    /// Builds and validates a sequence.
    pub fn new(
        id: impl Into<String>,
        events: Vec<Event>,
        time_signature: (u32, u32),
        anacrusis: Rational,
    ) -> Result<Self> {
        let seq = EventSequence {
            id: id.into(),
            events,
            time_signature,
            anacrusis,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Quarter-note sequence in 4/4 with one event per beat.
    pub fn from_pitches(id: impl Into<String>, pitches: &[i32]) -> Result<Self> {
        let events = pitches
            .iter()
            .enumerate()
            .map(|(i, &p)| Event::new(p, Rational::from_integer(i as i64), Rational::from_integer(1)))
            .collect();
        Self::new(id, events, (4, 4), Rational::from_integer(0))
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| CorpusError::Invalid {
            id: self.id.clone(),
            message,
        };
        if self.id.is_empty() || self.id.chars().any(char::is_whitespace) {
            return Err(invalid("id must be non-empty and contain no whitespace".into()));
        }
        if self.events.is_empty() {
            return Err(invalid("sequence has no events".into()));
        }
        let (num, den) = self.time_signature;
        if num == 0 || den == 0 {
            return Err(invalid(format!("bad time signature {num}/{den}")));
        }
        if self.anacrusis < Rational::from_integer(0) {
            return Err(invalid("negative anacrusis".into()));
        }
        for (i, e) in self.events.iter().enumerate() {
            if !(0..=127).contains(&e.pitch) {
                return Err(invalid(format!("event {i}: pitch {} outside 0..=127", e.pitch)));
            }
            if e.duration <= Rational::from_integer(0) {
                return Err(invalid(format!("event {i}: non-positive duration")));
            }
        }
        for (i, w) in self.events.windows(2).enumerate() {
            if w[1].onset <= w[0].onset {
                return Err(invalid(format!(
                    "onsets not strictly increasing at event {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn pitches(&self) -> Vec<i32> {
        self.events.iter().map(|e| e.pitch).collect()
    }

    /// Bar length in quarter notes.
    pub fn bar_length(&self) -> Rational {
        let (num, den) = self.time_signature;
        Rational::new(4 * num as i64, den as i64)
    }

    /// Serializes to one corpus line (without trailing newline).
    pub fn to_line(&self) -> String {
        let events: Vec<String> = self
            .events
            .iter()
            .map(|e| format!("{}:{}:{}", e.pitch, fmt_ratio(e.onset), fmt_ratio(e.duration)))
            .collect();
        format!(
            "{} {}/{} {} | {}",
            self.id,
            self.time_signature.0,
            self.time_signature.1,
            fmt_ratio(self.anacrusis),
            events.join(" , ")
        )
    }
}

fn fmt_ratio(r: Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

fn parse_ratio(s: &str) -> std::result::Result<Rational, String> {
    let s = s.trim();
    let parse_int = |t: &str| t.trim().parse::<i64>().map_err(|_| format!("bad number {t:?}"));
    match s.split_once('/') {
        Some((n, d)) => {
            let d = parse_int(d)?;
            if d == 0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            Ok(Rational::new(parse_int(n)?, d))
        }
        None => Ok(Rational::from_integer(parse_int(s)?)),
    }
}

/// Sorted set of pitches, the outcome space of every model on a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Alphabet {
    pitches: Vec<i32>,
}

impl Alphabet {
    pub fn new(pitches: impl IntoIterator<Item = i32>) -> Self {
        let set: BTreeSet<i32> = pitches.into_iter().collect();
        Alphabet {
            pitches: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pitches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitches.is_empty()
    }

    pub fn pitches(&self) -> &[i32] {
        &self.pitches
    }

    pub fn pitch(&self, index: usize) -> i32 {
        self.pitches[index]
    }

    pub fn index_of(&self, pitch: i32) -> Option<usize> {
        self.pitches.binary_search(&pitch).ok()
    }

    pub fn contains(&self, pitch: i32) -> bool {
        self.index_of(pitch).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<EventSequence>,
    pub alphabet: Alphabet,
}

impl Corpus {
    /// Builds a corpus whose alphabet is the set of occurring pitches.
    pub fn new(sequences: Vec<EventSequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen = HashSet::new();
        for s in &sequences {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::Invalid {
                    id: s.id.clone(),
                    message: "duplicate sequence id".into(),
                });
            }
        }
        let alphabet = Alphabet::new(sequences.iter().flat_map(|s| s.events.iter().map(|e| e.pitch)));
        Ok(Corpus {
            sequences,
            alphabet,
        })
    }

    /// Sub-corpus sharing a parent alphabet. The alphabet is not recomputed.
    pub fn with_alphabet(sequences: Vec<EventSequence>, alphabet: Alphabet) -> Self {
        Corpus {
            sequences,
            alphabet,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    pub fn get(&self, id: &str) -> Option<&EventSequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            out.push_str(&s.to_line());
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the serialized corpus, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Splits off roughly `fraction` of the sequences (at least one, and at
    /// least one left for training) as a validation set.
    pub fn holdout(&self, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
        if self.len() < 2 {
            return Err(CorpusError::Argument(
                "holdout needs at least two sequences".into(),
            ));
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(CorpusError::Argument(format!(
                "holdout fraction {fraction} outside (0,1)"
            )));
        }
        let n_val = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len() - 1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held: HashSet<usize> = order[..n_val].iter().copied().collect();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, s) in self.sequences.iter().enumerate() {
            if held.contains(&i) {
                val.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        Ok((
            Corpus::with_alphabet(train, self.alphabet.clone()),
            Corpus::with_alphabet(val, self.alphabet.clone()),
        ))
    }
}

impl fmt::Display for Corpus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<EventSequence> {
    let perr = |message: String| CorpusError::Parse {
        line: lineno,
        message,
    };
    let (header, body) = line
        .split_once('|')
        .ok_or_else(|| perr("missing '|' separator".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(perr(format!(
            "expected `<id> <ts> <anacrusis>` before '|', found {} fields",
            fields.len()
        )));
    }
    let id = fields[0].to_string();
    let (ts_num, ts_den) = fields[1]
        .split_once('/')
        .ok_or_else(|| perr(format!("bad time signature {:?}", fields[1])))?;
    let ts_num: u32 = ts_num
        .parse()
        .map_err(|_| perr(format!("bad time signature {:?}", fields[1])))?;
    let ts_den: u32 = ts_den
        .parse()
        .map_err(|_| perr(format!("bad time signature {:?}", fields[1])))?;
    let anacrusis = parse_ratio(fields[2]).map_err(perr)?;

    let mut events = Vec::new();
    for (i, tok) in body.split(',').enumerate() {
        let tok = tok.trim();
        if tok.is_empty() {
            return Err(perr(format!("empty event record #{i}")));
        }
        let parts: Vec<&str> = tok.split(':').collect();
        if parts.len() != 3 {
            return Err(perr(format!(
                "event {tok:?}: expected pitch:onset:duration"
            )));
        }
        let pitch: i32 = parts[0]
            .trim()
            .parse()
            .map_err(|_| perr(format!("event {tok:?}: bad pitch")))?;
        let onset = parse_ratio(parts[1]).map_err(|m| perr(format!("event {tok:?}: {m}")))?;
        let duration = parse_ratio(parts[2]).map_err(|m| perr(format!("event {tok:?}: {m}")))?;
        events.push(Event::new(pitch, onset, duration));
    }
    EventSequence::new(id, events, (ts_num, ts_den), anacrusis)
}

/// Parses corpus text. Structural errors carry the 1-based line number;
/// semantic errors (e.g. non-increasing onsets) name the sequence id.
pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut sequences = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        sequences.push(parse_line(trimmed, i + 1)?);
    }
    Corpus::new(sequences)
}

pub fn ingest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

/// Mapping from sequence id to fold index in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Checks that every corpus sequence is assigned exactly once, that no
    /// unknown ids appear and that all folds are populated.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if self.k < 2 {
            return Err(CorpusError::Argument(format!("fold count {} < 2", self.k)));
        }
        let ids: HashSet<&str> = corpus.sequences.iter().map(|s| s.id.as_str()).collect();
        for (id, &f) in &self.assignment {
            if !ids.contains(id.as_str()) {
                return Err(CorpusError::Argument(format!(
                    "fold assignment names unknown sequence {id}"
                )));
            }
            if f >= self.k {
                return Err(CorpusError::Argument(format!(
                    "sequence {id}: fold {f} out of range for k={}",
                    self.k
                )));
            }
        }
        for s in &corpus.sequences {
            if !self.assignment.contains_key(&s.id) {
                return Err(CorpusError::Argument(format!(
                    "sequence {} has no fold",
                    s.id
                )));
            }
        }
        if self.k <= corpus.len() {
            if let Some(empty) = self.fold_sizes().iter().position(|&n| n == 0) {
                return Err(CorpusError::Argument(format!("fold {empty} is empty")));
            }
        }
        Ok(())
    }

    /// Parses `<sequence-id> <fold-index>` lines; k is the largest index + 1.
    pub fn parse(text: &str) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let perr = |message: String| CorpusError::Parse {
                line: i + 1,
                message,
            };
            let mut it = line.split_whitespace();
            let (Some(id), Some(fold), None) = (it.next(), it.next(), it.next()) else {
                return Err(perr("expected `<sequence-id> <fold-index>`".into()));
            };
            let fold: usize = fold
                .parse()
                .map_err(|_| perr(format!("bad fold index {fold:?}")))?;
            if assignment.insert(id.to_string(), fold).is_some() {
                return Err(perr(format!("sequence {id} assigned twice")));
            }
        }
        let k = assignment.values().max().map_or(0, |m| m + 1);
        Ok(FoldAssignment { k, assignment })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.assignment
            .iter()
            .map(|(id, f)| format!("{id} {f}\n"))
            .collect()
    }
}

/// Where fold indices come from.
#[derive(Debug, Clone)]
pub enum FoldSource {
    Seed(u64),
    Explicit(FoldAssignment),
}

/// Assigns sequences to `k` folds. Seeded splits shuffle the sequence order
/// and deal round-robin, so fold sizes differ by at most one. Explicit
/// assignments are validated and returned unchanged.
pub fn split_folds(corpus: &Corpus, k: usize, source: FoldSource) -> Result<FoldAssignment> {
    if k < 2 || k > corpus.len() {
        return Err(CorpusError::Argument(format!(
            "k={k} outside 2..={}",
            corpus.len()
        )));
    }
    match source {
        FoldSource::Explicit(folds) => {
            if folds.k != k {
                return Err(CorpusError::Argument(format!(
                    "fold file has k={} but k={k} was requested",
                    folds.k
                )));
            }
            folds.validate(corpus)?;
            Ok(folds)
        }
        FoldSource::Seed(seed) => {
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let assignment = order
                .iter()
                .enumerate()
                .map(|(rank, &i)| (corpus.sequences[i].id.clone(), rank % k))
                .collect();
            Ok(FoldAssignment { k, assignment })
        }
    }
}

/// Returns `(train, test)` where test holds the sequences of `test_fold`.
/// Both halves keep the parent alphabet and the corpus order.
pub fn train_test_split(
    corpus: &Corpus,
    folds: &FoldAssignment,
    test_fold: usize,
) -> Result<(Corpus, Corpus)> {
    if test_fold >= folds.k {
        return Err(CorpusError::Argument(format!(
            "test fold {test_fold} out of range for k={}",
            folds.k
        )));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in &corpus.sequences {
        match folds.fold_of(&s.id) {
            Some(f) if f == test_fold => test.push(s.clone()),
            Some(_) => train.push(s.clone()),
            None => {
                return Err(CorpusError::Argument(format!(
                    "sequence {} has no fold",
                    s.id
                )))
            }
        }
    }
    Ok((
        Corpus::with_alphabet(train, corpus.alphabet.clone()),
        Corpus::with_alphabet(test, corpus.alphabet.clone()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Corpus {
        let seqs = (0..n)
            .map(|i| EventSequence::from_pitches(format!("s{i}"), &[60, 62 + (i % 3) as i32]).unwrap())
            .collect();
        Corpus::new(seqs).unwrap()
    }

    #[test]
    fn alphabet_from_single_sequence() {
        let c = parse_corpus("a 4/4 0 | 60:0:1 , 64:1:1 , 67:2/1:2\n").unwrap();
        assert_eq!(c.alphabet.pitches(), &[60, 64, 67]);
    }

    #[test]
    fn alphabet_is_union() {
        let c = parse_corpus("a 4/4 0/1 | 60:0:1 , 62:1:1\nb 3/4 1/2 | 62:0:1/2 , 65:1/2:1\n").unwrap();
        assert_eq!(c.alphabet.pitches(), &[60, 62, 65]);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_corpus(""), Err(CorpusError::Empty)));
        assert!(matches!(parse_corpus("\n# only comments\n"), Err(CorpusError::Empty)));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_corpus("a 4/4 0 | 60:0:1\nb 4/4 0 60:0:1\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
        let err = parse_corpus("a 4/4 0 | 60:x:1\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
    }

    #[test]
    fn non_increasing_onsets_name_sequence() {
        let err = parse_corpus("tune7 4/4 0 | 60:1:1 , 62:1:1\n").unwrap_err();
        match err {
            CorpusError::Invalid { id, .. } => assert_eq!(id, "tune7"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(parse_corpus("a 4/4 0 | 60:0:1\na 4/4 0 | 62:0:1\n").is_err());
    }

    #[test]
    fn ten_sequences_ten_folds() {
        let f = split_folds(&toy(10), 10, FoldSource::Seed(3)).unwrap();
        assert!(f.fold_sizes().iter().all(|&n| n == 1));
    }

    #[test]
    fn eleven_sequences_ten_folds() {
        let f = split_folds(&toy(11), 10, FoldSource::Seed(3)).unwrap();
        let mut sizes = f.fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 2]);
    }

    #[test]
    fn seeded_split_is_deterministic() {
        let c = toy(9);
        let a = split_folds(&c, 3, FoldSource::Seed(42)).unwrap();
        let b = split_folds(&c, 3, FoldSource::Seed(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k_out_of_range() {
        let c = toy(4);
        assert!(split_folds(&c, 1, FoldSource::Seed(0)).is_err());
        assert!(split_folds(&c, 5, FoldSource::Seed(0)).is_err());
    }

    #[test]
    fn explicit_assignment_returned_verbatim() {
        let c = toy(4);
        let folds = FoldAssignment::parse("s0 0\ns1 1\ns2 0\ns3 1\n").unwrap();
        let got = split_folds(&c, 2, FoldSource::Explicit(folds.clone())).unwrap();
        assert_eq!(got, folds);
        let bad = FoldAssignment::parse("s0 0\ns1 1\ns2 0\nzz 1\n").unwrap();
        assert!(split_folds(&c, 2, FoldSource::Explicit(bad)).is_err());
        let missing = FoldAssignment::parse("s0 0\ns1 1\ns2 0\n").unwrap();
        assert!(split_folds(&c, 2, FoldSource::Explicit(missing)).is_err());
    }

    #[test]
    fn split_two_folds() {
        let c = toy(4);
        let folds = FoldAssignment::parse("s0 0\ns1 1\ns2 0\ns3 1\n").unwrap();
        let (train, test) = train_test_split(&c, &folds, 0).unwrap();
        let ids = |c: &Corpus| c.sequences.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), vec!["s1", "s3"]);
        assert_eq!(ids(&test), vec!["s0", "s2"]);
        assert!(train_test_split(&c, &folds, 2).is_err());
    }

    #[test]
    fn split_halves_inherit_alphabet() {
        let c = parse_corpus("a 4/4 0 | 60:0:1\nb 4/4 0 | 72:0:1\n").unwrap();
        let folds = FoldAssignment::parse("a 0\nb 1\n").unwrap();
        let (train, test) = train_test_split(&c, &folds, 0).unwrap();
        assert_eq!(train.alphabet, c.alphabet);
        assert_eq!(test.alphabet, c.alphabet);
    }

    #[test]
    fn holdout_keeps_both_sides_nonempty() {
        let (train, val) = toy(10).holdout(0.1, 5).unwrap();
        assert_eq!(val.len(), 1);
        assert_eq!(train.len(), 9);
        let (train, val) = toy(2).holdout(0.1, 5).unwrap();
        assert_eq!((train.len(), val.len()), (1, 1));
    }
}
