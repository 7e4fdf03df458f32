//! Viewpoints: derived value streams over a melody.
//!
//! Every viewpoint is a partial function from a position in a melody to a
//! value. Values at the predicted position are computed with the candidate
//! outcome substituted for the pitch there, which is what lets the same
//! derivation serve both past context and the predicted event.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{EventSequence, Rational};

#[derive(Debug, Error)]
pub enum ViewpointError {
    #[error("viewpoint {0} needs a key estimate")]
    MissingKey(ViewpointId),
    #[error("viewpoint {0} is not an anchored viewpoint")]
    NotAnchored(ViewpointId),
    #[error("unknown viewpoint tag {0:?}")]
    UnknownTag(String),
    #[error("bad value {value:?} for viewpoint {vp}")]
    BadValue { vp: ViewpointId, value: String },
    #[error("key profile file {path}: {message}")]
    Profiles { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ViewpointError>;

/// Viewpoint tags, declared in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewpointId {
    /// Chromatic pitch.
    P,
    /// Sequential interval in semitones.
    I,
    /// Interval modulo 12.
    O,
    /// Contour: sign of the interval.
    C,
    /// Extended contour: ±2 for leaps larger than five semitones.
    X,
    /// Metrical weight.
    M,
    /// Scale degree relative to the estimated tonic.
    T,
    /// Scale degree relative to the estimated tonic, with mode.
    K,
    /// Signed interval from the first tone of the piece.
    F1,
    /// Signed intervals from each of the first three tones.
    F123,
    /// Metrical weight linked with pitch.
    MP,
    /// Metrical weight linked with key degree.
    MK,
    /// Metrical weight linked with tonic degree.
    MT,
}

impl ViewpointId {
    pub const ALL: [ViewpointId; 13] = [
        ViewpointId::P,
        ViewpointId::I,
        ViewpointId::O,
        ViewpointId::C,
        ViewpointId::X,
        ViewpointId::M,
        ViewpointId::T,
        ViewpointId::K,
        ViewpointId::F1,
        ViewpointId::F123,
        ViewpointId::MP,
        ViewpointId::MK,
        ViewpointId::MT,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            ViewpointId::P => "P",
            ViewpointId::I => "I",
            ViewpointId::O => "O",
            ViewpointId::C => "C",
            ViewpointId::X => "X",
            ViewpointId::M => "M",
            ViewpointId::T => "T",
            ViewpointId::K => "K",
            ViewpointId::F1 => "F1",
            ViewpointId::F123 => "F123",
            ViewpointId::MP => "MP",
            ViewpointId::MK => "MK",
            ViewpointId::MT => "MT",
        }
    }

    pub fn needs_key(self) -> bool {
        matches!(
            self,
            ViewpointId::K | ViewpointId::T | ViewpointId::MK | ViewpointId::MT
        )
    }

    pub fn is_anchored(self) -> bool {
        matches!(
            self,
            ViewpointId::K | ViewpointId::T | ViewpointId::F1 | ViewpointId::F123
        )
    }

    pub fn is_linked(self) -> bool {
        matches!(self, ViewpointId::MP | ViewpointId::MK | ViewpointId::MT)
    }

    /// Whether the viewpoint may appear at a time offset greater than zero.
    /// Anchored, linked and metrical types are only defined at the predicted
    /// position.
    pub fn is_temporal(self) -> bool {
        matches!(
            self,
            ViewpointId::P | ViewpointId::I | ViewpointId::O | ViewpointId::C | ViewpointId::X
        )
    }

    /// Whether a value of this viewpoint at the predicted position depends on
    /// the outcome. Metrical weight is derived from the context alone.
    pub fn is_predictive(self) -> bool {
        self != ViewpointId::M
    }
}

impl fmt::Display for ViewpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ViewpointId {
    type Err = ViewpointError;

    /// Accepts the plain tags plus underscore/brace spellings such as `M_K`
    /// and `F_1`.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '{' | '}' | ','))
            .collect();
        ViewpointId::ALL
            .into_iter()
            .find(|vp| vp.tag() == norm)
            .ok_or_else(|| ViewpointError::UnknownTag(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Major,
    Minor,
}

impl Mode {
    fn letter(self) -> char {
        match self {
            Mode::Major => 'M',
            Mode::Minor => 'm',
        }
    }
}

/// Inner component of a linked value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Inner {
    Int(i32),
    Key(Mode, u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewpointValue {
    Int(i32),
    Key(Mode, u8),
    /// One component of the first-three-tones stream: `index` in 0..3 names
    /// the anchor tone. Used as a feature value.
    Anchor { index: u8, interval: i32 },
    /// Derived first-three-tones value: the interval to each of the first
    /// three tones, where defined.
    FirstThree([Option<i32>; 3]),
    /// Metrical weight paired with an inner value.
    Linked(u8, Inner),
}

impl ViewpointValue {
    /// Compares a feature value against a derived stream value.
    pub fn matches(&self, derived: &ViewpointValue) -> bool {
        match (self, derived) {
            (ViewpointValue::Anchor { index, interval }, ViewpointValue::FirstThree(v)) => {
                v.get(*index as usize).copied().flatten() == Some(*interval)
            }
            _ => self == derived,
        }
    }

    /// Whether this value has the shape used by features of viewpoint `vp`.
    pub fn fits(&self, vp: ViewpointId) -> bool {
        use ViewpointId as V;
        match (vp, self) {
            (V::P, ViewpointValue::Int(p)) => (0..=127).contains(p),
            (V::I | V::F1, ViewpointValue::Int(_)) => true,
            (V::O | V::T, ViewpointValue::Int(v)) => (0..12).contains(v),
            (V::C, ViewpointValue::Int(v)) => (-1..=1).contains(v),
            (V::X, ViewpointValue::Int(v)) => (-2..=2).contains(v),
            (V::M, ViewpointValue::Int(v)) => *v >= 1,
            (V::K, ViewpointValue::Key(_, d)) => *d < 12,
            (V::F123, ViewpointValue::Anchor { index, .. }) => *index < 3,
            (V::MP, ViewpointValue::Linked(w, Inner::Int(p))) => *w >= 1 && (0..=127).contains(p),
            (V::MK, ViewpointValue::Linked(w, Inner::Key(_, d))) => *w >= 1 && *d < 12,
            (V::MT, ViewpointValue::Linked(w, Inner::Int(d))) => *w >= 1 && (0..12).contains(d),
            _ => false,
        }
    }

    /// Splits a derived value into the feature values it supports. Only the
    /// first-three-tones stream yields more than one.
    pub fn feature_values(&self) -> Vec<ViewpointValue> {
        match self {
            ViewpointValue::FirstThree(v) => v
                .iter()
                .enumerate()
                .filter_map(|(i, iv)| {
                    iv.map(|interval| ViewpointValue::Anchor {
                        index: i as u8,
                        interval,
                    })
                })
                .collect(),
            other => vec![*other],
        }
    }

    pub fn parse(vp: ViewpointId, s: &str) -> Result<Self> {
        let bad = || ViewpointError::BadValue {
            vp,
            value: s.to_string(),
        };
        let int = |t: &str| t.trim().parse::<i32>().map_err(|_| bad());
        let key = |t: &str| -> Result<(Mode, u8)> {
            let t = t.trim();
            let mode = match t.chars().next() {
                Some('M') => Mode::Major,
                Some('m') => Mode::Minor,
                _ => return Err(bad()),
            };
            let d: u8 = t[1..].parse().map_err(|_| bad())?;
            Ok((mode, d))
        };
        let value = match vp {
            ViewpointId::K => {
                let (m, d) = key(s)?;
                ViewpointValue::Key(m, d)
            }
            ViewpointId::F123 => {
                let (i, v) = s.split_once('@').ok_or_else(bad)?;
                let i: u8 = i.trim().parse().map_err(|_| bad())?;
                if !(1..=3).contains(&i) {
                    return Err(bad());
                }
                ViewpointValue::Anchor {
                    index: i - 1,
                    interval: int(v)?,
                }
            }
            ViewpointId::MP | ViewpointId::MK | ViewpointId::MT => {
                let (w, inner) = s.split_once('|').ok_or_else(bad)?;
                let w: u8 = w.trim().parse().map_err(|_| bad())?;
                let inner = if vp == ViewpointId::MK {
                    let (m, d) = key(inner)?;
                    Inner::Key(m, d)
                } else {
                    Inner::Int(int(inner)?)
                };
                ViewpointValue::Linked(w, inner)
            }
            _ => ViewpointValue::Int(int(s)?),
        };
        if value.fits(vp) {
            Ok(value)
        } else {
            Err(bad())
        }
    }
}

impl fmt::Display for Inner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Inner::Int(v) => write!(f, "{v}"),
            Inner::Key(m, d) => write!(f, "{}{d}", m.letter()),
        }
    }
}

impl fmt::Display for ViewpointValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewpointValue::Int(v) => write!(f, "{v}"),
            ViewpointValue::Key(m, d) => write!(f, "{}{d}", m.letter()),
            ViewpointValue::Anchor { index, interval } => write!(f, "{}@{interval}", index + 1),
            ViewpointValue::FirstThree(v) => {
                let parts: Vec<String> = v
                    .iter()
                    .map(|x| x.map_or_else(|| "_".to_string(), |i| i.to_string()))
                    .collect();
                write!(f, "[{}]", parts.join(","))
            }
            ViewpointValue::Linked(w, inner) => write!(f, "{w}|{inner}"),
        }
    }
}

/// Nonnegative residue of an interval modulo the octave.
pub fn octave_invariant(interval: i32) -> i32 {
    interval.rem_euclid(12)
}

pub fn contour(interval: i32) -> i32 {
    interval.signum()
}

pub fn extended_contour(interval: i32) -> i32 {
    if interval.abs() > 5 {
        2 * interval.signum()
    } else {
        interval.signum()
    }
}

/// Major and minor key profiles, tonic first.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyProfiles {
    pub major: [f64; 12],
    pub minor: [f64; 12],
}

const TEMPERLEY: &str = include_str!("../data/temperley_profiles.txt");

impl KeyProfiles {
    /// The profiles shipped in `data/temperley_profiles.txt`.
    pub fn temperley() -> Self {
        Self::parse(TEMPERLEY).expect("bundled key profiles are well formed")
    }

    /// Parses 24 whitespace-separated reals: 12 major then 12 minor weights.
    /// Lines starting with `#` are skipped.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut values = Vec::with_capacity(24);
        for line in text.lines() {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| format!("bad number {tok:?}"))?;
                if !v.is_finite() {
                    return Err(format!("non-finite weight {tok:?}"));
                }
                values.push(v);
            }
        }
        if values.len() != 24 {
            return Err(format!("expected 24 weights, found {}", values.len()));
        }
        let mut major = [0.0; 12];
        let mut minor = [0.0; 12];
        major.copy_from_slice(&values[..12]);
        minor.copy_from_slice(&values[12..]);
        Ok(KeyProfiles { major, minor })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |message: String| ViewpointError::Profiles {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::parse(&text).map_err(err)
    }

    pub fn to_text(&self) -> String {
        let fmt_row = |r: &[f64; 12]| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        format!("{}\n{}\n", fmt_row(&self.major), fmt_row(&self.minor))
    }

    fn profile(&self, mode: Mode) -> &[f64; 12] {
        match mode {
            Mode::Major => &self.major,
            Mode::Minor => &self.minor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyEstimate {
    pub tonic: u8,
    pub mode: Mode,
    pub correlation: f64,
}

impl KeyEstimate {
    /// Scale degree of `pitch` relative to the tonic.
    pub fn degree(&self, pitch: i32) -> u8 {
        octave_invariant(pitch - self.tonic as i32) as u8
    }
}

fn pearson(a: &[f64; 12], b: &[f64; 12]) -> Option<f64> {
    let mean = |v: &[f64; 12]| v.iter().sum::<f64>() / 12.0;
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..12 {
        let (da, db) = (a[i] - ma, b[i] - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va <= 0.0 || vb <= 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Pitch-class histogram, optionally weighted by note duration.
pub fn pitch_class_histogram(seq: &EventSequence, duration_weighted: bool) -> [f64; 12] {
    let mut counts = [0.0; 12];
    for e in &seq.events {
        let w = if duration_weighted {
            *e.duration.numer() as f64 / *e.duration.denom() as f64
        } else {
            1.0
        };
        counts[octave_invariant(e.pitch) as usize] += w;
    }
    counts
}

/// Krumhansl-Schmuckler key finding: the (tonic, mode) whose rotated profile
/// correlates best with the pitch-class histogram. Ties go to the lowest
/// tonic, Major before minor. With fewer than two distinct pitch classes
/// there is nothing to correlate, so the result falls back to the first
/// tone's pitch class, Major, correlation 0.
pub fn find_key(seq: &EventSequence, profiles: &KeyProfiles, duration_weighted: bool) -> KeyEstimate {
    let counts = pitch_class_histogram(seq, duration_weighted);
    let fallback = KeyEstimate {
        tonic: octave_invariant(seq.events.first().map_or(0, |e| e.pitch)) as u8,
        mode: Mode::Major,
        correlation: 0.0,
    };
    if counts.iter().filter(|&&c| c > 0.0).count() < 2 {
        return fallback;
    }
    let mut best: Option<KeyEstimate> = None;
    for tonic in 0..12u8 {
        for mode in [Mode::Major, Mode::Minor] {
            let base = profiles.profile(mode);
            let mut rotated = [0.0; 12];
            for (pc, slot) in rotated.iter_mut().enumerate() {
                *slot = base[(pc + 12 - tonic as usize) % 12];
            }
            let Some(r) = pearson(&counts, &rotated) else {
                return fallback;
            };
            if best.is_none_or(|b| r > b.correlation) {
                best = Some(KeyEstimate {
                    tonic,
                    mode,
                    correlation: r,
                });
            }
        }
    }
    best.unwrap_or(fallback)
}

fn floor_mod(x: Rational, m: Rational) -> Rational {
    x - m * (x / m).floor()
}

/// Grid spacings from the whole bar down to the finest level not shorter
/// than the shortest note. Power-of-two numerators halve at every level;
/// other meters first divide by the numerator, then halve.
pub fn grid_spacings(seq: &EventSequence) -> Vec<Rational> {
    let bar = seq.bar_length();
    let shortest = seq
        .events
        .iter()
        .map(|e| e.duration)
        .min()
        .unwrap_or(bar);
    let num = seq.time_signature.0 as i64;
    let mut spacings = vec![bar];
    let mut divisor = if num.count_ones() == 1 { 2 } else { num };
    loop {
        let spacing = bar / Rational::from_integer(divisor);
        if spacing < shortest || spacings.len() >= 32 {
            break;
        }
        spacings.push(spacing);
        divisor *= 2;
    }
    spacings
}

/// Metrical weight per event: the number of grid levels containing the
/// onset's position within its bar, at least 1.
pub fn metrical_weights(seq: &EventSequence) -> Vec<u8> {
    let bar = seq.bar_length();
    let spacings = grid_spacings(seq);
    seq.events
        .iter()
        .map(|e| {
            let pos = floor_mod(e.onset - seq.anacrusis, bar);
            let hits = spacings
                .iter()
                .filter(|&&s| floor_mod(pos, s) == Rational::from_integer(0))
                .count();
            hits.max(1) as u8
        })
        .collect()
}

/// Pitches and context-only attributes of one melody, with the values of any
/// viewpoint available at any position.
#[derive(Debug, Clone)]
pub struct SequenceView {
    pitches: Vec<i32>,
    metrical: Vec<u8>,
    key: Option<KeyEstimate>,
}

impl SequenceView {
    pub fn new(seq: &EventSequence, key: Option<KeyEstimate>) -> Self {
        SequenceView {
            pitches: seq.pitches(),
            metrical: metrical_weights(seq),
            key,
        }
    }

    pub fn from_parts(pitches: Vec<i32>, metrical: Vec<u8>, key: Option<KeyEstimate>) -> Self {
        assert_eq!(pitches.len(), metrical.len());
        SequenceView {
            pitches,
            metrical,
            key,
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

    pub fn metrical(&self) -> &[u8] {
        &self.metrical
    }

    pub fn key(&self) -> Option<KeyEstimate> {
        self.key
    }

    /// Value of `vp` at position `t` when the pitch there is `pitch`. Earlier
    /// positions always use the recorded pitches.
    pub fn value_at(&self, vp: ViewpointId, t: usize, pitch: i32) -> Option<ViewpointValue> {
        use ViewpointId as V;
        let prev = t.checked_sub(1).map(|p| self.pitches[p]);
        let interval = prev.map(|p| pitch - p);
        let weight = self.metrical[t];
        Some(match vp {
            V::P => ViewpointValue::Int(pitch),
            V::I => ViewpointValue::Int(interval?),
            V::O => ViewpointValue::Int(octave_invariant(interval?)),
            V::C => ViewpointValue::Int(contour(interval?)),
            V::X => ViewpointValue::Int(extended_contour(interval?)),
            V::M => ViewpointValue::Int(weight as i32),
            V::T => ViewpointValue::Int(self.key?.degree(pitch) as i32),
            V::K => {
                let key = self.key?;
                ViewpointValue::Key(key.mode, key.degree(pitch))
            }
            V::F1 => {
                if t == 0 {
                    return None;
                }
                ViewpointValue::Int(pitch - self.pitches[0])
            }
            V::F123 => {
                if t == 0 {
                    return None;
                }
                let mut v = [None; 3];
                for (i, slot) in v.iter_mut().enumerate() {
                    if i < t {
                        *slot = Some(pitch - self.pitches[i]);
                    }
                }
                ViewpointValue::FirstThree(v)
            }
            V::MP => ViewpointValue::Linked(weight, Inner::Int(pitch)),
            V::MK => {
                let key = self.key?;
                ViewpointValue::Linked(weight, Inner::Key(key.mode, key.degree(pitch)))
            }
            V::MT => ViewpointValue::Linked(weight, Inner::Int(self.key?.degree(pitch) as i32)),
        })
    }

    pub fn value(&self, vp: ViewpointId, t: usize) -> Option<ViewpointValue> {
        self.value_at(vp, t, self.pitches[t])
    }

    pub fn stream(&self, vp: ViewpointId) -> Vec<Option<ViewpointValue>> {
        (0..self.len()).map(|t| self.value(vp, t)).collect()
    }
}

/// The value stream of `vp` over `seq`; undefined positions are `None`.
pub fn derive(
    seq: &EventSequence,
    vp: ViewpointId,
    key: Option<KeyEstimate>,
) -> Result<Vec<Option<ViewpointValue>>> {
    if vp.needs_key() && key.is_none() {
        return Err(ViewpointError::MissingKey(vp));
    }
    Ok(SequenceView::new(seq, key).stream(vp))
}

/// Anchored streams (K, T, F1, F123).
pub fn anchor_interval(
    seq: &EventSequence,
    vp: ViewpointId,
    key: Option<KeyEstimate>,
) -> Result<Vec<Option<ViewpointValue>>> {
    if !vp.is_anchored() {
        return Err(ViewpointError::NotAnchored(vp));
    }
    derive(seq, vp, key)
}
