//! Compound features over viewpoint streams and the sparse feature matrix.
//!
//! A basis feature tests one viewpoint at one time offset σ into the past
//! (σ = 0 is the predicted event). A compound is the conjunction of its basis
//! features and must contain at least one σ = 0 basis that constrains the
//! outcome, otherwise it would fire on every candidate alike and carry no
//! information about the prediction.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Alphabet, Corpus};
use crate::viewpoints::{find_key, KeyProfiles, SequenceView, ViewpointError, ViewpointId, ViewpointValue};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("viewpoint {vp} only exists at σ=0, got σ={sigma}")]
    Offset { vp: ViewpointId, sigma: u32 },
    #[error("value {value} is outside the range of viewpoint {vp}")]
    Range { vp: ViewpointId, value: String },
    #[error("empty compound feature")]
    Empty,
    #[error("compound has no predictive σ=0 basis feature: {0}")]
    NotPredictive(String),
    #[error("compound repeats viewpoint {vp} at σ={sigma}")]
    Duplicate { vp: ViewpointId, sigma: u32 },
    #[error("cannot parse feature {0:?}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisFeature {
    pub viewpoint: ViewpointId,
    pub sigma: u32,
    pub value: ViewpointValue,
}

impl BasisFeature {
    pub fn new(viewpoint: ViewpointId, sigma: u32, value: ViewpointValue) -> Result<Self> {
        if sigma > 0 && !viewpoint.is_temporal() {
            return Err(FeatureError::Offset { vp: viewpoint, sigma });
        }
        if !value.fits(viewpoint) {
            return Err(FeatureError::Range {
                vp: viewpoint,
                value: value.to_string(),
            });
        }
        Ok(BasisFeature { viewpoint, sigma, value })
    }

    /// Constrains the outcome: σ = 0 on any viewpoint except bare metrical
    /// weight.
    pub fn is_predictive(&self) -> bool {
        self.sigma == 0 && self.viewpoint.is_predictive()
    }

    pub fn shifted(&self, by: u32) -> BasisFeature {
        BasisFeature {
            sigma: self.sigma + by,
            ..*self
        }
    }
}

impl Ord for BasisFeature {
    fn cmp(&self, other: &Self) -> Ordering {
        self.viewpoint
            .cmp(&other.viewpoint)
            .then(other.sigma.cmp(&self.sigma))
            .then(self.value.cmp(&other.value))
    }
}

impl PartialOrd for BasisFeature {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for BasisFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[σ={},ν={}]", self.viewpoint, self.sigma, self.value)
    }
}

impl FromStr for BasisFeature {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || FeatureError::Parse(s.to_string());
        let s = s.trim();
        let (tag, rest) = s.split_once('[').ok_or_else(bad)?;
        let body = rest.strip_suffix(']').ok_or_else(bad)?;
        let (sig, val) = body.split_once(',').ok_or_else(bad)?;
        let sigma: u32 = sig.strip_prefix("σ=").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let val = val.strip_prefix("ν=").ok_or_else(bad)?;
        let vp: ViewpointId = tag.parse().map_err(|_| bad())?;
        let value = ViewpointValue::parse(vp, val).map_err(|_: ViewpointError| bad())?;
        BasisFeature::new(vp, sigma, value)
    }
}

/// A conjunction of basis features, kept in canonical order so that equal
/// compounds are structurally equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CompoundFeature {
    basis: Vec<BasisFeature>,
}

impl CompoundFeature {
    pub fn new(mut basis: Vec<BasisFeature>) -> Result<Self> {
        if basis.is_empty() {
            return Err(FeatureError::Empty);
        }
        basis.sort();
        for w in basis.windows(2) {
            if w[0].viewpoint == w[1].viewpoint && w[0].sigma == w[1].sigma {
                return Err(FeatureError::Duplicate {
                    vp: w[0].viewpoint,
                    sigma: w[0].sigma,
                });
            }
        }
        let f = CompoundFeature { basis };
        if !f.basis.iter().any(BasisFeature::is_predictive) {
            return Err(FeatureError::NotPredictive(f.to_string()));
        }
        Ok(f)
    }

    pub fn single(vp: ViewpointId, value: ViewpointValue) -> Result<Self> {
        CompoundFeature::new(vec![BasisFeature::new(vp, 0, value)?])
    }

    pub fn basis(&self) -> &[BasisFeature] {
        &self.basis
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// Temporal extent Δ: the largest offset in the compound. Anchored,
    /// linked and metrical types always sit at σ = 0, so they add nothing.
    pub fn max_sigma(&self) -> u32 {
        self.basis.iter().map(|b| b.sigma).max().unwrap_or(0)
    }

    pub fn sigmas(&self) -> BTreeSet<u32> {
        self.basis.iter().map(|b| b.sigma).collect()
    }

    /// Offsets missing from the contiguous span 0..=Δ.
    pub fn holes(&self) -> u32 {
        self.max_sigma() + 1 - self.sigmas().len() as u32
    }

    pub fn is_contiguous(&self) -> bool {
        self.holes() == 0
    }

    pub fn viewpoints(&self) -> BTreeSet<ViewpointId> {
        self.basis.iter().map(|b| b.viewpoint).collect()
    }

    /// Whether every basis feature may be moved to a larger offset.
    pub fn is_shiftable(&self) -> bool {
        self.basis.iter().all(|b| b.viewpoint.is_temporal())
    }

    pub fn conjoin(&self, extra: BasisFeature) -> Result<Self> {
        let mut basis = self.basis.clone();
        basis.push(extra);
        CompoundFeature::new(basis)
    }

    /// Every basis moved `by` steps further into the past. The result has no
    /// σ = 0 basis, so it is not a valid compound on its own.
    pub fn shifted_basis(&self, by: u32) -> Vec<BasisFeature> {
        self.basis.iter().map(|b| b.shifted(by)).collect()
    }
}

impl fmt::Display for CompoundFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.basis.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for CompoundFeature {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self> {
        let basis = s
            .split('&')
            .map(str::parse)
            .collect::<Result<Vec<BasisFeature>>>()?;
        CompoundFeature::new(basis)
    }
}

/// Ordered features with parallel weights and a duplicate index.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    features: Vec<CompoundFeature>,
    weights: Vec<f64>,
    index: HashMap<CompoundFeature, usize>,
}

impl PartialEq for FeatureSet {
    fn eq(&self, other: &Self) -> bool {
        self.features == other.features && self.weights == other.weights
    }
}

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (CompoundFeature, f64)>) -> Self {
        let mut fs = FeatureSet::new();
        for (f, w) in pairs {
            fs.push(f, w);
        }
        fs
    }

    /// Appends `f` unless already present. Returns whether it was added.
    pub fn push(&mut self, f: CompoundFeature, weight: f64) -> bool {
        if self.index.contains_key(&f) {
            return false;
        }
        self.index.insert(f.clone(), self.features.len());
        self.features.push(f);
        self.weights.push(weight);
        true
    }

    pub fn contains(&self, f: &CompoundFeature) -> bool {
        self.index.contains_key(f)
    }

    pub fn position(&self, f: &CompoundFeature) -> Option<usize> {
        self.index.get(f).copied()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[CompoundFeature] {
        &self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) {
        assert_eq!(weights.len(), self.features.len());
        self.weights = weights;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CompoundFeature, f64)> {
        self.features.iter().zip(self.weights.iter().copied())
    }

    /// The features at `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> FeatureSet {
        FeatureSet::from_pairs(keep.iter().map(|&i| (self.features[i].clone(), self.weights[i])))
    }

    pub fn as_set(&self) -> HashSet<&CompoundFeature> {
        self.features.iter().collect()
    }

    /// One line per feature: `w=<weight> <compound>`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (f, w) in self.iter() {
            out.push_str(&format!("w={w} {f}\n"));
        }
        out
    }

    pub fn parse_line(line: &str) -> Result<(CompoundFeature, f64)> {
        let bad = || FeatureError::Parse(line.to_string());
        let rest = line.trim().strip_prefix("w=").ok_or_else(bad)?;
        let (w, f) = rest.split_once(' ').ok_or_else(bad)?;
        let w: f64 = w.parse().map_err(|_| bad())?;
        if !w.is_finite() {
            return Err(bad());
        }
        Ok((f.parse()?, w))
    }
}

/// One prediction context: position `t` of a melody.
#[derive(Debug, Clone)]
pub struct Datum {
    pub view: Arc<SequenceView>,
    pub t: usize,
}

impl Datum {
    pub fn truth(&self) -> i32 {
        self.view.pitches()[self.t]
    }
}

/// Sequence views plus one datum per event.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub views: Vec<Arc<SequenceView>>,
    pub ids: Vec<String>,
    pub data: Vec<Datum>,
    /// Index range into `data` for each sequence.
    pub ranges: Vec<std::ops::Range<usize>>,
}

/// How key estimates are attached to sequence views.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPolicy {
    pub profiles: KeyProfiles,
    pub duration_weighted: bool,
}

impl DataSet {
    /// Views for every sequence; keys come from the whole sequence when a
    /// policy is given.
    pub fn from_corpus(corpus: &Corpus, keys: Option<&KeyPolicy>) -> Self {
        let views: Vec<Arc<SequenceView>> = corpus
            .sequences
            .iter()
            .map(|s| {
                let key = keys.map(|k| find_key(s, &k.profiles, k.duration_weighted));
                Arc::new(SequenceView::new(s, key))
            })
            .collect();
        let ids = corpus.sequences.iter().map(|s| s.id.clone()).collect();
        DataSet::from_views(views, ids)
    }

    pub fn from_views(views: Vec<Arc<SequenceView>>, ids: Vec<String>) -> Self {
        let mut data = Vec::new();
        let mut ranges = Vec::with_capacity(views.len());
        for view in &views {
            let start = data.len();
            for t in 0..view.len() {
                data.push(Datum {
                    view: Arc::clone(view),
                    t,
                });
            }
            ranges.push(start..data.len());
        }
        DataSet {
            views,
            ids,
            data,
            ranges,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// 1 iff every basis feature of `f` holds for `datum` with `outcome` as the
/// pitch at the predicted position. Undefined values and offsets reaching
/// before the start never match.
pub fn evaluate(f: &CompoundFeature, datum: &Datum, outcome: i32) -> bool {
    f.basis().iter().all(|b| {
        let sigma = b.sigma as usize;
        if sigma > datum.t {
            return false;
        }
        let value = if sigma == 0 {
            datum.view.value_at(b.viewpoint, datum.t, outcome)
        } else {
            datum.view.value(b.viewpoint, datum.t - sigma)
        };
        value.is_some_and(|v| b.value.matches(&v))
    })
}

/// Sparse binary tensor over (datum, outcome, feature). Row `d·|X| + y`
/// lists, in increasing order, the features firing for datum `d` when the
/// outcome is `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_data: usize,
    n_outcomes: usize,
    n_features: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    true_outcome: Vec<usize>,
}

impl FeatureMatrix {
    /// Builds a matrix from explicit rows; `rows[d][y]` lists firing
    /// features. Mainly for tests and synthetic problems.
    pub fn from_rows(rows: Vec<Vec<Vec<u32>>>, n_outcomes: usize, n_features: usize, true_outcome: Vec<usize>) -> Self {
        assert_eq!(rows.len(), true_outcome.len());
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        for datum in rows {
            assert_eq!(datum.len(), n_outcomes);
            for mut r in datum {
                r.sort_unstable();
                r.dedup();
                assert!(r.iter().all(|&c| (c as usize) < n_features));
                cols.extend(r);
                row_ptr.push(cols.len());
            }
        }
        assert!(true_outcome.iter().all(|&y| y < n_outcomes));
        FeatureMatrix {
            n_data: true_outcome.len(),
            n_outcomes,
            n_features,
            row_ptr,
            cols,
            true_outcome,
        }
    }

    pub fn n_data(&self) -> usize {
        self.n_data
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn true_outcome(&self, d: usize) -> usize {
        self.true_outcome[d]
    }

    pub fn row(&self, d: usize, y: usize) -> &[u32] {
        let r = d * self.n_outcomes + y;
        &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn get(&self, d: usize, f: usize, y: usize) -> bool {
        self.row(d, y).binary_search(&(f as u32)).is_ok()
    }

    /// Number of (datum, outcome) cells where each feature fires.
    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_features];
        for &c in &self.cols {
            counts[c as usize] += 1;
        }
        counts
    }

    /// Keeps the listed columns (ascending), renumbered 0..keep.len().
    pub fn select_columns(&self, keep: &[usize]) -> FeatureMatrix {
        let mut remap = vec![u32::MAX; self.n_features];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new as u32;
        }
        let mut row_ptr = Vec::with_capacity(self.row_ptr.len());
        row_ptr.push(0);
        let mut cols = Vec::new();
        for r in 0..self.row_ptr.len() - 1 {
            for &c in &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]] {
                let n = remap[c as usize];
                if n != u32::MAX {
                    cols.push(n);
                }
            }
            row_ptr.push(cols.len());
        }
        FeatureMatrix {
            n_data: self.n_data,
            n_outcomes: self.n_outcomes,
            n_features: keep.len(),
            row_ptr,
            cols,
            true_outcome: self.true_outcome.clone(),
        }
    }

    /// The rows of the listed data, in that order.
    pub fn select_data(&self, data: &[usize]) -> FeatureMatrix {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        for &d in data {
            for y in 0..self.n_outcomes {
                cols.extend_from_slice(self.row(d, y));
                row_ptr.push(cols.len());
            }
        }
        FeatureMatrix {
            n_data: data.len(),
            n_outcomes: self.n_outcomes,
            n_features: self.n_features,
            row_ptr,
            cols,
            true_outcome: data.iter().map(|&d| self.true_outcome[d]).collect(),
        }
    }
}

/// Outcome lists per σ=0 (viewpoint, value) for one datum.
fn outcome_index(datum: &Datum, alphabet: &Alphabet, vps: &[ViewpointId]) -> HashMap<(ViewpointId, ViewpointValue), Vec<u32>> {
    let mut index: HashMap<(ViewpointId, ViewpointValue), Vec<u32>> = HashMap::new();
    for &vp in vps {
        for (y, &pitch) in alphabet.pitches().iter().enumerate() {
            if let Some(v) = datum.view.value_at(vp, datum.t, pitch) {
                for fv in v.feature_values() {
                    index.entry((vp, fv)).or_default().push(y as u32);
                }
            }
        }
    }
    index
}

fn intersect(a: &[u32], b: &[u32]) -> Vec<u32> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn datum_rows(datum: &Datum, features: &[CompoundFeature], alphabet: &Alphabet, vps: &[ViewpointId]) -> Vec<Vec<u32>> {
    let index = outcome_index(datum, alphabet, vps);
    let mut rows = vec![Vec::new(); alphabet.len()];
    'features: for (fi, f) in features.iter().enumerate() {
        // past bases do not depend on the outcome, so test them once
        for b in f.basis().iter().filter(|b| b.sigma > 0) {
            let s = b.sigma as usize;
            if s > datum.t {
                continue 'features;
            }
            match datum.view.value(b.viewpoint, datum.t - s) {
                Some(v) if b.value.matches(&v) => {}
                _ => continue 'features,
            }
        }
        let mut outcomes: Option<Vec<u32>> = None;
        for b in f.basis().iter().filter(|b| b.sigma == 0) {
            let Some(list) = index.get(&(b.viewpoint, b.value)) else {
                continue 'features;
            };
            outcomes = Some(match outcomes {
                None => list.clone(),
                Some(prev) => intersect(&prev, list),
            });
        }
        for y in outcomes.unwrap_or_default() {
            rows[y as usize].push(fi as u32);
        }
    }
    rows
}

/// Features firing for each outcome of a single datum; the datum's own
/// pitch is never consulted, so this also works for open contexts.
pub fn firing(datum: &Datum, fs: &FeatureSet, alphabet: &Alphabet) -> Vec<Vec<u32>> {
    let vps: Vec<ViewpointId> = predicted_viewpoints(fs);
    datum_rows(datum, fs.features(), alphabet, &vps)
}

fn predicted_viewpoints(fs: &FeatureSet) -> Vec<ViewpointId> {
    fs.features()
        .iter()
        .flat_map(|f| f.basis().iter().filter(|b| b.sigma == 0).map(|b| b.viewpoint))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Evaluates every feature on every (datum, outcome) cell. Data are
/// processed in parallel and concatenated in input order, so the result does
/// not depend on the thread count.
///
/// Panics if a datum's true pitch is outside the alphabet.
pub fn build_matrix(data: &[Datum], fs: &FeatureSet, alphabet: &Alphabet) -> FeatureMatrix {
    let vps = predicted_viewpoints(fs);
    let per_datum: Vec<Vec<Vec<u32>>> = data
        .par_iter()
        .map(|d| datum_rows(d, fs.features(), alphabet, &vps))
        .collect();
    let true_outcome = data
        .iter()
        .map(|d| {
            alphabet
                .index_of(d.truth())
                .unwrap_or_else(|| panic!("pitch {} is not in the alphabet", d.truth()))
        })
        .collect();
    let mut row_ptr = Vec::with_capacity(data.len() * alphabet.len() + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    for rows in per_datum {
        for r in rows {
            cols.extend(r);
            row_ptr.push(cols.len());
        }
    }
    FeatureMatrix {
        n_data: data.len(),
        n_outcomes: alphabet.len(),
        n_features: fs.len(),
        row_ptr,
        cols,
        true_outcome,
    }
}

/// Drops features that fire on no (datum, outcome) cell. Returns the kept
/// set, its matrix, and the kept indices into the input set.
pub fn filter_irrelevant(fs: &FeatureSet, m: &FeatureMatrix) -> (FeatureSet, FeatureMatrix, Vec<usize>) {
    let keep: Vec<usize> = m
        .column_counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, _)| i)
        .collect();
    (fs.select(&keep), m.select_columns(&keep), keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EventSequence;
    use crate::viewpoints::Mode;

    fn int(v: i32) -> ViewpointValue {
        ViewpointValue::Int(v)
    }

    fn b(vp: ViewpointId, sigma: u32, v: i32) -> BasisFeature {
        BasisFeature::new(vp, sigma, int(v)).unwrap()
    }

    fn datum(pitches: &[i32], t: usize) -> Datum {
        let s = EventSequence::from_pitches("x", pitches).unwrap();
        Datum {
            view: Arc::new(SequenceView::new(&s, None)),
            t,
        }
    }

    #[test]
    fn pitch_feature_fires_on_its_outcome() {
        let f = CompoundFeature::single(ViewpointId::P, int(62)).unwrap();
        let d = datum(&[60, 0], 1);
        assert!(evaluate(&f, &d, 62));
        assert!(!evaluate(&f, &d, 60));
    }

    #[test]
    fn interval_feature_uses_previous_pitch() {
        let f = CompoundFeature::single(ViewpointId::I, int(2)).unwrap();
        assert!(evaluate(&f, &datum(&[60, 0], 1), 62));
        // undefined at the start
        assert!(!evaluate(&f, &datum(&[60], 0), 62));
    }

    #[test]
    fn gram_with_a_hole() {
        let f = CompoundFeature::new(vec![b(ViewpointId::P, 2, 60), b(ViewpointId::P, 0, 60)]).unwrap();
        assert!(evaluate(&f, &datum(&[60, 57, 0], 2), 60));
        assert!(!evaluate(&f, &datum(&[57, 60, 0], 2), 60));
        assert_eq!(f.holes(), 1);
    }

    #[test]
    fn compound_validation() {
        assert_eq!(CompoundFeature::new(vec![]), Err(FeatureError::Empty));
        assert!(matches!(
            CompoundFeature::new(vec![b(ViewpointId::P, 1, 60)]),
            Err(FeatureError::NotPredictive(_))
        ));
        assert!(matches!(
            CompoundFeature::new(vec![b(ViewpointId::M, 0, 2)]),
            Err(FeatureError::NotPredictive(_))
        ));
        assert!(matches!(
            CompoundFeature::new(vec![b(ViewpointId::P, 0, 60), b(ViewpointId::P, 0, 62)]),
            Err(FeatureError::Duplicate { .. })
        ));
        assert!(BasisFeature::new(ViewpointId::F1, 1, int(3)).is_err());
        assert!(BasisFeature::new(ViewpointId::C, 0, int(3)).is_err());
    }

    #[test]
    fn canonical_order_is_structural() {
        let a = CompoundFeature::new(vec![b(ViewpointId::I, 1, 2), b(ViewpointId::P, 0, 60), b(ViewpointId::P, 2, 55)]).unwrap();
        let c = CompoundFeature::new(vec![b(ViewpointId::P, 2, 55), b(ViewpointId::I, 1, 2), b(ViewpointId::P, 0, 60)]).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.to_string(), "P[σ=2,ν=55] & P[σ=0,ν=60] & I[σ=1,ν=2]");
    }

    #[test]
    fn feature_line_round_trip() {
        let f = CompoundFeature::new(vec![
            b(ViewpointId::I, 1, -3),
            BasisFeature::new(ViewpointId::MK, 0, ViewpointValue::Linked(3, crate::viewpoints::Inner::Key(Mode::Minor, 7))).unwrap(),
        ])
        .unwrap();
        let fs = FeatureSet::from_pairs([(f.clone(), -0.125)]);
        let line = fs.to_lines();
        assert_eq!(FeatureSet::parse_line(line.trim()).unwrap(), (f, -0.125));
        assert!(FeatureSet::parse_line("w=nan P[σ=0,ν=60]").is_err());
    }

    #[test]
    fn feature_set_rejects_duplicates() {
        let f = CompoundFeature::single(ViewpointId::P, int(60)).unwrap();
        let mut fs = FeatureSet::new();
        assert!(fs.push(f.clone(), 0.0));
        assert!(!fs.push(f, 1.0));
        assert_eq!(fs.len(), 1);
    }

    #[test]
    fn empty_and_dead_matrices() {
        let s = EventSequence::from_pitches("a", &[60, 62, 64]).unwrap();
        let corpus = Corpus::new(vec![s]).unwrap();
        let ds = DataSet::from_corpus(&corpus, None);
        let m = build_matrix(&ds.data, &FeatureSet::new(), &corpus.alphabet);
        assert_eq!((m.n_features(), m.nnz()), (0, 0));
        let dead = FeatureSet::from_pairs([(CompoundFeature::single(ViewpointId::P, int(70)).unwrap(), 0.0)]);
        let m = build_matrix(&ds.data, &dead, &corpus.alphabet);
        assert_eq!((m.n_features(), m.nnz()), (1, 0));
        let (kept, km, idx) = filter_irrelevant(&dead, &m);
        assert!(kept.is_empty() && km.n_features() == 0 && idx.is_empty());
    }

    #[test]
    fn filter_drops_only_dead_columns() {
        let s = EventSequence::from_pitches("a", &[60, 62, 64]).unwrap();
        let corpus = Corpus::new(vec![s]).unwrap();
        let ds = DataSet::from_corpus(&corpus, None);
        let fs = FeatureSet::from_pairs([
            (CompoundFeature::single(ViewpointId::P, int(60)).unwrap(), 0.5),
            (CompoundFeature::single(ViewpointId::I, int(11)).unwrap(), 0.25),
            (CompoundFeature::single(ViewpointId::C, int(1)).unwrap(), 0.75),
        ]);
        let m = build_matrix(&ds.data, &fs, &corpus.alphabet);
        let (kept, km, idx) = filter_irrelevant(&fs, &m);
        assert_eq!(idx, vec![0, 2]);
        assert_eq!(kept.weights(), &[0.5, 0.75]);
        assert_eq!(km.n_features(), 2);
    }
}
