//! An interpolated n-gram baseline and the rules that merge several
//! predictive distributions into one.
//!
//! Combination weights favour confident models: a distribution's weight is
//! `[(−Σ_s ln p(s)) / ln |X|]^(−b)`, so with `b = 0` all models count
//! equally and larger `b` trusts sharper distributions more.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{Alphabet, Corpus};
use crate::model::PredictiveDistribution;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("distribution mismatch: {0}")]
    Mismatch(String),
    #[error("distribution file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

/// Bias exponents tried when choosing `b` on training data.
pub const BIAS_GRID: [f64; 9] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 16.0, 32.0];

/// Counts of outcomes after every context of length 0..order, blended
/// linearly with weight ∝ (k+1) for context length k.
///
/// Length 0 uses add-one smoothing, so no outcome ever gets probability 0.
/// Longer contexts contribute their maximum-likelihood estimate only when
/// they have been seen.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    n_outcomes: usize,
    // counts[k]: context of length k -> outcome counts
    counts: Vec<HashMap<Vec<usize>, Vec<u32>>>,
}

impl NGramModel {
    /// `order` is the n-gram length, so contexts have up to `order − 1`
    /// symbols. Order 1 is the add-one unigram.
    pub fn new(order: usize, n_outcomes: usize) -> Self {
        assert!(order >= 1, "n-gram order must be at least 1");
        assert!(n_outcomes >= 1, "empty alphabet");
        NGramModel {
            order,
            n_outcomes,
            counts: vec![HashMap::new(); order],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Counts every n-gram of `seq` (outcome indices).
    pub fn observe_sequence(&mut self, seq: &[usize]) {
        for t in 0..seq.len() {
            self.observe(&seq[..t], seq[t]);
        }
    }

    /// Counts `next` after each suffix of `history` up to the model order.
    pub fn observe(&mut self, history: &[usize], next: usize) {
        assert!(next < self.n_outcomes, "outcome out of range");
        for k in 0..self.order.min(history.len() + 1) {
            let ctx = history[history.len() - k..].to_vec();
            let row = self.counts[k].entry(ctx).or_insert_with(|| vec![0; self.n_outcomes]);
            row[next] += 1;
        }
    }

    pub fn fit(corpus: &Corpus, order: usize) -> Self {
        let mut m = NGramModel::new(order, corpus.alphabet.len());
        for s in &corpus.sequences {
            m.observe_sequence(&indices(s.pitches().iter().copied(), &corpus.alphabet));
        }
        m
    }

    pub fn predict(&self, history: &[usize]) -> PredictiveDistribution {
        let n = self.n_outcomes;
        let empty = vec![0; n];
        let unigram = self.counts[0].get(&Vec::new()).unwrap_or(&empty);
        let total: u32 = unigram.iter().sum();
        let mut p: Vec<f64> = unigram
            .iter()
            .map(|&c| (c as f64 + 1.0) / (total as f64 + n as f64))
            .collect();
        let mut weight_sum = 1.0;
        for k in 1..self.order.min(history.len() + 1) {
            let ctx = &history[history.len() - k..];
            let Some(row) = self.counts[k].get(ctx) else { continue };
            let total: u32 = row.iter().sum();
            let w = (k + 1) as f64;
            for (pi, &c) in p.iter_mut().zip(row) {
                *pi = *pi * weight_sum / (weight_sum + w) + w / (weight_sum + w) * c as f64 / total as f64;
            }
            weight_sum += w;
        }
        PredictiveDistribution::from_weights(p)
    }

    /// Distributions for every event of `seq`, each from the preceding
    /// events only.
    pub fn predict_sequence(&self, seq: &[usize]) -> Vec<PredictiveDistribution> {
        (0..seq.len()).map(|t| self.predict(&seq[..t])).collect()
    }

    /// Online short-term use: predict each event, then count it.
    pub fn predict_online(order: usize, n_outcomes: usize, seq: &[usize]) -> Vec<PredictiveDistribution> {
        let mut m = NGramModel::new(order, n_outcomes);
        let mut out = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            out.push(m.predict(&seq[..t]));
            m.observe(&seq[..t], seq[t]);
        }
        out
    }
}

/// Outcome indices of `pitches`; panics on a pitch outside the alphabet.
pub fn indices(pitches: impl IntoIterator<Item = i32>, alphabet: &Alphabet) -> Vec<usize> {
    pitches
        .into_iter()
        .map(|p| alphabet.index_of(p).unwrap_or_else(|| panic!("pitch {p} is not in the alphabet")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinationRule {
    Sum,
    Product,
}

impl fmt::Display for CombinationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombinationRule::Sum => "sum",
            CombinationRule::Product => "product",
        })
    }
}

impl FromStr for CombinationRule {
    type Err = EnsembleError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sum" => Ok(CombinationRule::Sum),
            "product" => Ok(CombinationRule::Product),
            other => Err(EnsembleError::Argument(format!("unknown combination rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinationConfig {
    pub rule: CombinationRule,
    pub bias: f64,
}

impl CombinationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bias >= 0.0 && self.bias.is_finite()) {
            return Err(EnsembleError::Argument(format!("bias must be finite and non-negative, got {}", self.bias)));
        }
        Ok(())
    }
}

/// `[(−Σ_s ln p(s)) / ln |X|]^(−b)`. A distribution with a zero entry has an
/// infinite bracket and gets weight 0 for any `b > 0`.
pub fn entropy_weight(p: &PredictiveDistribution, bias: f64) -> f64 {
    if bias == 0.0 {
        return 1.0;
    }
    let n = p.len() as f64;
    if n < 2.0 {
        return 1.0;
    }
    let bracket: f64 = p.probs().iter().map(|x| -x.ln()).sum::<f64>() / n.ln();
    bracket.powf(-bias)
}

pub fn combine(dists: &[&PredictiveDistribution], cfg: &CombinationConfig) -> Result<PredictiveDistribution> {
    cfg.validate()?;
    let Some(first) = dists.first() else {
        return Err(EnsembleError::Argument("nothing to combine".into()));
    };
    let n = first.len();
    if let Some(bad) = dists.iter().find(|d| d.len() != n) {
        return Err(EnsembleError::Mismatch(format!("distribution over {} outcomes combined with one over {n}", bad.len())));
    }
    let mut w: Vec<f64> = dists.iter().map(|d| entropy_weight(d, cfg.bias)).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        // every source has a zero entry; fall back to equal trust
        w = vec![1.0; dists.len()];
    }
    let total: f64 = w.iter().sum();
    match cfg.rule {
        CombinationRule::Sum => {
            let p = (0..n)
                .map(|y| dists.iter().zip(&w).map(|(d, wi)| wi * d.prob(y)).sum::<f64>() / total)
                .collect();
            Ok(PredictiveDistribution::from_weights(p))
        }
        CombinationRule::Product => {
            let scores: Vec<f64> = (0..n)
                .map(|y| {
                    dists
                        .iter()
                        .zip(&w)
                        .filter(|(_, wi)| **wi > 0.0)
                        .map(|(d, wi)| wi * d.prob(y).ln())
                        .sum::<f64>()
                        / total
                })
                .collect();
            if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
                return Err(EnsembleError::Mismatch("sources have disjoint support; the product is empty".into()));
            }
            Ok(PredictiveDistribution::from_scores(&scores))
        }
    }
}

/// Mean −log2 p(truth) over aligned events.
pub fn mean_bits(dists: &[PredictiveDistribution], truths: &[usize]) -> f64 {
    assert_eq!(dists.len(), truths.len(), "one truth per distribution");
    if dists.is_empty() {
        return 0.0;
    }
    dists.iter().zip(truths).map(|(d, &y)| d.bits(y)).sum::<f64>() / dists.len() as f64
}

/// Combines aligned per-event distributions from several sources.
pub fn combine_streams(sources: &[Vec<PredictiveDistribution>], cfg: &CombinationConfig) -> Result<Vec<PredictiveDistribution>> {
    let Some(first) = sources.first() else {
        return Err(EnsembleError::Argument("no sources".into()));
    };
    if let Some(bad) = sources.iter().find(|s| s.len() != first.len()) {
        return Err(EnsembleError::Mismatch(format!("{} events against {}", bad.len(), first.len())));
    }
    (0..first.len())
        .map(|e| {
            let ds: Vec<&PredictiveDistribution> = sources.iter().map(|s| &s[e]).collect();
            combine(&ds, cfg)
        })
        .collect()
}

/// Picks the grid bias with the lowest mean bits; the first grid value wins
/// ties. Returns the bias and its score.
pub fn select_bias(sources: &[Vec<PredictiveDistribution>], truths: &[usize], rule: CombinationRule, grid: &[f64]) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(EnsembleError::Argument("empty bias grid".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for &b in grid {
        let merged = combine_streams(sources, &CombinationConfig { rule, bias: b })?;
        let bits = mean_bits(&merged, truths);
        if best.is_none_or(|(_, bb)| bits < bb) {
            best = Some((b, bits));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Writes `sequence_id,t,p_1..p_|X|` rows; column p_i is the i-th pitch of
/// the alphabet in ascending order.
pub fn write_distributions<W: Write>(out: W, corpus: &Corpus, dists: &[Vec<PredictiveDistribution>]) -> Result<()> {
    if dists.len() != corpus.len() {
        return Err(EnsembleError::Mismatch(format!("{} sequences of distributions for {} sequences", dists.len(), corpus.len())));
    }
    let n = corpus.alphabet.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sequence_id".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("p_{i}")));
    w.write_record(&header)?;
    for (s, ds) in corpus.sequences.iter().zip(dists) {
        if ds.len() != s.len() {
            return Err(EnsembleError::Mismatch(format!("sequence {} has {} events but {} distributions", s.id, s.len(), ds.len())));
        }
        for (t, d) in ds.iter().enumerate() {
            if d.len() != n {
                return Err(EnsembleError::Mismatch(format!("sequence {} t={t}: {} outcomes, alphabet has {n}", s.id, d.len())));
            }
            let mut rec = vec![s.id.clone(), t.to_string()];
            rec.extend(d.probs().iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads distributions written by an external predictor and aligns them with
/// `corpus`. Every sequence must be covered, each with exactly one row per
/// event and `t` running 0, 1, ... in order. Rows are renormalized when they
/// sum to 1 within 1e−6.
pub fn read_distributions<R: Read>(input: R, corpus: &Corpus) -> Result<Vec<Vec<PredictiveDistribution>>> {
    let n = corpus.alphabet.len();
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header_len = r.headers()?.len();
    if header_len != n + 2 {
        return Err(EnsembleError::Parse {
            line: 1,
            message: format!("expected {} columns (id, t and {n} probabilities), found {header_len}", n + 2),
        });
    }
    let index: HashMap<&str, usize> = corpus.sequences.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut out: Vec<Vec<PredictiveDistribution>> = vec![Vec::new(); corpus.len()];
    for (row, rec) in r.records().enumerate() {
        let line = row + 2;
        let rec = rec?;
        let err = |message: String| EnsembleError::Parse { line, message };
        if rec.len() != n + 2 {
            return Err(err(format!("expected {} columns, found {}", n + 2, rec.len())));
        }
        let id = &rec[0];
        let &si = index.get(id).ok_or_else(|| err(format!("unknown sequence {id:?}")))?;
        let t: usize = rec[1].trim().parse().map_err(|_| err(format!("bad position {:?}", &rec[1])))?;
        if t != out[si].len() {
            return Err(err(format!("sequence {id}: expected t={}, found t={t}", out[si].len())));
        }
        if t >= corpus.sequences[si].len() {
            return Err(err(format!("sequence {id} has only {} events", corpus.sequences[si].len())));
        }
        let probs = rec
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(e.to_string()))?;
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(err("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(err(format!("probabilities sum to {total}")));
        }
        out[si].push(PredictiveDistribution::from_weights(probs));
    }
    for (s, ds) in corpus.sequences.iter().zip(&out) {
        if ds.len() != s.len() {
            return Err(EnsembleError::Mismatch(format!("sequence {} has {} events but {} rows", s.id, s.len(), ds.len())));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EventSequence;

    fn dist(p: &[f64]) -> PredictiveDistribution {
        PredictiveDistribution::from_weights(p.to_vec())
    }

    #[test]
    fn empty_counts_are_uniform() {
        let m = NGramModel::new(3, 4);
        assert_eq!(m.predict(&[1, 2]).probs(), &[0.25; 4]);
    }

    #[test]
    fn unigram_is_add_one() {
        let mut m = NGramModel::new(1, 2);
        m.observe_sequence(&[0, 0, 1]);
        // ML 2/3 pulled toward 1/2 with weights 3/5 and 2/5
        let p = m.predict(&[1]);
        assert!((p.prob(0) - (0.6 * 2.0 / 3.0 + 0.4 * 0.5)).abs() < 1e-12);
        assert!((p.prob(0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn bigram_blend_by_hand() {
        let mut m = NGramModel::new(2, 2);
        m.observe_sequence(&[0, 1, 0, 1]);
        // unigram add-one: (2+1)/(4+2) each; after 0 the continuation is always 1
        let p = m.predict(&[0]);
        let expected = (1.0 * 0.5 + 2.0 * 1.0) / 3.0;
        assert!((p.prob(1) - expected).abs() < 1e-12);
    }

    #[test]
    fn online_prediction_is_causal() {
        let a = NGramModel::predict_online(3, 3, &[0, 1, 2, 0, 1]);
        let b = NGramModel::predict_online(3, 3, &[0, 1, 2, 2, 2]);
        assert_eq!(a[..4], b[..4]);
        assert_eq!(a[0].probs(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn sum_b0_is_plain_mean() {
        let a = dist(&[0.8, 0.2]);
        let b = dist(&[0.2, 0.8]);
        let cfg = CombinationConfig {
            rule: CombinationRule::Sum,
            bias: 0.0,
        };
        let c = combine(&[&a, &b], &cfg).unwrap();
        assert!((c.prob(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_weight_is_two_to_minus_b() {
        let u = PredictiveDistribution::uniform(2);
        for b in [0.0, 1.0, 3.0] {
            assert!((entropy_weight(&u, b) - 2f64.powf(-b)).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let cfg = CombinationConfig {
            rule: CombinationRule::Product,
            bias: 1.0,
        };
        assert!(combine(&[&dist(&[0.5, 0.5]), &dist(&[0.2, 0.3, 0.5])], &cfg).is_err());
        assert!(combine(&[], &cfg).is_err());
    }

    #[test]
    fn csv_round_trip_and_checks() {
        let corpus = Corpus::new(vec![
            EventSequence::from_pitches("a", &[60, 62]).unwrap(),
            EventSequence::from_pitches("b", &[62]).unwrap(),
        ])
        .unwrap();
        let d = vec![vec![dist(&[0.25, 0.75]), dist(&[0.5, 0.5])], vec![dist(&[1.0, 0.0])]];
        let mut buf = Vec::new();
        write_distributions(&mut buf, &corpus, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sequence_id,t,p_1,p_2\n"));
        assert_eq!(read_distributions(&buf[..], &corpus).unwrap(), d);

        let three = "sequence_id,t,p_1,p_2,p_3\na,0,0.2,0.3,0.5\n";
        assert!(read_distributions(three.as_bytes(), &corpus).is_err());
        let short = "sequence_id,t,p_1,p_2\na,0,0.5,0.5\na,1,0.5,0.5\n";
        assert!(matches!(read_distributions(short.as_bytes(), &corpus), Err(EnsembleError::Mismatch(_))));
        let skipped = "sequence_id,t,p_1,p_2\na,1,0.5,0.5\n";
        assert!(read_distributions(skipped.as_bytes(), &corpus).is_err());
    }
}
