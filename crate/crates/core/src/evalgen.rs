//! Evaluation by cross-entropy and accuracy, melody generation, and
//! summaries of what a trained model has learned.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Alphabet, Corpus, EventSequence};
use crate::ensemble::NGramModel;
use crate::features::CompoundFeature;
use crate::model::PredictiveDistribution;
use crate::pulse::TrainedModel;
use crate::viewpoints::{find_key, metrical_weights, KeyEstimate, SequenceView, ViewpointId, ViewpointValue};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sequence {id}: {got} distributions for {expected} events")]
    Length { id: String, expected: usize, got: usize },
    #[error("pitch {0} is not in the model alphabet")]
    UnknownPitch(i32),
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub id: String,
    pub events: usize,
    pub mean_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScore>,
    /// Mean −log2 p over all events; infinite when some true event had
    /// probability zero.
    pub mean_bits: f64,
    pub events: usize,
    pub accuracy: f64,
    /// (sequence id, position) of every true event with probability zero.
    pub zero_probability: Vec<(String, usize)>,
}

/// Scores per-event distributions against the true pitches of `corpus`.
pub fn cross_entropy(corpus: &Corpus, dists: &[Vec<PredictiveDistribution>]) -> Result<EvalReport> {
    if dists.len() != corpus.len() {
        return Err(EvalError::Config(format!("{} sequences of distributions for {} sequences", dists.len(), corpus.len())));
    }
    let mut sequences = Vec::with_capacity(corpus.len());
    let mut total = 0.0;
    let mut events = 0;
    let mut correct = 0;
    let mut zero_probability = Vec::new();
    for (s, ds) in corpus.sequences.iter().zip(dists) {
        if ds.len() != s.len() {
            return Err(EvalError::Length {
                id: s.id.clone(),
                expected: s.len(),
                got: ds.len(),
            });
        }
        let mut seq_bits = 0.0;
        for (t, (e, d)) in s.events.iter().zip(ds).enumerate() {
            let y = corpus.alphabet.index_of(e.pitch).ok_or(EvalError::UnknownPitch(e.pitch))?;
            let bits = d.bits(y);
            if bits.is_infinite() {
                zero_probability.push((s.id.clone(), t));
            }
            seq_bits += bits;
            correct += usize::from(d.argmax() == y);
        }
        total += seq_bits;
        events += s.len();
        sequences.push(SequenceScore {
            id: s.id.clone(),
            events: s.len(),
            mean_bits: if s.is_empty() { 0.0 } else { seq_bits / s.len() as f64 },
        });
    }
    let mean = |x: f64| if events == 0 { 0.0 } else { x / events as f64 };
    Ok(EvalReport {
        sequences,
        mean_bits: mean(total),
        events,
        accuracy: mean(correct as f64),
        zero_probability,
    })
}

/// (t, pitch, bits) for every event of one sequence.
pub fn entropy_profile(seq: &EventSequence, dists: &[PredictiveDistribution], alphabet: &Alphabet) -> Result<Vec<(usize, i32, f64)>> {
    if dists.len() != seq.len() {
        return Err(EvalError::Length {
            id: seq.id.clone(),
            expected: seq.len(),
            got: dists.len(),
        });
    }
    seq.events
        .iter()
        .zip(dists)
        .enumerate()
        .map(|(t, (e, d))| {
            let y = alphabet.index_of(e.pitch).ok_or(EvalError::UnknownPitch(e.pitch))?;
            Ok((t, e.pitch, d.bits(y)))
        })
        .collect()
}

/// Anything that can predict the next pitch of an open melody.
pub trait Predictor: Sync {
    fn alphabet(&self) -> &Alphabet;
    fn predict_next(&self, prefix: &[i32]) -> PredictiveDistribution;
}

/// A trained model scoring generated melodies as quarter notes in 4/4. The
/// key, when the model needs one, is estimated once from the prime.
pub struct ModelPredictor<'a> {
    model: &'a TrainedModel,
    key: Option<KeyEstimate>,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a TrainedModel, prime: &[i32]) -> Result<Self> {
        let key = match &model.keys {
            None => None,
            Some(_) if prime.is_empty() => {
                return Err(EvalError::Config("this model uses key features, so generation needs a non-empty prime".into()))
            }
            Some(policy) => {
                let seq = EventSequence::from_pitches("prime", prime).map_err(|e| EvalError::Config(e.to_string()))?;
                Some(find_key(&seq, &policy.profiles, policy.duration_weighted))
            }
        };
        Ok(ModelPredictor { model, key })
    }
}

impl Predictor for ModelPredictor<'_> {
    fn alphabet(&self) -> &Alphabet {
        &self.model.alphabet
    }

    fn predict_next(&self, prefix: &[i32]) -> PredictiveDistribution {
        let mut pitches = prefix.to_vec();
        // placeholder for the open position; its pitch is never read
        pitches.push(self.model.alphabet.pitch(0));
        let seq = EventSequence::from_pitches("open", &pitches).expect("quarter-note sequence is valid");
        let view = Arc::new(SequenceView::from_parts(pitches, metrical_weights(&seq), self.key));
        self.model.predict_at(&view, prefix.len())
    }
}

pub struct NGramPredictor<'a> {
    pub model: &'a NGramModel,
    pub alphabet: &'a Alphabet,
}

impl Predictor for NGramPredictor<'_> {
    fn alphabet(&self) -> &Alphabet {
        self.alphabet
    }

    fn predict_next(&self, prefix: &[i32]) -> PredictiveDistribution {
        let idx: Vec<usize> = prefix
            .iter()
            .map(|p| self.alphabet.index_of(*p).expect("prefix pitch in alphabet"))
            .collect();
        self.model.predict(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMethod {
    Beam,
    IterativeRandomWalk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub method: GenerationMethod,
    pub beams: usize,
    /// A walk step may pick y only if p(y) ≥ threshold · max p.
    pub threshold: f64,
    /// Total length including the prime.
    pub length: usize,
    pub prime: Vec<i32>,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            method: GenerationMethod::Beam,
            beams: 5,
            threshold: 0.65,
            length: 32,
            prime: Vec::new(),
            restarts: 20,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, alphabet: &Alphabet) -> Result<()> {
        if self.beams == 0 {
            return Err(EvalError::Config("at least one beam is needed".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(EvalError::Config(format!("walk threshold must lie in (0, 1], got {}", self.threshold)));
        }
        if self.restarts == 0 {
            return Err(EvalError::Config("at least one walk is needed".into()));
        }
        if self.length < self.prime.len() {
            return Err(EvalError::Config(format!("target length {} is shorter than the prime", self.length)));
        }
        if let Some(p) = self.prime.iter().find(|p| !alphabet.contains(**p)) {
            return Err(EvalError::UnknownPitch(*p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Prime followed by the generated continuation.
    pub pitches: Vec<i32>,
    pub prime_len: usize,
    /// Mean −log2 p of the generated events under the unrestricted model.
    pub mean_bits: f64,
}

impl Generated {
    /// Corpus line with uniform quarter-note durations.
    pub fn to_sequence(&self, id: &str) -> EventSequence {
        EventSequence::from_pitches(id, &self.pitches).expect("quarter-note sequence is valid")
    }
}

fn finish(pitches: Vec<i32>, prime_len: usize, bits: f64) -> Generated {
    let n = pitches.len() - prime_len;
    Generated {
        mean_bits: if n == 0 { 0.0 } else { bits / n as f64 },
        pitches,
        prime_len,
    }
}

/// Keeps the k best continuations by total log-probability. Every beam
/// proposes its k best extensions and all k·k compete; equal scores are
/// broken by the lexicographically smaller pitch sequence.
pub fn beam_search(pred: &dyn Predictor, cfg: &GenerationConfig) -> Result<Generated> {
    cfg.validate(pred.alphabet())?;
    let alphabet = pred.alphabet();
    let k = cfg.beams;
    // (bits so far, pitches)
    let mut beams: Vec<(f64, Vec<i32>)> = vec![(0.0, cfg.prime.clone())];
    for _ in cfg.prime.len()..cfg.length {
        let mut pool: Vec<(f64, Vec<i32>)> = Vec::with_capacity(beams.len() * k);
        for (bits, seq) in &beams {
            let d = pred.predict_next(seq);
            let mut ext: Vec<(f64, usize)> = (0..d.len()).map(|y| (bits + d.bits(y), y)).collect();
            ext.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(b, y) in ext.iter().take(k) {
                let mut s = seq.clone();
                s.push(alphabet.pitch(y));
                pool.push((b, s));
            }
        }
        pool.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        pool.truncate(k);
        beams = pool;
    }
    let (bits, best) = beams.swap_remove(0);
    Ok(finish(best, cfg.prime.len(), bits))
}

/// Always takes the most likely next pitch (the lowest on ties).
pub fn greedy(pred: &dyn Predictor, prime: &[i32], length: usize) -> Generated {
    let mut seq = prime.to_vec();
    let mut bits = 0.0;
    while seq.len() < length {
        let d = pred.predict_next(&seq);
        let y = d.argmax();
        bits += d.bits(y);
        seq.push(pred.alphabet().pitch(y));
    }
    finish(seq, prime.len(), bits)
}

/// Whether a walk may choose outcome `y` from `d`.
pub fn admissible(d: &PredictiveDistribution, y: usize, threshold: f64) -> bool {
    let max = d.prob(d.argmax());
    d.prob(y) >= threshold * max
}

fn walk(pred: &dyn Predictor, cfg: &GenerationConfig, rng: &mut ChaCha8Rng) -> Generated {
    let mut seq = cfg.prime.clone();
    let mut bits = 0.0;
    while seq.len() < cfg.length {
        let d = pred.predict_next(&seq);
        let allowed: Vec<usize> = (0..d.len()).filter(|&y| admissible(&d, y, cfg.threshold)).collect();
        let mass: f64 = allowed.iter().map(|&y| d.prob(y)).sum();
        let mut u = rng.gen::<f64>() * mass;
        let mut pick = *allowed.last().expect("the most likely outcome is always admissible");
        for &y in &allowed {
            u -= d.prob(y);
            if u < 0.0 {
                pick = y;
                break;
            }
        }
        bits += d.bits(pick);
        seq.push(pred.alphabet().pitch(pick));
    }
    finish(seq, cfg.prime.len(), bits)
}

/// Runs `restarts` thresholded random walks and returns the one with the
/// lowest mean bits (earliest walk on ties). Walk r draws from its own
/// stream of the seeded generator, so results do not depend on threads.
pub fn iterative_random_walk(pred: &dyn Predictor, cfg: &GenerationConfig) -> Result<Generated> {
    cfg.validate(pred.alphabet())?;
    let walks = random_walks(pred, cfg);
    Ok(walks
        .into_iter()
        .reduce(|best, w| if w.mean_bits < best.mean_bits { w } else { best })
        .expect("at least one walk"))
}

/// Every individual walk of [`iterative_random_walk`], in restart order.
pub fn random_walks(pred: &dyn Predictor, cfg: &GenerationConfig) -> Vec<Generated> {
    (0..cfg.restarts as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r);
            walk(pred, cfg, &mut rng)
        })
        .collect()
}

pub fn generate(pred: &dyn Predictor, cfg: &GenerationConfig) -> Result<Generated> {
    match cfg.method {
        GenerationMethod::Beam => beam_search(pred, cfg),
        GenerationMethod::IterativeRandomWalk => iterative_random_walk(pred, cfg),
    }
}

/// Name of a compound's feature type: its viewpoint tags joined by `&`.
pub fn feature_type(f: &CompoundFeature) -> String {
    f.viewpoints().iter().map(|v| v.tag()).collect::<Vec<_>>().join("&")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeShare {
    pub feature_type: String,
    pub count: usize,
    pub abs_weight: f64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Motif {
    pub length: usize,
    pub rank: usize,
    pub feature: CompoundFeature,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// (a) absolute weight per feature type, largest first.
    pub type_shares: Vec<TypeShare>,
    /// (b) single-basis features at offset 0: (viewpoint, value, weight).
    pub zero_order: Vec<(ViewpointId, ViewpointValue, f64)>,
    /// (c) highest-weight contiguous interval grams per length.
    pub motifs: Vec<Motif>,
    /// (d) absolute weight by (largest offset, compound length).
    pub extent: BTreeMap<(u32, usize), f64>,
    /// (e) feature count by (compound length, holes).
    pub holes: BTreeMap<(usize, u32), usize>,
}

/// Summaries (a)–(e) of a model's features. `motif_lengths` are compound
/// lengths (number of intervals); `top` motifs are kept per length.
pub fn analyze(model: &TrainedModel, motif_lengths: &[usize], top: usize) -> Analysis {
    let fs = &model.features;
    let total: f64 = fs.weights().iter().map(|w| w.abs()).sum();

    let mut by_type: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (f, w) in fs.iter() {
        let e = by_type.entry(feature_type(f)).or_default();
        e.0 += 1;
        e.1 += w.abs();
    }
    let mut type_shares: Vec<TypeShare> = by_type
        .into_iter()
        .map(|(feature_type, (count, abs_weight))| TypeShare {
            feature_type,
            count,
            abs_weight,
            share: if total > 0.0 { abs_weight / total } else { 0.0 },
        })
        .collect();
    type_shares.sort_by(|a, b| b.abs_weight.total_cmp(&a.abs_weight).then_with(|| a.feature_type.cmp(&b.feature_type)));

    let mut zero_order: Vec<(ViewpointId, ViewpointValue, f64)> = fs
        .iter()
        .filter(|(f, _)| f.len() == 1 && f.max_sigma() == 0)
        .map(|(f, w)| (f.basis()[0].viewpoint, f.basis()[0].value, w))
        .collect();
    zero_order.sort_by_key(|z| (z.0, z.1));

    let wanted: BTreeSet<usize> = motif_lengths.iter().copied().collect();
    let mut motifs = Vec::new();
    for &len in &wanted {
        let mut cands: Vec<(&CompoundFeature, f64)> = fs
            .iter()
            .filter(|(f, _)| f.len() == len && f.is_contiguous() && f.basis().iter().all(|b| b.viewpoint == ViewpointId::I))
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        for (rank, (f, w)) in cands.into_iter().take(top).enumerate() {
            motifs.push(Motif {
                length: len,
                rank: rank + 1,
                feature: f.clone(),
                weight: w,
            });
        }
    }

    let mut extent: BTreeMap<(u32, usize), f64> = BTreeMap::new();
    let mut holes: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    for (f, w) in fs.iter() {
        *extent.entry((f.max_sigma(), f.len())).or_default() += w.abs();
        *holes.entry((f.len(), f.holes())).or_default() += 1;
    }

    Analysis {
        type_shares,
        zero_order,
        motifs,
        extent,
        holes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed {
        alphabet: Alphabet,
        dist: Vec<f64>,
    }

    impl Predictor for Fixed {
        fn alphabet(&self) -> &Alphabet {
            &self.alphabet
        }
        fn predict_next(&self, _prefix: &[i32]) -> PredictiveDistribution {
            PredictiveDistribution::from_weights(self.dist.clone())
        }
    }

    #[test]
    fn uniform_over_four_is_two_bits() {
        let corpus = Corpus::new(vec![EventSequence::from_pitches("a", &[60, 61, 62, 63, 60]).unwrap()]).unwrap();
        let d = vec![vec![PredictiveDistribution::uniform(4); 5]];
        let r = cross_entropy(&corpus, &d).unwrap();
        assert_eq!(r.mean_bits, 2.0);
        assert_eq!(r.events, 5);
        // ties go to the lowest pitch, which is right twice
        assert!((r.accuracy - 0.4).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_three_events() {
        let corpus = Corpus::new(vec![EventSequence::from_pitches("a", &[60, 62, 60]).unwrap()]).unwrap();
        let d = vec![vec![
            PredictiveDistribution::from_weights(vec![0.5, 0.5]),
            PredictiveDistribution::from_weights(vec![0.75, 0.25]),
            PredictiveDistribution::from_weights(vec![0.25, 0.75]),
        ]];
        let r = cross_entropy(&corpus, &d).unwrap();
        assert!((r.mean_bits - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_reported() {
        let corpus = Corpus::new(vec![EventSequence::from_pitches("a", &[60, 62]).unwrap()]).unwrap();
        let d = vec![vec![
            PredictiveDistribution::from_weights(vec![1.0, 0.0]),
            PredictiveDistribution::from_weights(vec![1.0, 0.0]),
        ]];
        let r = cross_entropy(&corpus, &d).unwrap();
        assert!(r.mean_bits.is_infinite());
        assert_eq!(r.zero_probability, vec![("a".to_string(), 1)]);
    }

    #[test]
    fn threshold_one_walk_is_greedy() {
        let p = Fixed {
            alphabet: Alphabet::new([60, 62, 64]),
            dist: vec![0.2, 0.5, 0.3],
        };
        let cfg = GenerationConfig {
            method: GenerationMethod::IterativeRandomWalk,
            threshold: 1.0,
            length: 6,
            prime: vec![60],
            restarts: 3,
            ..GenerationConfig::default()
        };
        let w = iterative_random_walk(&p, &cfg).unwrap();
        assert_eq!(w, greedy(&p, &[60], 6));
        assert_eq!(w.pitches, vec![60, 62, 62, 62, 62, 62]);
    }

    #[test]
    fn prime_outside_alphabet_is_rejected() {
        let p = Fixed {
            alphabet: Alphabet::new([60, 62]),
            dist: vec![0.5, 0.5],
        };
        let cfg = GenerationConfig {
            prime: vec![61],
            ..GenerationConfig::default()
        };
        assert!(matches!(beam_search(&p, &cfg), Err(EvalError::UnknownPitch(61))));
    }

    #[test]
    fn holes_and_extent() {
        use crate::features::{BasisFeature, FeatureSet};
        use crate::viewpoints::ViewpointValue::Int;
        let gap = CompoundFeature::new(vec![
            BasisFeature::new(ViewpointId::P, 2, Int(60)).unwrap(),
            BasisFeature::new(ViewpointId::P, 0, Int(62)).unwrap(),
        ])
        .unwrap();
        assert_eq!(gap.holes(), 1);
        let model = TrainedModel::from_features(FeatureSet::from_pairs([(gap, -2.0)]), Alphabet::new([60, 62]));
        let a = analyze(&model, &[3], 5);
        assert_eq!(a.type_shares.len(), 1);
        assert_eq!(a.type_shares[0].share, 1.0);
        assert_eq!(a.extent[&(2, 2)], 2.0);
        assert_eq!(a.holes[&(2, 1)], 1);
    }
}
