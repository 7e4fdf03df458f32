mod common;

use std::sync::Arc;

use pulse_core::corpus::{Corpus, EventSequence};
use pulse_core::ensemble::{combine_streams, mean_bits, CombinationConfig, CombinationRule};
use pulse_core::evalgen::{analyze, cross_entropy, entropy_profile};
use pulse_core::features::{build_matrix, DataSet};
use pulse_core::model::{objective, PredictiveDistribution};
use pulse_core::pulse::{fit_ltm, fit_predict_stm, LtmConfig, NPlusSpec, StmConfig, TrainedModel, ValueRanges};
use pulse_core::viewpoints::SequenceView;

fn small_ltm(spec: &str) -> LtmConfig {
    let mut cfg = LtmConfig::default();
    cfg.nplus = NPlusSpec::parse(spec).unwrap();
    cfg.keys = None;
    cfg.outer.max_iterations = 5;
    cfg
}

fn one_song(p: &[i32]) -> Corpus {
    Corpus::new(vec![EventSequence::from_pitches("only", p).unwrap()]).unwrap()
}

#[test]
fn constant_song_becomes_a_point_mass() {
    let c = one_song(&[67; 24]);
    let mut cfg = small_ltm("P");
    cfg.reg.lambda1 = 0.0;
    let m = fit_ltm(&c, &cfg).unwrap();
    let d = &m.predict_corpus(&c)[0];
    for p in &d[1..] {
        assert!(p.entropy() < 0.01, "{}", p.entropy());
    }
}

#[test]
fn cross_entropy_is_the_objective_in_bits() {
    let c = common::walk_corpus(8, 20, 4);
    let m = fit_ltm(&c, &small_ltm("P I*")).unwrap();
    let report = cross_entropy(&c, &m.predict_corpus(&c)).unwrap();
    let data = DataSet::from_corpus(&c, None);
    let mat = build_matrix(&data.data, &m.features, &c.alphabet);
    let nats = objective(&mat, m.features.weights()).nll;
    let bits = nats / (c.event_count() as f64 * std::f64::consts::LN_2);
    assert!((report.mean_bits - bits).abs() < 1e-9, "{} vs {bits}", report.mean_bits);
}

#[test]
fn saved_models_predict_identically() {
    let c = common::walk_corpus(8, 20, 5);
    let m = fit_ltm(&c, &small_ltm("P I* C*")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.txt");
    m.save(&path).unwrap();
    let back = TrainedModel::load(&path).unwrap();
    assert_eq!(back.to_text(), m.to_text());
    let other = common::walk_corpus(3, 15, 6);
    assert_eq!(m.predict_corpus(&other), back.predict_corpus(&other));
}

#[test]
fn training_is_deterministic() {
    let c = common::walk_corpus(6, 16, 7);
    let a = fit_ltm(&c, &small_ltm("P I*")).unwrap();
    let b = fit_ltm(&c, &small_ltm("P I*")).unwrap();
    assert_eq!(a.to_text(), b.to_text());
}

#[test]
fn keyed_default_spec_trains() {
    let c = common::walk_corpus(6, 16, 8);
    let mut cfg = LtmConfig::default();
    cfg.outer.max_iterations = 3;
    let m = fit_ltm(&c, &cfg).unwrap();
    assert!(m.keys.is_some());
    let r = cross_entropy(&c, &m.predict_corpus(&c)).unwrap();
    assert!(r.mean_bits < (c.alphabet.len() as f64).log2());
}

#[test]
fn analysis_conserves_count_and_weight() {
    let c = common::walk_corpus(10, 24, 9);
    let m = fit_ltm(&c, &small_ltm("P I* C*")).unwrap();
    let a = analyze(&m, &[2, 3], 5);
    let total: f64 = m.features.weights().iter().map(|w| w.abs()).sum();
    let count: usize = a.type_shares.iter().map(|t| t.count).sum();
    assert_eq!(count, m.features.len());
    let by_type: f64 = a.type_shares.iter().map(|t| t.abs_weight).sum();
    let by_extent: f64 = a.extent.values().sum();
    assert!((by_type - total).abs() < 1e-9 && (by_extent - total).abs() < 1e-9);
    assert_eq!(a.holes.values().sum::<usize>(), m.features.len());
    for mo in &a.motifs {
        assert!(mo.feature.is_contiguous());
        assert!(mo.length == 2 || mo.length == 3);
    }
}

#[test]
fn short_term_model_beats_uniform_on_repetition() {
    let alphabet = pulse_core::corpus::Alphabet::new(common::MOTIF_ALPHABET);
    let uniform = (alphabet.len() as f64).log2();
    for seed in 0..3 {
        let ps = common::motif_song(seed);
        let seq = EventSequence::from_pitches("s", &ps).unwrap();
        let view = Arc::new(SequenceView::new(&seq, None));
        let ranges = ValueRanges::from_views([view.as_ref()]);
        let d = fit_predict_stm(&view, &alphabet, &ranges, &StmConfig::default()).unwrap();
        // nothing has been seen at the first event
        assert_eq!(d[0], PredictiveDistribution::uniform(alphabet.len()));
        let prof = entropy_profile(&seq, &d, &alphabet).unwrap();
        let mean = prof.iter().map(|(_, _, b)| b).sum::<f64>() / prof.len() as f64;
        assert!(mean < uniform);
    }
}

#[test]
fn hybrid_streams_stay_aligned() {
    // source a knows the odd events, source b the even ones
    let n = 3;
    let truths = [0usize, 1, 2, 1, 0, 2];
    let sharp = |y: usize| PredictiveDistribution::from_weights((0..n).map(|k| if k == y { 0.9 } else { 0.05 }).collect());
    let flat = PredictiveDistribution::uniform(n);
    let a: Vec<_> = truths.iter().enumerate().map(|(i, &y)| if i % 2 == 1 { sharp(y) } else { flat.clone() }).collect();
    let b: Vec<_> = truths.iter().enumerate().map(|(i, &y)| if i % 2 == 0 { sharp(y) } else { flat.clone() }).collect();
    let cfg = CombinationConfig {
        rule: CombinationRule::Product,
        bias: 1.0,
    };
    let h = combine_streams(&[a.clone(), b.clone()], &cfg).unwrap();
    let mut shifted = b.clone();
    shifted.rotate_left(1);
    let misaligned = combine_streams(&[a.clone(), shifted], &cfg).unwrap();
    assert!(mean_bits(&h, &truths) < mean_bits(&misaligned, &truths));
    for (i, d) in h.iter().enumerate() {
        assert_eq!(d.argmax(), truths[i]);
    }
}
