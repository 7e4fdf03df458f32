//! Synthetic corpora shared by the integration tests.
#![allow(dead_code)]

use pulse_core::corpus::{Corpus, EventSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Five-state transition matrix and its stationary distribution.
pub fn markov_chain() -> (Vec<Vec<f64>>, Vec<f64>) {
    let t = vec![
        vec![0.6, 0.2, 0.1, 0.05, 0.05],
        vec![0.1, 0.5, 0.3, 0.05, 0.05],
        vec![0.05, 0.1, 0.5, 0.3, 0.05],
        vec![0.05, 0.05, 0.1, 0.5, 0.3],
        vec![0.3, 0.05, 0.05, 0.1, 0.5],
    ];
    let mut pi = vec![0.2; 5];
    for _ in 0..2000 {
        let mut next = vec![0.0; 5];
        for i in 0..5 {
            for j in 0..5 {
                next[j] += pi[i] * t[i][j];
            }
        }
        pi = next;
    }
    (t, pi)
}

pub fn entropy_bits(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x| -x * x.log2()).sum()
}

pub fn sample(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut c = 0.0;
    for (i, x) in p.iter().enumerate() {
        c += x;
        if u < c {
            return i;
        }
    }
    p.len() - 1
}

/// `n` chains of `len` states started from the stationary distribution,
/// mapped to pitches 60, 62, ..., 68.
pub fn markov_corpus(n: usize, len: usize, seed: u64) -> Corpus {
    let (t, pi) = markov_chain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..n)
        .map(|s| {
            let mut x = sample(&pi, &mut rng);
            let mut ps = vec![60 + 2 * x as i32];
            for _ in 1..len {
                x = sample(&t[x], &mut rng);
                ps.push(60 + 2 * x as i32);
            }
            EventSequence::from_pitches(format!("m{s}"), &ps).unwrap()
        })
        .collect();
    Corpus::new(seqs).unwrap()
}

/// Expected bits per event of a `len`-event chain: the first event costs
/// H(π), every later one the conditional entropy.
pub fn markov_oracle_bits(len: usize) -> f64 {
    let (t, pi) = markov_chain();
    let cond: f64 = (0..5).map(|i| pi[i] * entropy_bits(&t[i])).sum();
    (entropy_bits(&pi) + (len - 1) as f64 * cond) / len as f64
}

/// Bounded random walks over a five-note scale.
pub fn walk_corpus(n: usize, len: usize, seed: u64) -> Corpus {
    let scale = [60, 62, 64, 65, 67];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..n)
        .map(|s| {
            let mut i = rng.gen_range(0..scale.len());
            let ps: Vec<i32> = (0..len)
                .map(|_| {
                    i = (i as i32 + rng.gen_range(-1..=1)).clamp(0, 4) as usize;
                    scale[i]
                })
                .collect();
            EventSequence::from_pitches(format!("w{s}"), &ps).unwrap()
        })
        .collect();
    Corpus::new(seqs).unwrap()
}

pub const MOTIF_ALPHABET: [i32; 8] = [60, 62, 64, 65, 67, 69, 71, 72];

/// A random four-note motif repeated eight times.
pub fn motif_song(seed: u64) -> Vec<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motif: Vec<i32> = (0..4).map(|_| MOTIF_ALPHABET[rng.gen_range(0..8)]).collect();
    motif.iter().cycle().take(32).copied().collect()
}
