//! The conditional log-linear model p(y | context) ∝ exp(Σ_f θ_f · f(context, y)).
//!
//! Everything is computed in natural log; base 2 only appears in
//! [`PredictiveDistribution::bits`] for reporting.

use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    probs: Vec<f64>,
    log2: Vec<f64>,
}

impl PredictiveDistribution {
    /// Normalizes non-negative scores. Panics on an empty, negative,
    /// non-finite or all-zero input.
    pub fn from_weights(weights: Vec<f64>) -> Self {
        assert!(!weights.is_empty(), "empty distribution");
        assert!(
            weights.iter().all(|w| w.is_finite() && *w >= 0.0),
            "distribution weights must be finite and non-negative"
        );
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "distribution has no mass");
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log2 = probs.iter().map(|p| p.log2()).collect();
        PredictiveDistribution { probs, log2 }
    }

    /// Softmax of natural-log scores with max subtraction.
    pub fn from_scores(scores: &[f64]) -> Self {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let log_z = z.ln();
        let probs = exps.iter().map(|e| e / z).collect();
        let log2 = scores
            .iter()
            .map(|s| (s - max - log_z) / std::f64::consts::LN_2)
            .collect();
        PredictiveDistribution { probs, log2 }
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_weights(vec![1.0; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, y: usize) -> f64 {
        self.probs[y]
    }

    pub fn log2_prob(&self, y: usize) -> f64 {
        self.log2[y]
    }

    /// Information content of outcome `y` in bits.
    pub fn bits(&self, y: usize) -> f64 {
        -self.log2[y]
    }

    /// Shannon entropy in bits.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log2)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| -p * l)
            .sum()
    }

    /// Index of the most likely outcome; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Unnormalized log-scores of every outcome for datum `d`.
pub fn scores(m: &FeatureMatrix, theta: &[f64], d: usize) -> Vec<f64> {
    assert_eq!(theta.len(), m.n_features(), "weight vector does not match the matrix");
    (0..m.n_outcomes())
        .map(|y| m.row(d, y).iter().map(|&f| theta[f as usize]).sum())
        .collect()
}

pub fn predict(m: &FeatureMatrix, theta: &[f64], d: usize) -> PredictiveDistribution {
    PredictiveDistribution::from_scores(&scores(m, theta, d))
}

/// Natural-log negative log-likelihood of the true outcome of datum `d`.
pub fn datum_nll(m: &FeatureMatrix, theta: &[f64], d: usize) -> f64 {
    let s = scores(m, theta, d);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - s[m.true_outcome(d)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    /// Summed natural-log negative log-likelihood.
    pub nll: f64,
    pub n_data: usize,
}

impl ObjectiveValue {
    pub fn mean(&self) -> f64 {
        if self.n_data == 0 {
            0.0
        } else {
            self.nll / self.n_data as f64
        }
    }
}

pub fn objective(m: &FeatureMatrix, theta: &[f64]) -> ObjectiveValue {
    let nll = (0..m.n_data()).map(|d| datum_nll(m, theta, d)).sum();
    ObjectiveValue {
        nll,
        n_data: m.n_data(),
    }
}

/// Gradient of the summed negative log-likelihood over `batch`, restricted
/// to the features that fire somewhere in it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    /// Feature indices, ascending.
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    /// Summed loss over the batch at the current weights.
    pub loss: f64,
}

impl SparseGradient {
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut g = vec![0.0; n];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            g[i] = v;
        }
        g
    }
}

/// g_f = Σ_d (E_p[f] − f(d, truth)). Accumulation follows batch order, so
/// the result is deterministic.
pub fn gradient(m: &FeatureMatrix, theta: &[f64], batch: &[usize]) -> SparseGradient {
    assert!(!batch.is_empty(), "empty batch");
    let mut dense: Vec<f64> = vec![0.0; m.n_features()];
    let mut touched = vec![false; m.n_features()];
    let mut loss = 0.0;
    for &d in batch {
        let s = scores(m, theta, d);
        let p = PredictiveDistribution::from_scores(&s);
        let truth = m.true_outcome(d);
        loss -= p.log2_prob(truth) * std::f64::consts::LN_2;
        for y in 0..m.n_outcomes() {
            let py = p.prob(y);
            for &f in m.row(d, y) {
                dense[f as usize] += py;
                touched[f as usize] = true;
            }
        }
        for &f in m.row(d, truth) {
            dense[f as usize] -= 1.0;
        }
    }
    let indices: Vec<usize> = (0..m.n_features()).filter(|&i| touched[i]).collect();
    let values = indices.iter().map(|&i| dense[i]).collect();
    SparseGradient { indices, values, loss }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_outcome(theta_fires_on_a: bool) -> FeatureMatrix {
        let rows = if theta_fires_on_a {
            vec![vec![vec![0], vec![]]]
        } else {
            vec![vec![vec![], vec![]]]
        };
        FeatureMatrix::from_rows(rows, 2, 1, vec![0])
    }

    #[test]
    fn zero_weights_are_uniform() {
        let m = two_outcome(true);
        let p = predict(&m, &[0.0], 0);
        assert_eq!(p.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn ln3_gives_three_quarters() {
        let m = two_outcome(true);
        let p = predict(&m, &[3f64.ln()], 0);
        // oracle: e^{ln 3} / (e^{ln 3} + 1)
        let e = 3f64.ln().exp();
        assert!((p.prob(0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.prob(0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_feature_gradient() {
        let m = two_outcome(true);
        let g = gradient(&m, &[0.0], &[0]);
        assert_eq!(g.indices, vec![0]);
        assert!((g.values[0] - (0.5 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn uniform_objective() {
        let rows = vec![vec![vec![], vec![], vec![], vec![]]; 10];
        let m = FeatureMatrix::from_rows(rows, 4, 0, vec![1; 10]);
        let o = objective(&m, &[]);
        assert!((o.nll - 10.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let p = PredictiveDistribution::from_scores(&[1000.0, 999.0]);
        assert!(p.probs().iter().all(|x| x.is_finite()));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(PredictiveDistribution::uniform(3).argmax(), 0);
    }
}
