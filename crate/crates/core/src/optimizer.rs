//! Mini-batch AdaGrad / AdaDelta with cumulative-penalty L1 and additive L2.
//!
//! The objective is Σ_d NLL_d + λ1 Σ_f ρ1(f)|θ_f| + (λ2/2) Σ_f ρ2(f) θ_f².
//! Each step follows the batch-mean gradient, so per step the L1 budget
//! grows by λ1·ρ1(f)/N times the realized per-feature learning rate and
//! L2 contributes λ2·ρ2(f)·θ_f/N to the gradient.
//!
//! The L1 part is the cumulative-penalty scheme: `u` is the total penalty a
//! weight could have received so far, `q` the signed sum of what it actually
//! received. After the plain adaptive step a positive weight is pulled
//! toward zero by `u + q`, a negative one by `u - q`, and clipped at zero so
//! it never changes sign. Penalties are applied lazily, only to weights whose
//! features fire in the current batch; `u` still accrues for the steps a
//! feature sat out.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::model::{self, SparseGradient};

#[derive(Debug, Error, PartialEq)]
pub enum OptimizerError {
    #[error("non-finite gradient for feature {feature} in epoch {epoch}")]
    NonFinite { feature: usize, epoch: usize },
    #[error("no training data")]
    NoData,
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    AdaGrad,
    AdaDelta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    /// Global learning rate. For AdaDelta it scales the usual update.
    pub eta: f64,
    /// Initial value of the AdaGrad squared-gradient accumulator.
    pub igsav: f64,
    /// AdaDelta decay rate.
    pub rho: f64,
    /// AdaDelta conditioning constant.
    pub epsilon: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::AdaGrad,
            eta: 1.0,
            igsav: 1e-10,
            rho: 0.95,
            epsilon: 1e-6,
            batch_size: 32,
            lambda1: 0.0,
            lambda2: 0.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OptimizerError::Config(m.to_string()));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.igsav > 0.0) {
            return bad("igsav must be positive");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("regularization strengths must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub gamma_loss: f64,
    pub tau_loss: f64,
    pub gamma_active: f64,
    pub tau_active: f64,
    /// Whether the active-set criterion may end a run. The loss criterion is
    /// always on.
    pub use_active: bool,
    pub max_epochs: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            gamma_loss: 5e-5,
            tau_loss: 0.9,
            gamma_active: 5e-3,
            tau_active: 0.9,
            use_active: true,
            max_epochs: 500,
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_tau = |t: f64| t > 0.0 && t < 1.0;
        if !(self.gamma_loss > 0.0 && self.gamma_active > 0.0) {
            return Err(OptimizerError::Config("convergence thresholds must be positive".into()));
        }
        if !(ok_tau(self.tau_loss) && ok_tau(self.tau_active)) {
            return Err(OptimizerError::Config("EMA decays must lie in (0, 1)".into()));
        }
        if self.max_epochs == 0 {
            return Err(OptimizerError::Config("epoch cap must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    LossConverged,
    ActiveSetConverged,
    EpochCap,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::LossConverged => "loss",
            StopReason::ActiveSetConverged => "active-set",
            StopReason::EpochCap => "epoch-cap",
        })
    }
}

/// Weights plus every per-feature accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub theta: Vec<f64>,
    /// AdaGrad: Σg² (starting at igsav). AdaDelta: E[g²].
    pub accum: Vec<f64>,
    /// AdaDelta: E[Δw²]. Unused by AdaGrad.
    pub accum_dx: Vec<f64>,
    /// Total penalty available to each weight.
    pub u: Vec<f64>,
    /// Signed sum of penalties actually applied.
    pub q: Vec<f64>,
    /// Step at which each feature's `u` was last brought up to date.
    pub last_step: Vec<u64>,
    /// Whether the feature has received a gradient yet. Before that its
    /// accumulator holds only the initial value and owes no penalty.
    pub touched: Vec<bool>,
    pub step: u64,
    pub epochs: usize,
    /// Number of completed runs, used to vary the shuffle between runs.
    pub runs: u64,
}

impl OptimizerState {
    pub fn new(n: usize, cfg: &OptimizerConfig) -> Self {
        OptimizerState {
            theta: vec![0.0; n],
            accum: vec![initial_accum(cfg); n],
            accum_dx: vec![0.0; n],
            u: vec![0.0; n],
            q: vec![0.0; n],
            last_step: vec![0; n],
            touched: vec![false; n],
            step: 0,
            epochs: 0,
            runs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn active(&self) -> Vec<bool> {
        self.theta.iter().map(|w| *w != 0.0).collect()
    }
}

fn initial_accum(cfg: &OptimizerConfig) -> f64 {
    match cfg.algorithm {
        Algorithm::AdaGrad => cfg.igsav,
        Algorithm::AdaDelta => 0.0,
    }
}

/// Learning rate a feature would get for a unit gradient; used to accrue
/// `u` for steps where its gradient is zero.
fn idle_rate(state: &OptimizerState, cfg: &OptimizerConfig, i: usize) -> f64 {
    match cfg.algorithm {
        Algorithm::AdaGrad => cfg.eta / state.accum[i].sqrt(),
        Algorithm::AdaDelta => {
            cfg.eta * (state.accum_dx[i] + cfg.epsilon).sqrt() / (state.accum[i] + cfg.epsilon).sqrt()
        }
    }
}

/// Per-feature regularization strengths after multiplying in ρ(f).
#[derive(Debug, Clone, PartialEq)]
pub struct Penalties {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
}

impl Penalties {
    pub fn none(n: usize) -> Self {
        Penalties {
            l1: vec![0.0; n],
            l2: vec![0.0; n],
        }
    }

    /// λ1·ρ1(f) and λ2·ρ2(f) from global strengths and per-feature factors.
    pub fn scaled(lambda1: f64, rho1: &[f64], lambda2: f64, rho2: &[f64]) -> Self {
        Penalties {
            l1: rho1.iter().map(|r| lambda1 * r).collect(),
            l2: rho2.iter().map(|r| lambda2 * r).collect(),
        }
    }

    pub fn uniform(n: usize, lambda1: f64, lambda2: f64) -> Self {
        Penalties {
            l1: vec![lambda1; n],
            l2: vec![lambda2; n],
        }
    }
}

/// Accrues `u_i` for the idle steps after `last_step[i]` up to `upto`.
fn catch_up(state: &mut OptimizerState, cfg: &OptimizerConfig, pen: &Penalties, n_total: f64, i: usize, upto: u64) {
    let missed = upto.saturating_sub(state.last_step[i]);
    if missed > 0 && pen.l1[i] > 0.0 && state.touched[i] {
        state.u[i] += missed as f64 * pen.l1[i] / n_total * idle_rate(state, cfg, i);
    }
    state.last_step[i] = state.last_step[i].max(upto);
}

/// Clip-to-zero cumulative penalty for weight `i` given its pre-penalty value.
fn apply_l1(state: &mut OptimizerState, i: usize, w_half: f64) {
    let (u, q) = (state.u[i], state.q[i]);
    let w = if w_half > 0.0 {
        (w_half - (u + q)).max(0.0)
    } else if w_half < 0.0 {
        (w_half + (u - q)).min(0.0)
    } else {
        0.0
    };
    state.q[i] += w - w_half;
    state.theta[i] = w;
}

/// One update from the summed gradient of a batch of `batch_len` data out of
/// `n_total`. Only the features listed in `grad` are touched.
pub fn step(
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    pen: &Penalties,
    grad: &SparseGradient,
    batch_len: usize,
    n_total: usize,
) -> std::result::Result<(), usize> {
    let n_total = n_total as f64;
    let scale = 1.0 / batch_len as f64;
    state.step += 1;
    for (&i, &g_sum) in grad.indices.iter().zip(&grad.values) {
        if !g_sum.is_finite() {
            return Err(i);
        }
        // the current step itself is accrued below with the realized rate
        catch_up(state, cfg, pen, n_total, i, state.step - 1);
        state.last_step[i] = state.step;
        state.touched[i] = true;

        let w = state.theta[i];
        let g = g_sum * scale + pen.l2[i] * w / n_total;
        let dw = match cfg.algorithm {
            Algorithm::AdaGrad => {
                state.accum[i] += g * g;
                -cfg.eta * g / state.accum[i].sqrt()
            }
            Algorithm::AdaDelta => {
                let r = cfg.rho;
                state.accum[i] = r * state.accum[i] + (1.0 - r) * g * g;
                let dw = -cfg.eta * (state.accum_dx[i] + cfg.epsilon).sqrt() / (state.accum[i] + cfg.epsilon).sqrt() * g;
                state.accum_dx[i] = r * state.accum_dx[i] + (1.0 - r) * dw * dw;
                dw
            }
        };
        if !dw.is_finite() {
            return Err(i);
        }
        if pen.l1[i] > 0.0 {
            let rate = if g != 0.0 { (dw / g).abs() } else { idle_rate(state, cfg, i) };
            state.u[i] += pen.l1[i] / n_total * rate;
        }
        apply_l1(state, i, w + dw);
    }
    Ok(())
}

/// Brings every `u` up to date, e.g. before handing the state to a hot start.
pub fn settle(state: &mut OptimizerState, cfg: &OptimizerConfig, pen: &Penalties, n_total: usize) {
    for i in 0..state.len() {
        catch_up(state, cfg, pen, n_total as f64, i, state.step);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub state: OptimizerState,
    pub epochs: usize,
    pub reason: StopReason,
    /// Mean per-datum NLL over the last epoch, accumulated during the pass.
    pub loss: f64,
}

fn ema(prev: Option<f64>, x: f64, tau: f64) -> f64 {
    match prev {
        None => x,
        Some(p) => tau * p + (1.0 - tau) * x,
    }
}

/// Epochs of shuffled mini-batches until a convergence criterion fires or
/// the epoch cap is reached.
pub fn run(
    m: &FeatureMatrix,
    mut state: OptimizerState,
    cfg: &OptimizerConfig,
    conv: &ConvergenceConfig,
    pen: &Penalties,
) -> Result<RunOutcome> {
    cfg.validate()?;
    conv.validate()?;
    let n = m.n_data();
    if n == 0 {
        return Err(OptimizerError::NoData);
    }
    assert_eq!(state.len(), m.n_features(), "state does not match the matrix");
    assert_eq!(pen.l1.len(), m.n_features());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ state.runs.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_ema: Option<f64> = None;
    let mut active_ema: Option<f64> = None;
    // the set before the first epoch counts as empty, so the first
    // fluctuation is the whole active set and the EMA has to decay from there
    let mut active = vec![false; state.len()];
    let mut epochs = 0;
    let mut last_loss;
    let reason = loop {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let g = model::gradient(m, &state.theta, batch);
            total += g.loss;
            step(&mut state, cfg, pen, &g, batch.len(), n).map_err(|feature| OptimizerError::NonFinite {
                feature,
                epoch: state.epochs + 1,
            })?;
        }
        epochs += 1;
        state.epochs += 1;
        last_loss = total / n as f64;

        let prev_loss = loss_ema;
        loss_ema = Some(ema(loss_ema, last_loss, conv.tau_loss));
        let now_active = state.active();
        let flips = active.iter().zip(&now_active).filter(|(a, b)| a != b).count();
        active = now_active;
        active_ema = Some(ema(active_ema, flips as f64, conv.tau_active));

        if let (Some(p), Some(c)) = (prev_loss, loss_ema) {
            if (c - p).abs() < conv.gamma_loss {
                break StopReason::LossConverged;
            }
        }
        if conv.use_active && active_ema.is_some_and(|a| a < conv.gamma_active) {
            break StopReason::ActiveSetConverged;
        }
        if epochs >= conv.max_epochs {
            break StopReason::EpochCap;
        }
    };
    settle(&mut state, cfg, pen, n);
    state.runs += 1;
    Ok(RunOutcome {
        state,
        epochs,
        reason,
        loss: last_loss,
    })
}

/// How a hot start initializes `u` for newly added features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NewPenalty {
    /// The smallest `u` among surviving features (0 if none survive).
    #[default]
    MinSurvivor,
    /// Zero: new features owe no penalty for earlier runs.
    Zero,
}

/// State for a new feature list: `kept[j]` is the previous index of the
/// feature now at position j; `new_count` fresh features follow them.
/// Survivors keep every accumulator, new features start from scratch.
pub fn hot_start(prev: &OptimizerState, kept: &[usize], new_count: usize, cfg: &OptimizerConfig, policy: NewPenalty) -> OptimizerState {
    let mut s = OptimizerState::new(kept.len() + new_count, cfg);
    s.step = prev.step;
    s.epochs = prev.epochs;
    s.runs = prev.runs;
    for (j, &i) in kept.iter().enumerate() {
        s.theta[j] = prev.theta[i];
        s.accum[j] = prev.accum[i];
        s.accum_dx[j] = prev.accum_dx[i];
        s.u[j] = prev.u[i];
        s.q[j] = prev.q[i];
        s.last_step[j] = prev.last_step[i];
        s.touched[j] = prev.touched[i];
    }
    let u_new = match policy {
        NewPenalty::MinSurvivor => kept.iter().map(|&i| prev.u[i]).fold(None, |m: Option<f64>, u| Some(m.map_or(u, |m| m.min(u)))).unwrap_or(0.0),
        NewPenalty::Zero => 0.0,
    };
    for j in kept.len()..s.len() {
        s.u[j] = u_new;
        s.last_step[j] = prev.step;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(i: usize, v: f64) -> SparseGradient {
        SparseGradient {
            indices: vec![i],
            values: vec![v],
            loss: 0.0,
        }
    }

    #[test]
    fn first_adagrad_step() {
        let cfg = OptimizerConfig::default();
        let mut s = OptimizerState::new(1, &cfg);
        step(&mut s, &cfg, &Penalties::none(1), &grad(0, 1.0), 1, 1).unwrap();
        // oracle: -eta * g / sqrt(g^2 + igsav)
        let expected = -1.0 / (1.0f64 + 1e-10).sqrt();
        assert_eq!(s.theta[0], expected);
        assert_eq!((s.u[0], s.q[0]), (0.0, 0.0));
    }

    #[test]
    fn clip_stops_at_zero() {
        let mut s = OptimizerState::new(1, &OptimizerConfig::default());
        s.u[0] = 0.7;
        apply_l1(&mut s, 0, 0.5);
        assert_eq!(s.theta[0], 0.0);
        assert_eq!(s.q[0], -0.5);
    }

    #[test]
    fn partial_penalty_is_recorded_in_q() {
        let mut s = OptimizerState::new(1, &OptimizerConfig::default());
        s.u[0] = 0.3;
        apply_l1(&mut s, 0, 1.0);
        assert_eq!(s.theta[0], 0.7);
        assert_eq!(s.q[0], 0.7 - 1.0);
        // the budget is spent: a second application with unchanged u is a no-op
        apply_l1(&mut s, 0, 0.7);
        assert_eq!(s.theta[0], 0.7);
    }

    #[test]
    fn negative_weights_move_up() {
        let mut s = OptimizerState::new(1, &OptimizerConfig::default());
        s.u[0] = 0.25;
        apply_l1(&mut s, 0, -1.0);
        assert_eq!(s.theta[0], -0.75);
        assert_eq!(s.q[0], 0.25);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let cfg = OptimizerConfig::default();
        let mut s = OptimizerState::new(2, &cfg);
        assert_eq!(step(&mut s, &cfg, &Penalties::none(2), &grad(1, f64::NAN), 1, 1), Err(1));
    }

    #[test]
    fn adadelta_step_matches_formula() {
        let cfg = OptimizerConfig {
            algorithm: Algorithm::AdaDelta,
            eta: 2.0,
            ..Default::default()
        };
        let mut s = OptimizerState::new(1, &cfg);
        step(&mut s, &cfg, &Penalties::none(1), &grad(0, 0.5), 1, 1).unwrap();
        let eg2 = (1.0 - 0.95) * 0.25;
        let expected = -2.0 * (1e-6f64).sqrt() / (eg2 + 1e-6f64).sqrt() * 0.5;
        assert!((s.theta[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn hot_start_cases() {
        let cfg = OptimizerConfig::default();
        let mut prev = OptimizerState::new(3, &cfg);
        prev.theta = vec![1.0, -2.0, 0.5];
        prev.u = vec![0.3, 0.1, 0.2];
        prev.q = vec![-0.1, 0.05, 0.0];
        prev.accum = vec![4.0, 5.0, 6.0];
        prev.step = 17;
        assert_eq!(hot_start(&prev, &[0, 1, 2], 0, &cfg, NewPenalty::MinSurvivor), prev);
        let fresh = hot_start(&prev, &[], 2, &cfg, NewPenalty::MinSurvivor);
        assert_eq!(fresh.theta, vec![0.0, 0.0]);
        assert_eq!(fresh.u, vec![0.0, 0.0]);
        let mixed = hot_start(&prev, &[2, 0], 1, &cfg, NewPenalty::MinSurvivor);
        assert_eq!(mixed.theta, vec![0.5, 1.0, 0.0]);
        assert_eq!(mixed.accum, vec![6.0, 4.0, 1e-10]);
        assert_eq!(mixed.u, vec![0.2, 0.3, 0.2]);
        assert_eq!(mixed.q, vec![0.0, -0.1, 0.0]);
        let zero = hot_start(&prev, &[2, 0], 1, &cfg, NewPenalty::Zero);
        assert_eq!(zero.u[2], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { rho: 1.0, ..Default::default() }.validate().is_err());
        assert!(ConvergenceConfig { tau_loss: 0.0, ..Default::default() }.validate().is_err());
    }
}
