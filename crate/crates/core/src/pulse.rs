//! The grow / optimize / shrink feature-discovery loop.
//!
//! GROW proposes candidates from the active set through an N+ operator and
//! adds them with weight zero. The optimizer then trains all weights under
//! L1, which drives useless features to exactly zero, and SHRINK removes
//! them. The loop repeats until the active set stops moving.
//!
//! Long-term models (LTM) run the loop over a training corpus. Short-term
//! models (STM) run one round per event of a single melody and predict the
//! next event before seeing it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::corpus::{Alphabet, Corpus};
use crate::features::{self, build_matrix, filter_irrelevant, BasisFeature, CompoundFeature, DataSet, Datum, FeatureError, FeatureSet, KeyPolicy};
use crate::model::{self, PredictiveDistribution};
use crate::optimizer::{self, ConvergenceConfig, NewPenalty, OptimizerConfig, OptimizerError, OptimizerState, Penalties, StopReason};
use crate::viewpoints::{KeyProfiles, SequenceView, ViewpointId, ViewpointValue};

#[derive(Debug, Error)]
pub enum PulseError {
    #[error("bad N+ specification {spec:?}: {message}")]
    Spec { spec: String, message: String },
    #[error("viewpoint {0} needs key estimates but no key profiles were given")]
    MissingKey(ViewpointId),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error("model file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PulseError>;

/// One N+ group: viewpoints that are initialized together and, when
/// `expand` is set, extended with values of any of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub viewpoints: Vec<ViewpointId>,
    pub expand: bool,
}

impl Group {
    fn covers(&self, f: &CompoundFeature) -> bool {
        f.viewpoints().iter().all(|vp| self.viewpoints.contains(vp))
    }
}

/// Feature types and expansion flags, e.g. `P I* C* K M_K` or `(I C)* P`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NPlusSpec {
    pub groups: Vec<Group>,
}

// longest spellings first so that `F123` is not read as `F1` + `2`...
const TAG_SPELLINGS: [(&str, ViewpointId); 21] = [
    ("F_{1,2,3}", ViewpointId::F123),
    ("F_{123}", ViewpointId::F123),
    ("F123", ViewpointId::F123),
    ("F_{1}", ViewpointId::F1),
    ("F_1", ViewpointId::F1),
    ("F1", ViewpointId::F1),
    ("M_K", ViewpointId::MK),
    ("M_P", ViewpointId::MP),
    ("M_T", ViewpointId::MT),
    ("MK", ViewpointId::MK),
    ("MP", ViewpointId::MP),
    ("MT", ViewpointId::MT),
    ("P", ViewpointId::P),
    ("I", ViewpointId::I),
    ("O", ViewpointId::O),
    ("C", ViewpointId::C),
    ("X", ViewpointId::X),
    ("M", ViewpointId::M),
    ("T", ViewpointId::T),
    ("K", ViewpointId::K),
    ("F", ViewpointId::F1),
];

impl NPlusSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let err = |message: String| PulseError::Spec {
            spec: spec.to_string(),
            message,
        };
        let mut groups = Vec::new();
        let mut rest = spec.trim_start();
        while !rest.is_empty() {
            let viewpoints = if let Some(inner) = rest.strip_prefix('(') {
                let close = inner.find(')').ok_or_else(|| err("unclosed '('".into()))?;
                let mut vps = Vec::new();
                let mut body = inner[..close].trim_start();
                while !body.is_empty() {
                    let (vp, len) = leading_tag(body).ok_or_else(|| err(format!("unknown viewpoint at {body:?}")))?;
                    vps.push(vp);
                    body = body[len..].trim_start();
                }
                if vps.is_empty() {
                    return Err(err("empty group".into()));
                }
                rest = &inner[close + 1..];
                vps
            } else {
                let (vp, len) = leading_tag(rest).ok_or_else(|| err(format!("unknown viewpoint at {rest:?}")))?;
                rest = &rest[len..];
                vec![vp]
            };
            let expand = rest.starts_with('*');
            if expand {
                rest = &rest[1..];
            }
            rest = rest.trim_start();
            groups.push(Group { viewpoints, expand });
        }
        let parsed = NPlusSpec { groups };
        parsed.validate().map_err(err)?;
        Ok(parsed)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.groups.is_empty() {
            return Err("no feature types".into());
        }
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            let mut predictive = false;
            for &vp in &g.viewpoints {
                if !seen.insert(vp) {
                    return Err(format!("{vp} appears twice"));
                }
                if g.expand && !vp.is_temporal() {
                    return Err(format!("{vp} cannot be expanded into the past"));
                }
                predictive |= vp.is_predictive();
            }
            if !predictive {
                return Err("a group of only metrical weight never constrains the outcome".into());
            }
        }
        Ok(())
    }

    pub fn viewpoints(&self) -> Vec<ViewpointId> {
        self.groups.iter().flat_map(|g| g.viewpoints.iter().copied()).collect()
    }

    pub fn needs_key(&self) -> bool {
        self.viewpoints().iter().any(|vp| vp.needs_key())
    }
}

fn leading_tag(s: &str) -> Option<(ViewpointId, usize)> {
    TAG_SPELLINGS
        .iter()
        .find(|(t, _)| s.starts_with(t))
        .map(|(t, vp)| (*vp, t.len()))
}

impl fmt::Display for NPlusSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.groups.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            let star = if g.expand { "*" } else { "" };
            if g.viewpoints.len() == 1 {
                write!(f, "{}{star}", g.viewpoints[0])?;
            } else {
                let tags: Vec<&str> = g.viewpoints.iter().map(|v| v.tag()).collect();
                write!(f, "({}){star}", tags.join(" "))?;
            }
        }
        Ok(())
    }
}

impl FromStr for NPlusSpec {
    type Err = PulseError;
    fn from_str(s: &str) -> Result<Self> {
        NPlusSpec::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expansion {
    /// Add offset i+1 at global iteration i; reaches grams with holes.
    Backwards,
    /// Add offset Δ+1 to each compound; contiguous grams only.
    Continuous,
    /// Shift the whole compound one step back and add a new σ=0 basis.
    Forwards,
}

impl fmt::Display for Expansion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Expansion::Backwards => "backwards",
            Expansion::Continuous => "continuous",
            Expansion::Forwards => "forwards",
        })
    }
}

impl FromStr for Expansion {
    type Err = PulseError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "backwards" => Ok(Expansion::Backwards),
            "continuous" => Ok(Expansion::Continuous),
            "forwards" => Ok(Expansion::Forwards),
            other => Err(PulseError::Config(format!("unknown expansion {other:?}"))),
        }
    }
}

/// Values each viewpoint takes in some data, as feature values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValueRanges {
    ranges: BTreeMap<ViewpointId, BTreeSet<ViewpointValue>>,
}

impl ValueRanges {
    pub fn from_views<'a>(views: impl IntoIterator<Item = &'a SequenceView>) -> Self {
        let mut ranges: BTreeMap<ViewpointId, BTreeSet<ViewpointValue>> = BTreeMap::new();
        for view in views {
            for vp in ViewpointId::ALL {
                if vp.needs_key() && view.key().is_none() {
                    continue;
                }
                let set = ranges.entry(vp).or_default();
                for t in 0..view.len() {
                    if let Some(v) = view.value(vp, t) {
                        set.extend(v.feature_values());
                    }
                }
            }
        }
        ValueRanges { ranges }
    }

    pub fn values(&self, vp: ViewpointId) -> impl Iterator<Item = ViewpointValue> + '_ {
        self.ranges.get(&vp).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn count(&self, vp: ViewpointId) -> usize {
        self.ranges.get(&vp).map_or(0, |s| s.len())
    }
}

/// Length-one σ=0 compounds for every declared type and occurring value.
pub fn init_features(spec: &NPlusSpec, ranges: &ValueRanges) -> Vec<CompoundFeature> {
    let mut out = Vec::new();
    for vp in spec.viewpoints() {
        if !vp.is_predictive() {
            continue;
        }
        for v in ranges.values(vp) {
            if let Ok(f) = CompoundFeature::single(vp, v) {
                out.push(f);
            }
        }
    }
    out
}

fn push_new(out: &mut Vec<CompoundFeature>, seen: &mut HashSet<CompoundFeature>, fs: &FeatureSet, f: CompoundFeature) {
    if !fs.contains(&f) && seen.insert(f.clone()) {
        out.push(f);
    }
}

/// Extends every compound of an expanding group by one basis feature at
/// offset `sigma_of(f)`, for each value of each viewpoint in the group.
fn expand_at(fs: &FeatureSet, spec: &NPlusSpec, ranges: &ValueRanges, sigma_of: impl Fn(&CompoundFeature) -> u32) -> Vec<CompoundFeature> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for f in fs.features() {
        for g in spec.groups.iter().filter(|g| g.expand && g.covers(f)) {
            let sigma = sigma_of(f);
            for &vp in &g.viewpoints {
                if f.basis().iter().any(|b| b.viewpoint == vp && b.sigma == sigma) {
                    continue;
                }
                for v in ranges.values(vp) {
                    if let Ok(b) = BasisFeature::new(vp, sigma, v) {
                        if let Ok(c) = f.conjoin(b) {
                            push_new(&mut out, &mut seen, fs, c);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn expand_backwards(fs: &FeatureSet, spec: &NPlusSpec, ranges: &ValueRanges, iteration: u32) -> Vec<CompoundFeature> {
    expand_at(fs, spec, ranges, |_| iteration + 1)
}

pub fn expand_continuous(fs: &FeatureSet, spec: &NPlusSpec, ranges: &ValueRanges) -> Vec<CompoundFeature> {
    expand_at(fs, spec, ranges, |f| f.max_sigma() + 1)
}

/// Parents stay in `fs`; only the shifted children are proposed. Compounds
/// containing types that only exist at σ=0 cannot be shifted and are
/// skipped.
pub fn expand_forwards(fs: &FeatureSet, spec: &NPlusSpec, ranges: &ValueRanges) -> Vec<CompoundFeature> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for f in fs.features().iter().filter(|f| f.is_shiftable()) {
        for g in spec.groups.iter().filter(|g| g.expand && g.covers(f)) {
            let shifted = f.shifted_basis(1);
            for &vp in &g.viewpoints {
                for v in ranges.values(vp) {
                    let Ok(b) = BasisFeature::new(vp, 0, v) else { continue };
                    let mut basis = shifted.clone();
                    basis.push(b);
                    if let Ok(c) = CompoundFeature::new(basis) {
                        push_new(&mut out, &mut seen, fs, c);
                    }
                }
            }
        }
    }
    out
}

pub fn expand(kind: Expansion, fs: &FeatureSet, spec: &NPlusSpec, ranges: &ValueRanges, iteration: u32) -> Vec<CompoundFeature> {
    match kind {
        Expansion::Backwards => expand_backwards(fs, spec, ranges, iteration),
        Expansion::Continuous => expand_continuous(fs, spec, ranges),
        Expansion::Forwards => expand_forwards(fs, spec, ranges),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    Constant,
    Linear,
    LinearNoZero,
    Polynomial,
    Exponential,
    ExponentialWithZero,
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::Constant => "constant",
            PenaltyKind::Linear => "linear",
            PenaltyKind::LinearNoZero => "linear_no_zero",
            PenaltyKind::Polynomial => "polynomial",
            PenaltyKind::Exponential => "exponential",
            PenaltyKind::ExponentialWithZero => "exponential_with_zero",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = PulseError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "constant" => PenaltyKind::Constant,
            "linear" => PenaltyKind::Linear,
            "linear_no_zero" => PenaltyKind::LinearNoZero,
            "polynomial" => PenaltyKind::Polynomial,
            "exponential" => PenaltyKind::Exponential,
            "exponential_with_zero" => PenaltyKind::ExponentialWithZero,
            other => return Err(PulseError::Config(format!("unknown penalty kind {other:?}"))),
        })
    }
}

/// A depth-dependent factor ρ(f) = shape(Δ_f).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyShape {
    pub kind: PenaltyKind,
    pub alpha: f64,
}

impl PenaltyShape {
    pub fn constant() -> Self {
        PenaltyShape {
            kind: PenaltyKind::Constant,
            alpha: 1.0,
        }
    }

    pub fn exponential(alpha: f64) -> Self {
        PenaltyShape {
            kind: PenaltyKind::Exponential,
            alpha,
        }
    }

    pub fn factor(&self, depth: u32) -> f64 {
        let d = depth as f64;
        let a = self.alpha;
        match self.kind {
            PenaltyKind::Constant => 1.0,
            PenaltyKind::Linear => a * d,
            PenaltyKind::LinearNoZero => a * d + 1.0,
            PenaltyKind::Polynomial => d.powf(a),
            PenaltyKind::Exponential => a.powf(d),
            PenaltyKind::ExponentialWithZero => {
                if depth > 0 {
                    a.powf(d)
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for PenaltyShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.alpha)
    }
}

impl FromStr for PenaltyShape {
    type Err = PulseError;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, alpha) = s.split_once(':').unwrap_or((s, "1"));
        let alpha: f64 = alpha
            .parse()
            .map_err(|_| PulseError::Config(format!("bad penalty exponent in {s:?}")))?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(PulseError::Config(format!("penalty exponent must be positive in {s:?}")));
        }
        Ok(PenaltyShape {
            kind: kind.parse()?,
            alpha,
        })
    }
}

/// ρ(f) for a compound: Δ_f is its largest offset.
pub fn per_feature_factor(f: &CompoundFeature, shape: &PenaltyShape) -> f64 {
    shape.factor(f.max_sigma())
}

/// Exponential decay of a global strength over song position `t`.
pub fn decayed(lambda_init: f64, t: usize, tau: Option<f64>) -> f64 {
    match tau {
        Some(tau) => lambda_init * (-(t as f64) / tau).exp(),
        None => lambda_init,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationSpec {
    pub lambda1: f64,
    pub lambda2: f64,
    pub l1: PenaltyShape,
    pub l2: PenaltyShape,
    /// Decay constants for λ1 and λ2 along the song (STM only).
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
}

impl RegularizationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok_tau = |t: Option<f64>| t.is_none_or(|t| t > 0.0);
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(PulseError::Config("regularization strengths must be non-negative".into()));
        }
        if !(self.l1.alpha > 0.0 && self.l2.alpha > 0.0) {
            return Err(PulseError::Config("penalty exponents must be positive".into()));
        }
        if !(ok_tau(self.tau1) && ok_tau(self.tau2)) {
            return Err(PulseError::Config("decay constants must be positive".into()));
        }
        Ok(())
    }

    /// Per-feature strengths at song position `t` (pass 0 for the LTM).
    pub fn penalties(&self, features: &[CompoundFeature], t: usize) -> Penalties {
        let l1 = decayed(self.lambda1, t, self.tau1);
        let l2 = decayed(self.lambda2, t, self.tau2);
        Penalties {
            l1: features.iter().map(|f| l1 * per_feature_factor(f, &self.l1)).collect(),
            l2: features.iter().map(|f| l2 * per_feature_factor(f, &self.l2)).collect(),
        }
    }
}

impl fmt::Display for RegularizationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lambda1={} l1={} lambda2={} l2={}", self.lambda1, self.l1, self.lambda2, self.l2)?;
        if let Some(t) = self.tau1 {
            write!(f, " tau1={t}")?;
        }
        if let Some(t) = self.tau2 {
            write!(f, " tau2={t}")?;
        }
        Ok(())
    }
}

impl FromStr for RegularizationSpec {
    type Err = PulseError;
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = RegularizationSpec {
            lambda1: 0.0,
            lambda2: 0.0,
            l1: PenaltyShape::constant(),
            l2: PenaltyShape::constant(),
            tau1: None,
            tau2: None,
        };
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| PulseError::Config(format!("bad regularization entry {tok:?}")))?;
            let num = || v.parse::<f64>().map_err(|_| PulseError::Config(format!("bad number in {tok:?}")));
            match k {
                "lambda1" => spec.lambda1 = num()?,
                "lambda2" => spec.lambda2 = num()?,
                "l1" => spec.l1 = v.parse()?,
                "l2" => spec.l2 = v.parse()?,
                "tau1" => spec.tau1 = Some(num()?),
                "tau2" => spec.tau2 = Some(num()?),
                _ => return Err(PulseError::Config(format!("unknown regularization key {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterCriterion {
    /// Symmetric difference of consecutive sets below γ·|F|.
    Fluctuation,
    /// Change in set size below γ·|F|.
    SetSize,
    /// Change of the smoothed validation cross-entropy below γ.
    ValidationEma,
}

impl FromStr for OuterCriterion {
    type Err = PulseError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fluctuation" => Ok(OuterCriterion::Fluctuation),
            "set_size" => Ok(OuterCriterion::SetSize),
            "validation_ema" => Ok(OuterCriterion::ValidationEma),
            other => Err(PulseError::Config(format!("unknown outer criterion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterConvergence {
    pub criterion: OuterCriterion,
    pub gamma: f64,
    pub tau: f64,
    pub max_iterations: usize,
    /// Stop without convergence once the active set grows past this.
    pub feature_cap: usize,
    /// Share of training sequences held out for the validation criterion.
    pub validation_fraction: f64,
}

impl Default for OuterConvergence {
    fn default() -> Self {
        OuterConvergence {
            criterion: OuterCriterion::Fluctuation,
            gamma: 0.01,
            tau: 0.9,
            max_iterations: 50,
            feature_cap: 2000,
            validation_fraction: 0.1,
        }
    }
}

/// Criterion (a): |F_j Δ F_{j-1}| < γ·|F_j|.
pub fn fluctuation_converged(current: &HashSet<&CompoundFeature>, previous: &HashSet<&CompoundFeature>, gamma: f64) -> bool {
    let sym = current.symmetric_difference(previous).count();
    (sym as f64) < gamma * current.len() as f64
}

/// Criterion (b): ||F_j| − |F_{j-1}|| < γ·|F_j|.
pub fn set_size_converged(current: usize, previous: usize, gamma: f64) -> bool {
    (current.abs_diff(previous) as f64) < gamma * current as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtmConfig {
    pub nplus: NPlusSpec,
    pub expansion: Expansion,
    pub reg: RegularizationSpec,
    pub opt: OptimizerConfig,
    pub inner: ConvergenceConfig,
    pub outer: OuterConvergence,
    pub new_penalty: NewPenalty,
    pub keys: Option<KeyPolicy>,
}

impl Default for LtmConfig {
    fn default() -> Self {
        LtmConfig {
            nplus: NPlusSpec::parse("P I* C* K M_K").expect("default spec parses"),
            expansion: Expansion::Backwards,
            reg: RegularizationSpec {
                lambda1: 1.0,
                lambda2: 0.0,
                l1: PenaltyShape::exponential(2.0),
                l2: PenaltyShape::constant(),
                tau1: None,
                tau2: None,
            },
            opt: OptimizerConfig::default(),
            inner: ConvergenceConfig::default(),
            outer: OuterConvergence::default(),
            new_penalty: NewPenalty::default(),
            keys: Some(KeyPolicy {
                profiles: KeyProfiles::temperley(),
                duration_weighted: true,
            }),
        }
    }
}

/// What happened in one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub candidates: usize,
    pub after_filter: usize,
    pub after_shrink: usize,
    pub epochs: usize,
    pub reason: StopReason,
    /// Mean per-datum training NLL (nats) in the last epoch.
    pub loss: f64,
    pub validation_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub corpus_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub features: FeatureSet,
    pub alphabet: Alphabet,
    pub nplus: NPlusSpec,
    pub expansion: Expansion,
    pub reg: RegularizationSpec,
    pub keys: Option<KeyPolicy>,
    pub provenance: Provenance,
    pub converged: bool,
    pub log: Vec<IterationLog>,
}

fn check_keys(spec: &NPlusSpec, keys: Option<&KeyPolicy>) -> Result<()> {
    if keys.is_none() {
        if let Some(vp) = spec.viewpoints().into_iter().find(|vp| vp.needs_key()) {
            return Err(PulseError::MissingKey(vp));
        }
    }
    Ok(())
}

/// Result of one grow → filter → optimize → shrink round.
struct Round {
    fs: FeatureSet,
    state: OptimizerState,
    candidates: usize,
    after_filter: usize,
    epochs: usize,
    reason: StopReason,
    loss: f64,
}

#[allow(clippy::too_many_arguments)]
fn grow_optimize_shrink(
    data: &[Datum],
    alphabet: &Alphabet,
    fs: &FeatureSet,
    state: &OptimizerState,
    candidates: Vec<CompoundFeature>,
    reg: &RegularizationSpec,
    t: usize,
    opt: &OptimizerConfig,
    inner: &ConvergenceConfig,
    policy: NewPenalty,
) -> Result<Round> {
    let mut grown = fs.clone();
    let n_candidates = candidates.len();
    for c in candidates {
        grown.push(c, 0.0);
    }
    let m = build_matrix(data, &grown, alphabet);
    let (filtered, m, kept) = filter_irrelevant(&grown, &m);
    let survivors: Vec<usize> = kept.iter().copied().filter(|&i| i < fs.len()).collect();
    let new_count = kept.len() - survivors.len();
    let start = optimizer::hot_start(state, &survivors, new_count, opt, policy);
    let pen = reg.penalties(filtered.features(), t);
    let out = optimizer::run(&m, start, opt, inner, &pen)?;
    let keep: Vec<usize> = (0..filtered.len()).filter(|&i| out.state.theta[i] != 0.0).collect();
    let mut shrunk = filtered.select(&keep);
    shrunk.set_weights(keep.iter().map(|&i| out.state.theta[i]).collect());
    let state = optimizer::hot_start(&out.state, &keep, 0, opt, policy);
    Ok(Round {
        fs: shrunk,
        state,
        candidates: n_candidates,
        after_filter: filtered.len(),
        epochs: out.epochs,
        reason: out.reason,
        loss: out.loss,
    })
}

fn validation_bits(data: &[Datum], fs: &FeatureSet, alphabet: &Alphabet) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let m = build_matrix(data, fs, alphabet);
    model::objective(&m, fs.weights()).mean() / std::f64::consts::LN_2
}

/// Trains a long-term model on `corpus`.
pub fn fit_ltm(corpus: &Corpus, cfg: &LtmConfig) -> Result<TrainedModel> {
    if corpus.is_empty() {
        return Err(PulseError::Config("empty training corpus".into()));
    }
    check_keys(&cfg.nplus, cfg.keys.as_ref())?;
    cfg.reg.validate()?;
    cfg.opt.validate()?;
    cfg.inner.validate()?;
    let use_validation = cfg.outer.criterion == OuterCriterion::ValidationEma;
    let (train, val) = if use_validation {
        let (t, v) = corpus
            .holdout(cfg.outer.validation_fraction, cfg.opt.seed)
            .map_err(|e| PulseError::Config(e.to_string()))?;
        (t, Some(v))
    } else {
        (corpus.clone(), None)
    };
    let data = DataSet::from_corpus(&train, cfg.keys.as_ref());
    let val_data = val.as_ref().map(|v| DataSet::from_corpus(v, cfg.keys.as_ref()));
    let ranges = ValueRanges::from_views(data.views.iter().map(|v| v.as_ref()));
    let init = init_features(&cfg.nplus, &ranges);

    let mut fs = FeatureSet::new();
    let mut state = OptimizerState::new(0, &cfg.opt);
    let mut log = Vec::new();
    let mut converged = false;
    let mut val_ema: Option<f64> = None;
    let mut total_epochs = 0;
    let mut iterations = 0;
    for j in 0..cfg.outer.max_iterations {
        let mut candidates: Vec<CompoundFeature> = init.iter().filter(|f| !fs.contains(f)).cloned().collect();
        let mut seen: HashSet<CompoundFeature> = candidates.iter().cloned().collect();
        // iteration 0 only initializes, so the first expansion reaches offset 1
        for c in expand(cfg.expansion, &fs, &cfg.nplus, &ranges, j.saturating_sub(1) as u32) {
            if seen.insert(c.clone()) {
                candidates.push(c);
            }
        }
        let round = grow_optimize_shrink(
            &data.data,
            &corpus.alphabet,
            &fs,
            &state,
            candidates,
            &cfg.reg,
            0,
            &cfg.opt,
            &cfg.inner,
            cfg.new_penalty,
        )?;
        total_epochs += round.epochs;
        iterations = j + 1;
        let previous = std::mem::replace(&mut fs, round.fs);
        state = round.state;

        let h = val_data.as_ref().map(|v| validation_bits(&v.data, &fs, &corpus.alphabet));
        log.push(IterationLog {
            iteration: j,
            candidates: round.candidates,
            after_filter: round.after_filter,
            after_shrink: fs.len(),
            epochs: round.epochs,
            reason: round.reason,
            loss: round.loss,
            validation_bits: h,
        });
        if fs.len() > cfg.outer.feature_cap {
            break;
        }
        let stop = match cfg.outer.criterion {
            _ if fs.is_empty() && previous.is_empty() && j > 0 => true,
            OuterCriterion::Fluctuation => fluctuation_converged(&fs.as_set(), &previous.as_set(), cfg.outer.gamma),
            OuterCriterion::SetSize => set_size_converged(fs.len(), previous.len(), cfg.outer.gamma),
            OuterCriterion::ValidationEma => {
                let h = h.unwrap_or(0.0);
                let prev = val_ema;
                let next = prev.map_or(h, |p| cfg.outer.tau * p + (1.0 - cfg.outer.tau) * h);
                val_ema = Some(next);
                prev.is_some_and(|p| (next - p).abs() < cfg.outer.gamma)
            }
        };
        if stop {
            converged = true;
            break;
        }
    }

    // train the final set to loss convergence
    if !fs.is_empty() {
        let polish = ConvergenceConfig {
            use_active: false,
            ..cfg.inner.clone()
        };
        let round = grow_optimize_shrink(&data.data, &corpus.alphabet, &fs, &state, Vec::new(), &cfg.reg, 0, &cfg.opt, &polish, cfg.new_penalty)?;
        total_epochs += round.epochs;
        fs = round.fs;
    }

    Ok(TrainedModel {
        features: fs,
        alphabet: corpus.alphabet.clone(),
        nplus: cfg.nplus.clone(),
        expansion: cfg.expansion,
        reg: cfg.reg.clone(),
        keys: cfg.keys.clone(),
        provenance: Provenance {
            corpus_hash: corpus.content_hash(),
            seed: cfg.opt.seed,
            epochs: total_epochs,
            iterations,
        },
        converged,
        log,
    })
}

const MODEL_MAGIC: &str = "pulse-model 1";

impl TrainedModel {
    /// A model over a hand-picked feature set, for experiments and tests.
    /// Key features get the bundled profiles with duration weighting.
    pub fn from_features(features: FeatureSet, alphabet: Alphabet) -> Self {
        let vps: BTreeSet<ViewpointId> = features.features().iter().flat_map(|f| f.viewpoints()).collect();
        let nplus = if vps.iter().any(|v| v.is_predictive()) {
            NPlusSpec {
                groups: vec![Group {
                    viewpoints: vps.iter().copied().collect(),
                    expand: false,
                }],
            }
        } else {
            NPlusSpec::parse("P").expect("valid spec")
        };
        let keys = nplus.needs_key().then(|| KeyPolicy {
            profiles: KeyProfiles::temperley(),
            duration_weighted: true,
        });
        TrainedModel {
            features,
            alphabet,
            nplus,
            expansion: Expansion::Backwards,
            reg: RegularizationSpec {
                lambda1: 0.0,
                lambda2: 0.0,
                l1: PenaltyShape::constant(),
                l2: PenaltyShape::constant(),
                tau1: None,
                tau2: None,
            },
            keys,
            provenance: Provenance {
                corpus_hash: "none".into(),
                seed: 0,
                epochs: 0,
                iterations: 0,
            },
            converged: true,
            log: Vec::new(),
        }
    }

    pub fn data_for(&self, corpus: &Corpus) -> DataSet {
        DataSet::from_corpus(corpus, self.keys.as_ref())
    }

    /// Predictive distributions for every event of every sequence.
    pub fn predict_corpus(&self, corpus: &Corpus) -> Vec<Vec<PredictiveDistribution>> {
        let data = self.data_for(corpus);
        let m = build_matrix(&data.data, &self.features, &self.alphabet);
        data.ranges
            .iter()
            .map(|r| r.clone().map(|d| model::predict(&m, self.features.weights(), d)).collect())
            .collect()
    }

    /// Distribution over the event at position `t` of `view`, using only the
    /// pitches before `t`.
    pub fn predict_at(&self, view: &Arc<SequenceView>, t: usize) -> PredictiveDistribution {
        let datum = Datum {
            view: Arc::clone(view),
            t,
        };
        let rows = features::firing(&datum, &self.features, &self.alphabet);
        let w = self.features.weights();
        let scores: Vec<f64> = rows.iter().map(|r| r.iter().map(|&f| w[f as usize]).sum()).collect();
        PredictiveDistribution::from_scores(&scores)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MODEL_MAGIC);
        out.push('\n');
        out.push_str(&format!("nplus: {}\n", self.nplus));
        out.push_str(&format!("expansion: {}\n", self.expansion));
        out.push_str(&format!("regularization: {}\n", self.reg));
        let pitches: Vec<String> = self.alphabet.pitches().iter().map(|p| p.to_string()).collect();
        out.push_str(&format!("alphabet: {}\n", pitches.join(" ")));
        match &self.keys {
            None => out.push_str("keys: none\n"),
            Some(k) => {
                let row = |r: &[f64; 12]| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
                out.push_str(&format!("keys: duration_weighted={}\n", k.duration_weighted));
                out.push_str(&format!("major: {}\n", row(&k.profiles.major)));
                out.push_str(&format!("minor: {}\n", row(&k.profiles.minor)));
            }
        }
        let p = &self.provenance;
        out.push_str(&format!(
            "provenance: corpus={} seed={} epochs={} iterations={}\n",
            p.corpus_hash, p.seed, p.epochs, p.iterations
        ));
        out.push_str(&format!("converged: {}\n", self.converged));
        out.push_str(&format!("features: {}\n", self.features.len()));
        out.push_str(&self.features.to_lines());
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |key: &str| -> Result<(usize, String)> {
            let (n, line) = lines.next().ok_or(PulseError::Format {
                line: 0,
                message: format!("missing {key:?} line"),
            })?;
            let value = if key.is_empty() {
                line.to_string()
            } else {
                line.strip_prefix(&format!("{key}: "))
                    .ok_or(PulseError::Format {
                        line: n,
                        message: format!("expected {key:?}"),
                    })?
                    .to_string()
            };
            Ok((n, value))
        };
        let fmt_err = |line: usize, message: String| PulseError::Format { line, message };
        let (n, magic) = next("")?;
        if magic.trim() != MODEL_MAGIC {
            return Err(fmt_err(n, "not a model file".into()));
        }
        let (n, v) = next("nplus")?;
        let nplus = NPlusSpec::parse(&v).map_err(|e| fmt_err(n, e.to_string()))?;
        let (n, v) = next("expansion")?;
        let expansion = v.parse().map_err(|e: PulseError| fmt_err(n, e.to_string()))?;
        let (n, v) = next("regularization")?;
        let reg = v.parse().map_err(|e: PulseError| fmt_err(n, e.to_string()))?;
        let (n, v) = next("alphabet")?;
        let pitches = v
            .split_whitespace()
            .map(|p| p.parse::<i32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| fmt_err(n, e.to_string()))?;
        if pitches.is_empty() {
            return Err(fmt_err(n, "empty alphabet".into()));
        }
        let alphabet = Alphabet::new(pitches);
        let (n, v) = next("keys")?;
        let keys = if v == "none" {
            None
        } else {
            let dw = match v.strip_prefix("duration_weighted=") {
                Some("true") => true,
                Some("false") => false,
                _ => return Err(fmt_err(n, format!("bad keys line {v:?}"))),
            };
            let (_, major) = next("major")?;
            let (n, minor) = next("minor")?;
            let profiles = KeyProfiles::parse(&format!("{major}\n{minor}")).map_err(|e| fmt_err(n, e))?;
            Some(KeyPolicy {
                profiles,
                duration_weighted: dw,
            })
        };
        let (n, v) = next("provenance")?;
        let mut prov = Provenance {
            corpus_hash: String::new(),
            seed: 0,
            epochs: 0,
            iterations: 0,
        };
        for tok in v.split_whitespace() {
            let (k, val) = tok.split_once('=').ok_or_else(|| fmt_err(n, format!("bad provenance entry {tok:?}")))?;
            let int = || val.parse::<u64>().map_err(|e| fmt_err(n, e.to_string()));
            match k {
                "corpus" => prov.corpus_hash = val.to_string(),
                "seed" => prov.seed = int()?,
                "epochs" => prov.epochs = int()? as usize,
                "iterations" => prov.iterations = int()? as usize,
                _ => return Err(fmt_err(n, format!("unknown provenance key {k:?}"))),
            }
        }
        let (n, v) = next("converged")?;
        let converged = v.parse::<bool>().map_err(|e| fmt_err(n, e.to_string()))?;
        let (n, v) = next("features")?;
        let count: usize = v.parse().map_err(|_| fmt_err(n, format!("bad feature count {v:?}")))?;
        let mut fs = FeatureSet::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (f, w) = FeatureSet::parse_line(line).map_err(|e| fmt_err(n, e.to_string()))?;
            if !fs.push(f, w) {
                return Err(fmt_err(n, "duplicate feature".into()));
            }
        }
        if fs.len() != count {
            return Err(fmt_err(0, format!("expected {count} features, found {}", fs.len())));
        }
        check_keys(&nplus, keys.as_ref())?;
        Ok(TrainedModel {
            features: fs,
            alphabet,
            nplus,
            expansion,
            reg,
            keys,
            provenance: prov,
            converged,
            log: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|source| PulseError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PulseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StmConfig {
    pub nplus: NPlusSpec,
    pub expansion: Expansion,
    pub reg: RegularizationSpec,
    pub opt: OptimizerConfig,
    pub inner: ConvergenceConfig,
    pub new_penalty: NewPenalty,
}

impl Default for StmConfig {
    fn default() -> Self {
        StmConfig {
            nplus: NPlusSpec::parse("P I* F1").expect("default spec parses"),
            expansion: Expansion::Forwards,
            reg: RegularizationSpec {
                lambda1: 0.05,
                lambda2: 0.05,
                l1: PenaltyShape::exponential(1.2),
                l2: PenaltyShape::constant(),
                tau1: Some(100.0),
                tau2: Some(8.0),
            },
            opt: OptimizerConfig::default(),
            inner: ConvergenceConfig {
                max_epochs: 100,
                ..ConvergenceConfig::default()
            },
            new_penalty: NewPenalty::default(),
        }
    }
}

/// Online short-term model over one melody: the prediction for event t uses
/// a model trained on events 0..t only. `ranges` supplies candidate values
/// and should come from the whole dataset so that every melody sees the same
/// candidate space.
pub fn fit_predict_stm(view: &Arc<SequenceView>, alphabet: &Alphabet, ranges: &ValueRanges, cfg: &StmConfig) -> Result<Vec<PredictiveDistribution>> {
    if cfg.nplus.needs_key() && view.key().is_none() {
        let vp = cfg.nplus.viewpoints().into_iter().find(|v| v.needs_key()).unwrap_or(ViewpointId::K);
        return Err(PulseError::MissingKey(vp));
    }
    cfg.reg.validate()?;
    let init = init_features(&cfg.nplus, ranges);
    let data: Vec<Datum> = (0..view.len())
        .map(|t| Datum {
            view: Arc::clone(view),
            t,
        })
        .collect();
    let mut fs = FeatureSet::new();
    let mut state = OptimizerState::new(0, &cfg.opt);
    let mut out = Vec::with_capacity(view.len());
    for t in 0..view.len() {
        out.push(if fs.is_empty() {
            PredictiveDistribution::uniform(alphabet.len())
        } else {
            let rows = features::firing(&data[t], &fs, alphabet);
            let w = fs.weights();
            let scores: Vec<f64> = rows.iter().map(|r| r.iter().map(|&f| w[f as usize]).sum()).collect();
            PredictiveDistribution::from_scores(&scores)
        });
        if !alphabet.contains(view.pitches()[t]) {
            return Err(PulseError::Config(format!("pitch {} is not in the alphabet", view.pitches()[t])));
        }
        let mut candidates: Vec<CompoundFeature> = init.iter().filter(|f| !fs.contains(f)).cloned().collect();
        let mut seen: HashSet<CompoundFeature> = candidates.iter().cloned().collect();
        for c in expand(cfg.expansion, &fs, &cfg.nplus, ranges, t as u32) {
            if seen.insert(c.clone()) {
                candidates.push(c);
            }
        }
        let round = grow_optimize_shrink(&data[..=t], alphabet, &fs, &state, candidates, &cfg.reg, t, &cfg.opt, &cfg.inner, cfg.new_penalty)?;
        fs = round.fs;
        state = round.state;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EventSequence;

    fn p(v: i32) -> ViewpointValue {
        ViewpointValue::Int(v)
    }

    fn ranges_for(pitches: &[i32]) -> ValueRanges {
        let s = EventSequence::from_pitches("r", pitches).unwrap();
        let view = SequenceView::new(&s, None);
        ValueRanges::from_views([&view])
    }

    #[test]
    fn parse_specs() {
        let s = NPlusSpec::parse("P I* C* K M_K").unwrap();
        assert_eq!(s.groups.len(), 5);
        assert!(s.groups[1].expand && !s.groups[0].expand);
        assert_eq!(s.groups[4].viewpoints, vec![ViewpointId::MK]);
        assert_eq!(s.to_string(), "P I* C* K MK");
        let compact = NPlusSpec::parse("PI*C*KM_K").unwrap();
        assert_eq!(compact, s);
        let g = NPlusSpec::parse("(I C)* P").unwrap();
        assert_eq!(g.groups[0].viewpoints, vec![ViewpointId::I, ViewpointId::C]);
        assert_eq!(NPlusSpec::parse(&g.to_string()).unwrap(), g);
        assert!(NPlusSpec::parse("K*").is_err());
        assert!(NPlusSpec::parse("M").is_err());
        assert!(NPlusSpec::parse("P P").is_err());
        assert!(NPlusSpec::parse("Q").is_err());
        assert!(NPlusSpec::parse("(I C").is_err());
    }

    #[test]
    fn init_counts() {
        let r = ranges_for(&[60, 62, 64, 62]);
        assert_eq!(init_features(&NPlusSpec::parse("P").unwrap(), &r).len(), 3);
        assert!(init_features(&NPlusSpec::parse("C").unwrap(), &r).len() <= 3);
    }

    #[test]
    fn backwards_iteration_zero_adds_sigma_one() {
        let r = ranges_for(&[60, 62]);
        let fs = FeatureSet::from_pairs(init_features(&NPlusSpec::parse("P").unwrap(), &r).into_iter().map(|f| (f, 0.0)));
        let c = expand_backwards(&fs, &NPlusSpec::parse("P*").unwrap(), &r, 0);
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|f| f.max_sigma() == 1));
        assert!(expand_backwards(&fs, &NPlusSpec::parse("P").unwrap(), &r, 0).is_empty());
    }

    #[test]
    fn continuous_extends_past_the_deepest_offset() {
        let r = ranges_for(&[60, 62]);
        let f = CompoundFeature::new(vec![
            BasisFeature::new(ViewpointId::P, 2, p(60)).unwrap(),
            BasisFeature::new(ViewpointId::P, 0, p(60)).unwrap(),
        ])
        .unwrap();
        let fs = FeatureSet::from_pairs([(f, 0.0)]);
        let c = expand_continuous(&fs, &NPlusSpec::parse("P*").unwrap(), &r);
        assert!(c.iter().all(|f| f.max_sigma() == 3));
    }

    #[test]
    fn forwards_shifts_then_adds() {
        let r = ranges_for(&[60, 62]);
        let fs = FeatureSet::from_pairs([(CompoundFeature::single(ViewpointId::P, p(60)).unwrap(), 0.0)]);
        let c = expand_forwards(&fs, &NPlusSpec::parse("P*").unwrap(), &r);
        let expected: Vec<CompoundFeature> = [60, 62]
            .iter()
            .map(|&v| {
                CompoundFeature::new(vec![
                    BasisFeature::new(ViewpointId::P, 1, p(60)).unwrap(),
                    BasisFeature::new(ViewpointId::P, 0, p(v)).unwrap(),
                ])
                .unwrap()
            })
            .collect();
        assert_eq!(c, expected);
    }

    #[test]
    fn factors() {
        assert_eq!(PenaltyShape::exponential(2.0).factor(3), 8.0);
        let poly = PenaltyShape { kind: PenaltyKind::Polynomial, alpha: 2.0 };
        assert_eq!(poly.factor(0), 0.0);
        let ewz = PenaltyShape { kind: PenaltyKind::ExponentialWithZero, alpha: 2.0 };
        assert_eq!(ewz.factor(0), 0.0);
        assert_eq!(ewz.factor(2), 4.0);
        let lin = PenaltyShape { kind: PenaltyKind::Linear, alpha: 0.5 };
        assert_eq!(lin.factor(4), 2.0);
        let lnz = PenaltyShape { kind: PenaltyKind::LinearNoZero, alpha: 0.5 };
        assert_eq!(lnz.factor(0), 1.0);
        assert_eq!(PenaltyShape::constant().factor(7), 1.0);
    }

    #[test]
    fn decay_schedule() {
        let reg = RegularizationSpec {
            lambda1: 0.5,
            lambda2: 0.25,
            l1: PenaltyShape::exponential(2.0),
            l2: PenaltyShape::constant(),
            tau1: Some(10.0),
            tau2: Some(4.0),
        };
        let f = CompoundFeature::new(vec![
            BasisFeature::new(ViewpointId::P, 1, p(60)).unwrap(),
            BasisFeature::new(ViewpointId::P, 0, p(62)).unwrap(),
        ])
        .unwrap();
        let pen = reg.penalties(&[f], 5);
        assert!((pen.l1[0] - 0.5 * (-0.5f64).exp() * 2.0).abs() < 1e-15);
        assert!((pen.l2[0] - 0.25 * (-1.25f64).exp()).abs() < 1e-15);
        assert_eq!(decayed(3.0, 100, None), 3.0);
    }

    #[test]
    fn fluctuation_rule() {
        let a = CompoundFeature::single(ViewpointId::P, p(60)).unwrap();
        let b = CompoundFeature::single(ViewpointId::P, p(62)).unwrap();
        let cur: HashSet<&CompoundFeature> = [&a, &b].into_iter().collect();
        let prev: HashSet<&CompoundFeature> = [&a].into_iter().collect();
        // one change against two features
        assert!(!fluctuation_converged(&cur, &prev, 0.5));
        assert!(fluctuation_converged(&cur, &prev, 0.51));
        assert!(set_size_converged(100, 100, 0.01));
        assert!(!set_size_converged(100, 99, 0.01));
    }

    #[test]
    fn regularization_text_round_trip() {
        let reg = StmConfig::default().reg;
        assert_eq!(reg.to_string().parse::<RegularizationSpec>().unwrap(), reg);
        assert!("lambda1=-1".parse::<RegularizationSpec>().is_err());
        assert!("l1=cubic:2".parse::<RegularizationSpec>().is_err());
    }
}
