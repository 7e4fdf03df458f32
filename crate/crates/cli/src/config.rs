//! The TOML run configuration. Every block and key is optional, defaults
//! are the tuned values of the library, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use pulse_core::ensemble::{CombinationRule, BIAS_GRID};
use pulse_core::evalgen::{GenerationConfig, GenerationMethod};
use pulse_core::features::KeyPolicy;
use pulse_core::optimizer::{Algorithm, ConvergenceConfig, NewPenalty, OptimizerConfig};
use pulse_core::pulse::{Expansion, LtmConfig, NPlusSpec, OuterConvergence, OuterCriterion, PenaltyShape, RegularizationSpec, StmConfig};
use pulse_core::viewpoints::KeyProfiles;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusBlock,
    pub ltm: ModelBlock,
    pub stm: ModelBlock,
    pub generation: GenerationBlock,
    pub combination: CombinationBlock,
    pub ngram: NGramBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusBlock {
    pub path: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub folds: Option<PathBuf>,
    pub k: usize,
}

impl Default for CorpusBlock {
    fn default() -> Self {
        CorpusBlock {
            path: None,
            test: None,
            folds: None,
            k: 10,
        }
    }
}

/// Settings shared by the long- and short-term model blocks. Keys left
/// unset take the defaults of the respective model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub nplus: Option<String>,
    pub expansion: Option<String>,
    /// "min_survivor" or "zero".
    pub new_penalty: Option<String>,
    /// Attach key estimates (needed by K, T, MK, MT).
    pub keys: Option<bool>,
    pub key_profiles: Option<PathBuf>,
    pub duration_weighted: Option<bool>,
    pub regularization: RegularizationBlock,
    pub optimizer: OptimizerBlock,
    pub convergence: ConvergenceBlock,
    pub outer: OuterBlock,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizationBlock {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    /// `kind:alpha`, e.g. "exponential:2".
    pub l1: Option<String>,
    pub l2: Option<String>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerBlock {
    /// "adagrad" or "adadelta".
    pub algorithm: Option<String>,
    pub eta: Option<f64>,
    pub igsav: Option<f64>,
    pub rho: Option<f64>,
    pub epsilon: Option<f64>,
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceBlock {
    pub gamma_loss: Option<f64>,
    pub tau_loss: Option<f64>,
    pub gamma_active: Option<f64>,
    pub tau_active: Option<f64>,
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterBlock {
    /// "fluctuation", "set_size" or "validation_ema".
    pub criterion: Option<String>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub max_iterations: Option<usize>,
    pub feature_cap: Option<usize>,
    pub validation_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationBlock {
    /// "beam" or "walk".
    pub method: String,
    pub beams: usize,
    pub threshold: f64,
    pub length: usize,
    pub prime: Vec<i32>,
    pub restarts: usize,
}

impl Default for GenerationBlock {
    fn default() -> Self {
        let g = GenerationConfig::default();
        GenerationBlock {
            method: "beam".into(),
            beams: g.beams,
            threshold: g.threshold,
            length: g.length,
            prime: g.prime,
            restarts: g.restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinationBlock {
    /// "sum" or "product".
    pub rule: String,
    /// Fixed bias; when unset it is chosen from `grid` on training data.
    pub bias: Option<f64>,
    pub grid: Vec<f64>,
}

impl Default for CombinationBlock {
    fn default() -> Self {
        CombinationBlock {
            rule: "product".into(),
            bias: None,
            grid: BIAS_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NGramBlock {
    pub order: usize,
}

impl Default for NGramBlock {
    fn default() -> Self {
        NGramBlock { order: 3 }
    }
}

fn bad(what: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{what}: {e}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(&format!("cannot read config {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| bad("invalid config", e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn ltm(&self) -> Result<LtmConfig, CliError> {
        let d = LtmConfig::default();
        let b = &self.ltm;
        Ok(LtmConfig {
            nplus: nplus(b.nplus.as_deref(), d.nplus)?,
            expansion: expansion(b.expansion.as_deref(), d.expansion)?,
            reg: regularization(&b.regularization, d.reg)?,
            opt: optimizer(&b.optimizer, self.seed)?,
            inner: convergence(&b.convergence, d.inner)?,
            outer: outer(&b.outer, d.outer)?,
            new_penalty: new_penalty(b.new_penalty.as_deref())?,
            keys: keys(b, d.keys.is_some())?,
        })
    }

    pub fn stm(&self) -> Result<(StmConfig, Option<KeyPolicy>), CliError> {
        let d = StmConfig::default();
        let b = &self.stm;
        let cfg = StmConfig {
            nplus: nplus(b.nplus.as_deref(), d.nplus)?,
            expansion: expansion(b.expansion.as_deref(), d.expansion)?,
            reg: regularization(&b.regularization, d.reg)?,
            opt: optimizer(&b.optimizer, self.seed)?,
            inner: convergence(&b.convergence, d.inner)?,
            new_penalty: new_penalty(b.new_penalty.as_deref())?,
        };
        if b.outer != OuterBlock::default() {
            return Err(CliError::Usage("the short-term model has no outer loop; remove [stm.outer]".into()));
        }
        let needs = cfg.nplus.needs_key();
        Ok((cfg, keys(b, needs)?))
    }

    pub fn generation(&self) -> Result<GenerationConfig, CliError> {
        let g = &self.generation;
        let method = match g.method.as_str() {
            "beam" => GenerationMethod::Beam,
            "walk" | "iterative_random_walk" => GenerationMethod::IterativeRandomWalk,
            other => return Err(CliError::Usage(format!("unknown generation method {other:?}"))),
        };
        Ok(GenerationConfig {
            method,
            beams: g.beams,
            threshold: g.threshold,
            length: g.length,
            prime: g.prime.clone(),
            restarts: g.restarts,
            seed: self.seed,
        })
    }

    pub fn rule(&self) -> Result<CombinationRule, CliError> {
        self.combination.rule.parse().map_err(|e| bad("combination rule", e))
    }
}

fn nplus(s: Option<&str>, default: NPlusSpec) -> Result<NPlusSpec, CliError> {
    s.map_or(Ok(default), |s| NPlusSpec::parse(s).map_err(|e| bad("nplus", e)))
}

fn expansion(s: Option<&str>, default: Expansion) -> Result<Expansion, CliError> {
    s.map_or(Ok(default), |s| s.parse().map_err(|e| bad("expansion", e)))
}

fn new_penalty(s: Option<&str>) -> Result<NewPenalty, CliError> {
    match s {
        None | Some("min_survivor") => Ok(NewPenalty::MinSurvivor),
        Some("zero") => Ok(NewPenalty::Zero),
        Some(other) => Err(CliError::Usage(format!("unknown new_penalty {other:?}"))),
    }
}

fn regularization(b: &RegularizationBlock, d: RegularizationSpec) -> Result<RegularizationSpec, CliError> {
    let shape = |s: &Option<String>, d: PenaltyShape| -> Result<PenaltyShape, CliError> { s.as_deref().map_or(Ok(d), |s| s.parse().map_err(|e| bad("penalty shape", e))) };
    let spec = RegularizationSpec {
        lambda1: b.lambda1.unwrap_or(d.lambda1),
        lambda2: b.lambda2.unwrap_or(d.lambda2),
        l1: shape(&b.l1, d.l1)?,
        l2: shape(&b.l2, d.l2)?,
        tau1: b.tau1.or(d.tau1),
        tau2: b.tau2.or(d.tau2),
    };
    spec.validate().map_err(|e| bad("regularization", e))?;
    Ok(spec)
}

fn optimizer(b: &OptimizerBlock, seed: u64) -> Result<OptimizerConfig, CliError> {
    let d = OptimizerConfig::default();
    let algorithm = match b.algorithm.as_deref() {
        None | Some("adagrad") => Algorithm::AdaGrad,
        Some("adadelta") => Algorithm::AdaDelta,
        Some(other) => return Err(CliError::Usage(format!("unknown algorithm {other:?}"))),
    };
    let cfg = OptimizerConfig {
        algorithm,
        eta: b.eta.unwrap_or(d.eta),
        igsav: b.igsav.unwrap_or(d.igsav),
        rho: b.rho.unwrap_or(d.rho),
        epsilon: b.epsilon.unwrap_or(d.epsilon),
        batch_size: b.batch_size.unwrap_or(d.batch_size),
        seed,
        ..d
    };
    cfg.validate().map_err(|e| bad("optimizer", e))?;
    Ok(cfg)
}

fn convergence(b: &ConvergenceBlock, d: ConvergenceConfig) -> Result<ConvergenceConfig, CliError> {
    let cfg = ConvergenceConfig {
        gamma_loss: b.gamma_loss.unwrap_or(d.gamma_loss),
        tau_loss: b.tau_loss.unwrap_or(d.tau_loss),
        gamma_active: b.gamma_active.unwrap_or(d.gamma_active),
        tau_active: b.tau_active.unwrap_or(d.tau_active),
        max_epochs: b.max_epochs.unwrap_or(d.max_epochs),
        ..d
    };
    cfg.validate().map_err(|e| bad("convergence", e))?;
    Ok(cfg)
}

fn outer(b: &OuterBlock, d: OuterConvergence) -> Result<OuterConvergence, CliError> {
    let criterion: OuterCriterion = match &b.criterion {
        Some(s) => s.parse().map_err(|e| bad("outer criterion", e))?,
        None => d.criterion,
    };
    let cfg = OuterConvergence {
        criterion,
        gamma: b.gamma.unwrap_or(d.gamma),
        tau: b.tau.unwrap_or(d.tau),
        max_iterations: b.max_iterations.unwrap_or(d.max_iterations),
        feature_cap: b.feature_cap.unwrap_or(d.feature_cap),
        validation_fraction: b.validation_fraction.unwrap_or(d.validation_fraction),
    };
    if !(cfg.gamma > 0.0) {
        return Err(CliError::Usage("outer gamma must be positive".into()));
    }
    if !(cfg.tau >= 0.0 && cfg.tau < 1.0) {
        return Err(CliError::Usage("outer tau must lie in [0, 1)".into()));
    }
    if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
        return Err(CliError::Usage("validation_fraction must lie in (0, 1)".into()));
    }
    Ok(cfg)
}

fn keys(b: &ModelBlock, default_on: bool) -> Result<Option<KeyPolicy>, CliError> {
    if !b.keys.unwrap_or(default_on) {
        return Ok(None);
    }
    let profiles = match &b.key_profiles {
        Some(p) => KeyProfiles::read(p).map_err(|e| bad("key profiles", e))?,
        None => KeyProfiles::temperley(),
    };
    Ok(Some(KeyPolicy {
        profiles,
        duration_weighted: b.duration_weighted.unwrap_or(true),
    }))
}
