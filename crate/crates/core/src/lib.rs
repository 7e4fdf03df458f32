//! Feature-discovering log-linear models for monophonic melody prediction.
//!
//! The crate grows and culls sets of temporally extended conjunctive
//! features over a conditional log-linear model. Candidate features are
//! proposed from the currently active set, trained with L1/L2-regularized
//! adaptive SGD, and dropped once their weight is driven to exactly zero.
//!
//! Module map:
//!
//! * [`corpus`]: event sequences, the line-delimited corpus format, folds.
//! * [`viewpoints`]: derived value streams (interval, contour, metrical
//!   weight, key-anchored degrees, ...) and the key finder.
//! * [`features`]: compound features, their evaluation and the sparse
//!   feature matrix.
//! * [`model`]: predictive distributions, negative log-likelihood, gradient.
//! * [`optimizer`]: AdaGrad/AdaDelta with cumulative-penalty L1.
//! * [`pulse`]: the grow/optimize/shrink driver for long- and short-term
//!   models.
//! * [`ensemble`]: n-gram baseline and combination rules.
//! * [`evalgen`]: cross-entropy, entropy profiles, generation, model analysis.

pub mod corpus;
pub mod ensemble;
pub mod evalgen;
pub mod features;
pub mod model;
pub mod optimizer;
pub mod pulse;
pub mod viewpoints;

pub use corpus::{Alphabet, Corpus, Event, EventSequence, FoldAssignment};
pub use features::{BasisFeature, CompoundFeature, FeatureMatrix, FeatureSet};
pub use model::PredictiveDistribution;
pub use viewpoints::{KeyEstimate, KeyProfiles, Mode, ViewpointId, ViewpointValue};
