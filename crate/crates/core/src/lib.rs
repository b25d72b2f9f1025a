//! Statistical fusion of independently trained dense classifiers.
//!
//! Experts are consumed as saved per-element score maps. A small labelled
//! development set calibrates per-expert confusion matrices and per-class
//! Dirichlet models, which then drive Bayes categorical fusion and
//! Dirichlet fusion. Averaging and Monte-Carlo variance weighting are
//! available as uncalibrated baselines.

pub mod calibration;
pub mod domain;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod synth;

pub use calibration::{Calibration, DevSample, GridSearchResult, RegularizationConfig, Subsample, SuffStats};
pub use domain::{
    AlphaSource, ClassPrior, ClassSet, ConfusionMatrix, DirichletModel, ExpertModel, FusionModel, LabelMap, ProbVector,
    ScoreMap,
};
pub use error::{Error, Result};
pub use fusion::{FuseOptions, FusedResult, FusionInputs, FusionMethod, SampleStack};
pub use metrics::{evaluate, evaluate_batch, EvalReport};
