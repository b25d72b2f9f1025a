//! Per-expert statistics gathered on a development set: confusion
//! matrices, Dirichlet sufficient statistics, fitted concentration
//! parameters and the `(β, δ)` grid search.

mod dirichlet_fit;
mod grid;
mod stats;

pub use dirichlet_fit::{
    dirichlet_log_likelihood, fit_dirichlet_mle, fit_dirichlet_regularized, regularized_loss, DirichletFit,
    RegularizationConfig, DEFAULT_LOSS_TOLERANCE, DEFAULT_MAX_ITERATIONS, DEFAULT_MLE_TOLERANCE,
};
pub use grid::{
    evaluate_point, grid_search, DevSample, GridPoint, GridSearchResult, DEFAULT_BETA_GRID, DEFAULT_DELTA_GRID,
};
pub use stats::{accumulate_confusion, accumulate_suffstats, complement_stats, ClassStats, Subsample, SuffStats};

use crate::domain::{
    prior_from_confusions, prior_from_confusions_smoothed, AlphaSource, ClassSet, ConfusionMatrix, DirichletModel,
    ExpertModel, FusionModel, LabelMap, ScoreMap,
};
use crate::error::{Error, Result};

/// Fitted parameters of one expert plus what went wrong along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFit {
    pub model: DirichletModel,
    /// Classes whose maximum-likelihood fixed point hit the iteration cap.
    pub unconverged: Vec<usize>,
    /// Classes where the regularized fit failed and the MLE was kept.
    pub fallbacks: Vec<usize>,
}

/// Fits `α^(k)` for every ground-truth class of one expert.
///
/// Classes that are ignored or have fewer than two samples get all-ones
/// parameters. A class whose complement is empty is fitted with `β = 0`.
pub fn fit_expert_dirichlet(
    stats: &SuffStats,
    cfg: &RegularizationConfig,
    ignore_index: Option<usize>,
) -> Result<ExpertFit> {
    cfg.validate()?;
    let k = stats.classes();
    let mut alphas = Vec::with_capacity(k);
    let mut sources = Vec::with_capacity(k);
    let mut unconverged = Vec::new();
    let mut fallbacks = Vec::new();
    for class in 0..k {
        let n = stats.class(class).count;
        let s = match stats.mean(class) {
            Some(s) if n >= 2 && Some(class) != ignore_index => s,
            _ => {
                alphas.push(vec![1.0; k]);
                sources.push(AlphaSource::Absent);
                continue;
            }
        };
        let mle = fit_dirichlet_mle(&s, n, cfg.max_iterations, DEFAULT_MLE_TOLERANCE)?;
        if !mle.converged {
            unconverged.push(class);
        }
        if cfg.is_plain_mle() {
            alphas.push(mle.alpha);
            sources.push(AlphaSource::Fitted);
            continue;
        }
        let sbar = complement_stats(stats, class).ok().map(|(m, _)| m);
        match fit_dirichlet_regularized(&s, sbar.as_deref(), cfg, Some(&mle.alpha)) {
            Ok(fit) if fit.alpha.iter().all(|a| a.is_finite() && *a > 0.0) => {
                alphas.push(fit.alpha);
                sources.push(AlphaSource::Fitted);
            }
            _ => {
                fallbacks.push(class);
                alphas.push(mle.alpha);
                sources.push(AlphaSource::MleFallback);
            }
        }
    }
    Ok(ExpertFit {
        model: DirichletModel::new(alphas, sources)?,
        unconverged,
        fallbacks,
    })
}

/// Development-set accumulator for a fixed list of experts.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    class_set: ClassSet,
    expert_ids: Vec<String>,
    confusions: Vec<ConfusionMatrix>,
    stats: Vec<SuffStats>,
}

impl Calibration {
    pub fn new(class_set: ClassSet, expert_ids: Vec<String>) -> Result<Self> {
        if expert_ids.is_empty() {
            return Err(Error::domain("calibration needs at least one expert"));
        }
        for (i, id) in expert_ids.iter().enumerate() {
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(Error::domain(format!(
                    "expert id {id:?} must be non-empty without whitespace"
                )));
            }
            if expert_ids[..i].contains(id) {
                return Err(Error::domain(format!("duplicate expert id {id:?}")));
            }
        }
        let k = class_set.len();
        Ok(Calibration {
            confusions: vec![ConfusionMatrix::zeros(k); expert_ids.len()],
            stats: vec![SuffStats::new(k); expert_ids.len()],
            class_set,
            expert_ids,
        })
    }

    pub fn class_set(&self) -> &ClassSet {
        &self.class_set
    }

    pub fn expert_ids(&self) -> &[String] {
        &self.expert_ids
    }

    pub fn confusion(&self, expert: usize) -> &ConfusionMatrix {
        &self.confusions[expert]
    }

    pub fn stats(&self, expert: usize) -> &SuffStats {
        &self.stats[expert]
    }

    /// Adds one development image. `experts` follows the order of
    /// `expert_ids`. The subsample, if any, thins only the Dirichlet
    /// statistics; confusion counts always use every element.
    pub fn add_image(&mut self, experts: &[&ScoreMap], gt: &LabelMap, subsample: Option<Subsample>) -> Result<()> {
        if experts.len() != self.expert_ids.len() {
            return Err(Error::shape(format!(
                "{} score maps for {} experts",
                experts.len(),
                self.expert_ids.len()
            )));
        }
        let ignore = self.class_set.ignore_index();
        for (i, scores) in experts.iter().enumerate() {
            if scores.classes() != self.class_set.len() {
                return Err(Error::shape(format!(
                    "expert {:?} has {} classes, expected {}",
                    self.expert_ids[i],
                    scores.classes(),
                    self.class_set.len()
                )));
            }
            accumulate_confusion(&scores.argmax_labels(), gt, &mut self.confusions[i], ignore)?;
            accumulate_suffstats(scores, gt, &mut self.stats[i], ignore, subsample)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Calibration) -> Result<()> {
        if other.expert_ids != self.expert_ids || other.class_set != self.class_set {
            return Err(Error::ModelMismatch(
                "cannot merge calibrations of different experts or classes".into(),
            ));
        }
        for (a, b) in self.confusions.iter_mut().zip(&other.confusions) {
            a.merge(b)?;
        }
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            a.merge(b)?;
        }
        Ok(())
    }

    /// Classes with no calibration elements (including the ignored class).
    pub fn absent_classes(&self) -> Vec<usize> {
        (0..self.class_set.len())
            .filter(|&k| self.confusions[0].column_sum(k) == 0)
            .collect()
    }

    /// Confusion matrices and class prior, without Dirichlet parameters.
    ///
    /// The prior uses raw class occurrence; if some class never occurs it
    /// falls back to add-one counts so every class keeps a finite prior.
    pub fn base_model(&self, smoothing: f64) -> Result<FusionModel> {
        let prior = if self.absent_classes().is_empty() {
            prior_from_confusions(&self.confusions)?
        } else {
            prior_from_confusions_smoothed(&self.confusions, 1.0)?
        };
        let model = FusionModel {
            class_set: self.class_set.clone(),
            experts: self
                .expert_ids
                .iter()
                .zip(&self.confusions)
                .map(|(id, c)| ExpertModel {
                    id: id.clone(),
                    confusion: c.clone(),
                    dirichlet: None,
                })
                .collect(),
            prior,
            beta: 0.0,
            delta: 0.0,
            smoothing,
        };
        model.validate()?;
        Ok(model)
    }

    /// Fits Dirichlet parameters of every expert. Experts are independent
    /// and fitted in parallel; results keep expert order.
    pub fn fit_dirichlet(&self, cfg: &RegularizationConfig) -> Result<Vec<ExpertFit>> {
        use rayon::prelude::*;
        let ignore = self.class_set.ignore_index();
        self.stats
            .par_iter()
            .map(|s| fit_expert_dirichlet(s, cfg, ignore))
            .collect()
    }

    /// Writes fitted parameters into `model`, matching experts by id.
    pub fn apply_fit(&self, model: &mut FusionModel, fits: Vec<ExpertFit>, cfg: &RegularizationConfig) -> Result<()> {
        for (id, fit) in self.expert_ids.iter().zip(fits) {
            let entry = model
                .experts
                .iter_mut()
                .find(|e| &e.id == id)
                .ok_or_else(|| Error::ModelMismatch(format!("model has no expert {id:?}")))?;
            entry.dirichlet = Some(fit.model);
        }
        model.beta = cfg.beta;
        model.delta = cfg.delta;
        model.validate()
    }
}
