//! Choosing `(β, δ)` by development-set mean IoU of Dirichlet fusion.

use rayon::prelude::*;

use super::dirichlet_fit::RegularizationConfig;
use super::Calibration;
use crate::domain::{FusionModel, LabelMap, ScoreMap};
use crate::error::{Error, Result};
use crate::fusion::{fuse_dirichlet, FuseOptions};
use crate::metrics::EvalAccumulator;

pub const DEFAULT_BETA_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.5];
pub const DEFAULT_DELTA_GRID: [f64; 5] = [0.0, 1e-4, 1e-3, 1e-2, 1e-1];

/// One development image: expert score maps in calibration expert order
/// and the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DevSample {
    pub experts: Vec<ScoreMap>,
    pub gt: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub beta: f64,
    pub delta: f64,
    pub mean_iou: f64,
    /// `(expert id, class)` pairs whose regularized fit failed and fell
    /// back to the maximum-likelihood parameters at this point.
    pub fallbacks: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best: GridPoint,
    /// Every point in scan order: `β` major, then `δ`.
    pub table: Vec<GridPoint>,
}

/// Fits every expert at `(cfg.beta, cfg.delta)`, fuses the development set
/// and scores it.
pub fn evaluate_point(
    calib: &Calibration,
    base: &FusionModel,
    dev: &[DevSample],
    cfg: &RegularizationConfig,
) -> Result<GridPoint> {
    let fits = calib.fit_dirichlet(cfg)?;
    let fallbacks = calib
        .expert_ids()
        .iter()
        .zip(&fits)
        .flat_map(|(id, f)| f.fallbacks.iter().map(move |&c| (id.clone(), c)))
        .collect();
    let mut model = base.clone();
    calib.apply_fit(&mut model, fits, cfg)?;

    let mut acc = EvalAccumulator::new(calib.class_set().clone());
    for sample in dev {
        if sample.experts.len() != calib.expert_ids().len() {
            return Err(Error::shape(format!(
                "development sample has {} experts, calibration {}",
                sample.experts.len(),
                calib.expert_ids().len()
            )));
        }
        let inputs: Vec<(&str, &ScoreMap)> = calib
            .expert_ids()
            .iter()
            .map(String::as_str)
            .zip(&sample.experts)
            .collect();
        let fused = fuse_dirichlet(&inputs, &model, FuseOptions::default())?;
        acc.add(&fused.labels, &sample.gt)?;
    }
    let mean_iou = acc
        .report()
        .mean_iou
        .ok_or_else(|| Error::domain("development set has no evaluable ground truth"))?;
    Ok(GridPoint {
        beta: cfg.beta,
        delta: cfg.delta,
        mean_iou,
        fallbacks,
    })
}

/// Scans the `β × δ` grid. Points run in parallel; the table is assembled
/// in scan order and ties go to the earliest point. `template` supplies the
/// iteration budget.
pub fn grid_search(
    calib: &Calibration,
    base: &FusionModel,
    dev: &[DevSample],
    betas: &[f64],
    deltas: &[f64],
    template: &RegularizationConfig,
) -> Result<GridSearchResult> {
    if betas.is_empty() || deltas.is_empty() {
        return Err(Error::domain("grid search needs non-empty β and δ grids"));
    }
    if dev.is_empty() {
        return Err(Error::domain("grid search needs a non-empty development set"));
    }
    let configs: Vec<RegularizationConfig> = betas
        .iter()
        .flat_map(|&beta| {
            deltas.iter().map(move |&delta| RegularizationConfig {
                beta,
                delta,
                ..*template
            })
        })
        .collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let table = configs
        .par_iter()
        .map(|cfg| evaluate_point(calib, base, dev, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, p) in table.iter().enumerate() {
        if p.mean_iou > table[best].mean_iou {
            best = i;
        }
    }
    Ok(GridSearchResult {
        best: table[best].clone(),
        table,
    })
}
