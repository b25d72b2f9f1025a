//! Segmentation evaluation: per-class IoU and precision from dataset-level
//! confusion counts, plus the inference timing harness.
//!
//! "AP" is reported as macro-averaged per-class precision `TP / (TP + FP)`.

use std::fmt::Write as _;
use std::time::Instant;

use crate::calibration::{accumulate_confusion, Calibration, RegularizationConfig};
use crate::domain::{ClassSet, ConfusionMatrix, FusionModel, LabelMap, ScoreMap, DEFAULT_SMOOTHING};
use crate::error::{Error, Result};
use crate::fusion::{run_method, FuseOptions, FusionInputs, FusionMethod};
use crate::synth::{Scenario, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_set: ClassSet,
    /// Predictions (rows) against ground truth (columns).
    pub confusion: ConfusionMatrix,
    /// `None` where the IoU denominator is empty.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` where the class was never predicted.
    pub per_class_precision: Vec<Option<f64>>,
    /// Class occurs in the (non-ignored) ground truth. Means run over these.
    pub present: Vec<bool>,
    pub mean_iou: Option<f64>,
    pub mean_precision: Option<f64>,
    pub element_count: u64,
}

/// Error-free sum `a + b = s + e`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Mean of the ratios `num / den`, carried in double-double precision and
/// rounded once, so e.g. the mean of 1/2 and 2/3 is exactly the double
/// nearest 7/12. Terms are summed in ascending order of their exact value,
/// which makes the result independent of class order.
fn mean_of_ratios(mut terms: Vec<(u64, u64)>) -> Option<f64> {
    if terms.is_empty() {
        return None;
    }
    terms.sort_by(|&(a, b), &(c, d)| (u128::from(a) * u128::from(d)).cmp(&(u128::from(c) * u128::from(b))));
    let n = terms.len() as f64;
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (num, den) in terms {
        let (a, b) = (num as f64, den as f64);
        let q = a / b;
        let q_lo = (-q).mul_add(b, a) / b;
        let (s, e) = two_sum(hi, q);
        let (s, e2) = two_sum(s, e + lo + q_lo);
        hi = s;
        lo = e2;
    }
    let q = hi / n;
    let p = q * n;
    let p_err = q.mul_add(n, -p);
    let rem = ((hi - p) - p_err) + lo;
    Some(q + rem / n)
}

impl EvalReport {
    pub fn from_confusion(class_set: ClassSet, confusion: ConfusionMatrix) -> Result<Self> {
        let k = class_set.len();
        if confusion.classes() != k {
            return Err(Error::shape(format!(
                "confusion matrix has {} classes, class set {k}",
                confusion.classes()
            )));
        }
        let mut per_class_iou = Vec::with_capacity(k);
        let mut per_class_precision = Vec::with_capacity(k);
        let mut present = Vec::with_capacity(k);
        let (mut iou_terms, mut precision_terms) = (Vec::new(), Vec::new());
        for c in 0..k {
            let tp = confusion.get(c, c);
            let predicted = confusion.row_sum(c);
            let actual = confusion.column_sum(c);
            let union = predicted + actual - tp;
            let is_present = actual > 0 && !class_set.is_ignored(c);
            per_class_iou.push((union > 0).then(|| tp as f64 / union as f64));
            per_class_precision.push((predicted > 0).then(|| tp as f64 / predicted as f64));
            present.push(is_present);
            if is_present {
                iou_terms.push((tp, union));
                if predicted > 0 {
                    precision_terms.push((tp, predicted));
                }
            }
        }
        Ok(EvalReport {
            mean_iou: mean_of_ratios(iou_terms),
            mean_precision: mean_of_ratios(precision_terms),
            element_count: confusion.total(),
            class_set,
            confusion,
            per_class_iou,
            per_class_precision,
            present,
        })
    }

    /// One metric per line: `class<TAB>metric<TAB>value`, with the means
    /// and the element count on `all` rows. Undefined values print as `nan`.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        let mut out = String::new();
        for (c, name) in self.class_set.names().iter().enumerate() {
            if self.class_set.is_ignored(c) {
                continue;
            }
            let _ = writeln!(out, "{name}\tiou\t{}", fmt(self.per_class_iou[c]));
            let _ = writeln!(out, "{name}\tprecision\t{}", fmt(self.per_class_precision[c]));
            let _ = writeln!(out, "{name}\tpresent\t{}", u8::from(self.present[c]));
        }
        let _ = writeln!(out, "all\tmean_iou\t{}", fmt(self.mean_iou));
        let _ = writeln!(out, "all\tmean_precision\t{}", fmt(self.mean_precision));
        let _ = writeln!(out, "all\telement_count\t{}", self.element_count);
        out
    }
}

/// Aligned text table of per-class IoU (in percent), one column per report.
/// Classes absent from every report's ground truth are marked `-`.
pub fn format_table(columns: &[(&str, &EvalReport)]) -> Result<String> {
    let Some((_, first)) = columns.first() else {
        return Ok(String::new());
    };
    if columns.iter().any(|(_, r)| r.class_set != first.class_set) {
        return Err(Error::domain("reports use different class sets"));
    }
    let cell = |v: Option<f64>, present: bool| match v {
        Some(v) if present => format!("{:.2}", 100.0 * v),
        _ => "-".to_string(),
    };
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("class".to_string())
        .chain(columns.iter().map(|(name, _)| name.to_string()))
        .collect()];
    for (c, name) in first.class_set.names().iter().enumerate() {
        if first.class_set.is_ignored(c) {
            continue;
        }
        let mut row = vec![name.clone()];
        row.extend(columns.iter().map(|(_, r)| cell(r.per_class_iou[c], r.present[c])));
        rows.push(row);
    }
    let mut footer = |label: &str, f: &dyn Fn(&EvalReport) -> Option<f64>| {
        let mut row = vec![label.to_string()];
        row.extend(columns.iter().map(|(_, r)| cell(f(r), true)));
        rows.push(row);
    };
    footer("mean IoU", &|r| r.mean_iou);
    footer("mean precision", &|r| r.mean_precision);

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (v, &w))| if j == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    Ok(out)
}

/// Mergeable evaluation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalAccumulator {
    class_set: ClassSet,
    confusion: ConfusionMatrix,
}

impl EvalAccumulator {
    pub fn new(class_set: ClassSet) -> Self {
        let confusion = ConfusionMatrix::zeros(class_set.len());
        EvalAccumulator { class_set, confusion }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        accumulate_confusion(pred, gt, &mut self.confusion, self.class_set.ignore_index())
    }

    pub fn merge(&mut self, other: &EvalAccumulator) -> Result<()> {
        if other.class_set != self.class_set {
            return Err(Error::domain("cannot merge evaluations over different class sets"));
        }
        self.confusion.merge(&other.confusion)
    }

    pub fn report(&self) -> EvalReport {
        EvalReport::from_confusion(self.class_set.clone(), self.confusion.clone())
            .expect("accumulator confusion matches its class set")
    }
}

pub fn evaluate(pred: &LabelMap, gt: &LabelMap, class_set: &ClassSet) -> Result<EvalReport> {
    evaluate_batch(std::slice::from_ref(pred), std::slice::from_ref(gt), class_set)
}

/// Dataset-level report: counts over all pairs are summed before any ratio.
pub fn evaluate_batch(preds: &[LabelMap], gts: &[LabelMap], class_set: &ClassSet) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut acc = EvalAccumulator::new(class_set.clone());
    for (p, g) in preds.iter().zip(gts) {
        acc.add(p, g)?;
    }
    Ok(acc.report())
}

/// Fusion inputs for timing: the test image of a stacked scenario plus a
/// model calibrated and MLE-fitted on that same image.
pub fn bench_workload(scenario: &Scenario, seed: u64) -> Result<(FusionInputs, FusionModel)> {
    if scenario.stacks.is_none() {
        return Err(Error::domain("bench workload needs a scenario with sample stacks"));
    }
    let img = scenario.simulate(seed, Split::Test, 0)?;
    let ids = scenario.experts.iter().map(|e| e.id.clone()).collect();
    let mut cal = Calibration::new(scenario.class_set.clone(), ids)?;
    let refs: Vec<&ScoreMap> = img.experts.iter().collect();
    cal.add_image(&refs, &img.gt, None)?;
    let mut model = cal.base_model(DEFAULT_SMOOTHING)?;
    let cfg = RegularizationConfig::default();
    cal.apply_fit(&mut model, cal.fit_dirichlet(&cfg)?, &cfg)?;
    Ok((FusionInputs::from_stacks(img.stacks), model))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchStats {
    pub mean_ms: f64,
    /// Sample standard deviation over trials.
    pub std_ms: f64,
    pub trials: usize,
}

/// Wall-clock statistics of `trials` full-image fusions on preloaded
/// inputs. Runs single-threaded.
pub fn bench_inference(
    method: FusionMethod,
    inputs: &FusionInputs,
    model: Option<&FusionModel>,
    trials: usize,
) -> Result<BenchStats> {
    if trials < 2 {
        return Err(Error::domain(format!("bench needs at least 2 trials, got {trials}")));
    }
    let opts = FuseOptions::default();
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        let fused = run_method(method, inputs, model, opts)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(fused);
    }
    let mean = times.iter().sum::<f64>() / trials as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (trials - 1) as f64;
    Ok(BenchStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        trials,
    })
}
