//! Domain types shared by calibration, fusion and evaluation, plus the
//! elementary likelihood computations every fusion method builds on.

use crate::error::{Error, Result};
use crate::numerics::{self, ln_gamma_unchecked};

/// Tolerance on `Σ y_j = 1` for a score vector handed to the library.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// The label space: class names and an optional class excluded from
/// calibration and evaluation (typically "void").
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    names: Vec<String>,
    ignore_index: Option<usize>,
}

impl ClassSet {
    pub fn new(names: Vec<String>, ignore_index: Option<usize>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::domain(format!(
                "a class set needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if names.len() > usize::from(u16::MAX) {
            return Err(Error::domain("more classes than a 16-bit label can index"));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::domain(format!(
                    "class name {name:?} must be non-empty without whitespace"
                )));
            }
            if names[..i].contains(name) {
                return Err(Error::domain(format!("duplicate class name {name:?}")));
            }
        }
        if let Some(ix) = ignore_index {
            if ix >= names.len() {
                return Err(Error::domain(format!(
                    "ignore index {ix} out of range for {} classes",
                    names.len()
                )));
            }
        }
        Ok(ClassSet { names, ignore_index })
    }

    /// `K` classes named `class_0 .. class_{K-1}`.
    pub fn numbered(count: usize, ignore_index: Option<usize>) -> Result<Self> {
        Self::new((0..count).map(|i| format!("class_{i}")).collect(), ignore_index)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ignore_index(&self) -> Option<usize> {
        self.ignore_index
    }

    pub fn is_ignored(&self, class: usize) -> bool {
        self.ignore_index == Some(class)
    }
}

/// A score vector on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        check_simplex(&scores, SIMPLEX_TOLERANCE)
            .map_err(|m| Error::domain(format!("not a probability vector: {m}")))?;
        Ok(ProbVector(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn check_simplex<T: Copy + Into<f64>>(y: &[T], tol: f64) -> std::result::Result<(), String> {
    let mut sum = 0.0;
    for &v in y {
        let v: f64 = v.into();
        if !(v.is_finite() && v >= 0.0) {
            return Err(format!("entry {v} is negative or not finite"));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > tol {
        return Err(format!("entries sum to {sum}"));
    }
    Ok(())
}

/// Per-element class scores of one expert on one image.
///
/// Stored element-major: the `K` scores of element `i = row * width + col`
/// occupy `data[i*K .. (i+1)*K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f32>,
}

impl ScoreMap {
    /// Validates every element against the simplex invariant.
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        let map = Self::unchecked_shape(height, width, classes, data)?;
        for (i, y) in map.data.chunks_exact(classes).enumerate() {
            check_simplex(y, SIMPLEX_TOLERANCE).map_err(|m| Error::domain(format!("score element {i}: {m}")))?;
        }
        Ok(map)
    }

    fn unchecked_shape(height: usize, width: usize, classes: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "score map must have positive size, got {height}x{width}"
            )));
        }
        if classes < 2 {
            return Err(Error::shape(format!(
                "score map needs at least 2 classes, got {classes}"
            )));
        }
        if data.len() != height * width * classes {
            return Err(Error::shape(format!(
                "{} scores for a {height}x{width}x{classes} map",
                data.len()
            )));
        }
        Ok(ScoreMap {
            height,
            width,
            classes,
            data,
        })
    }

    /// Accepts raw scores within `tol` of the simplex, then clips each entry
    /// to `[PROB_FLOOR, 1]` and renormalizes. Returns the first offending
    /// element index on failure.
    pub fn from_raw_renormalized(
        height: usize,
        width: usize,
        classes: usize,
        mut data: Vec<f32>,
        tol: f64,
    ) -> std::result::Result<Self, (usize, String)> {
        let bad_shape = |e: Error| (0, e.to_string());
        if data.len() != height * width * classes {
            return Err(bad_shape(Error::shape(format!(
                "{} scores for a {height}x{width}x{classes} map",
                data.len()
            ))));
        }
        for (i, y) in data.chunks_exact_mut(classes).enumerate() {
            check_simplex(y, tol).map_err(|m| (i, m))?;
            let mut sum = 0.0f64;
            for v in y.iter_mut() {
                *v = f64::from(*v).clamp(numerics::PROB_FLOOR, 1.0) as f32;
                sum += f64::from(*v);
            }
            for v in y.iter_mut() {
                *v = (f64::from(*v) / sum) as f32;
            }
        }
        Self::unchecked_shape(height, width, classes, data).map_err(bad_shape)
    }

    /// Builds a map from a per-element score function.
    pub fn from_fn(height: usize, width: usize, classes: usize, mut f: impl FnMut(usize, &mut [f32])) -> Result<Self> {
        let mut data = vec![0.0f32; height * width * classes];
        for (i, y) in data.chunks_exact_mut(classes.max(1)).enumerate() {
            f(i, y);
        }
        Self::new(height, width, classes, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn element(&self, index: usize) -> &[f32] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }

    pub fn elements(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.classes)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Hard classification output: per-element argmax, lowest index on ties.
    pub fn argmax_labels(&self) -> LabelMap {
        let labels = self.elements().map(|y| numerics::argmax(y) as u16).collect();
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    pub fn same_shape(&self, other: &ScoreMap) -> bool {
        self.height == other.height && self.width == other.width && self.classes == other.classes
    }
}

/// Per-element class indices (ground truth or a classification output).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "label map must have positive size, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u16) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, index: usize) -> usize {
        usize::from(self.labels[index])
    }

    /// Fails if any label is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| usize::from(l) >= classes) {
            Some(i) => Err(Error::domain(format!(
                "label {} at element {i} is outside {classes} classes",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn same_dims(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

/// `K x K` count matrix: row = expert output, column = ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k < 2 {
            return Err(Error::shape("a confusion matrix needs at least 2 classes"));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != k) {
            return Err(Error::shape(format!(
                "row {r} has {} entries, expected {k}",
                rows[r].len()
            )));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, out: usize, truth: usize) -> u64 {
        self.counts[out * self.classes + truth]
    }

    pub fn add(&mut self, out: usize, truth: usize, n: u64) {
        self.counts[out * self.classes + truth] += n;
    }

    pub fn row(&self, out: usize) -> &[u64] {
        &self.counts[out * self.classes..(out + 1) * self.classes]
    }

    pub fn column_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|j| self.get(j, truth)).sum()
    }

    pub fn row_sum(&self, out: usize) -> u64 {
        self.row(out).iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(format!(
                "cannot merge {0}x{0} and {1}x{1} confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Row-major `K x K` table of `log p(out | k)`; entry `[out * K + k]`.
    pub fn log_likelihood_table(&self, smoothing: f64) -> Result<Vec<f64>> {
        check_smoothing(smoothing)?;
        let k = self.classes;
        let mut table = vec![0.0; k * k];
        for truth in 0..k {
            let total = self.column_sum(truth) as f64 + k as f64 * smoothing;
            if total <= 0.0 {
                return Err(Error::DegenerateColumn { column: truth });
            }
            let ln_total = total.ln();
            for out in 0..k {
                table[out * k + truth] = (self.get(out, truth) as f64 + smoothing).ln() - ln_total;
            }
        }
        Ok(table)
    }
}

fn check_smoothing(smoothing: f64) -> Result<()> {
    if smoothing >= 0.0 && smoothing.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "smoothing must be finite and >= 0, got {smoothing}"
        )))
    }
}

/// `log p(out | k)` from column `k` of the confusion matrix, with
/// `smoothing` pseudo-counts added to every cell.
pub fn conditional_log_likelihood(m: &ConfusionMatrix, out: usize, k: usize, smoothing: f64) -> Result<f64> {
    check_smoothing(smoothing)?;
    let classes = m.classes();
    if out >= classes || k >= classes {
        return Err(Error::domain(format!("class index out of range for {classes} classes")));
    }
    let total = m.column_sum(k) as f64 + classes as f64 * smoothing;
    if total <= 0.0 {
        return Err(Error::DegenerateColumn { column: k });
    }
    Ok(((m.get(out, k) as f64 + smoothing) / total).ln())
}

/// Class prior `p(k)` as log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    log_probs: Vec<f64>,
}

impl ClassPrior {
    pub fn uniform(classes: usize) -> Self {
        ClassPrior {
            log_probs: vec![-(classes as f64).ln(); classes],
        }
    }

    /// Normalizes non-negative weights; fails if any weight is zero.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if let Some(c) = weights.iter().position(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::DegenerateClass { class: c });
        }
        let total: f64 = weights.iter().sum();
        Ok(ClassPrior {
            log_probs: weights.iter().map(|w| (w / total).ln()).collect(),
        })
    }

    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::domain("prior log-probabilities must not be NaN or +inf"));
        }
        let sum: f64 = log_probs.iter().map(|l| l.exp()).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("prior probabilities sum to {sum}")));
        }
        Ok(ClassPrior { log_probs })
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }
}

/// Prior proportional to the ground-truth occurrence summed over all
/// matrices (column sums).
pub fn prior_from_confusions(ms: &[ConfusionMatrix]) -> Result<ClassPrior> {
    prior_from_confusions_smoothed(ms, 0.0)
}

/// As [`prior_from_confusions`], with `pseudo_count` added to every class
/// total.
pub fn prior_from_confusions_smoothed(ms: &[ConfusionMatrix], pseudo_count: f64) -> Result<ClassPrior> {
    check_smoothing(pseudo_count)?;
    let first = ms
        .first()
        .ok_or_else(|| Error::domain("prior needs at least one confusion matrix"))?;
    let k = first.classes();
    if ms.iter().any(|m| m.classes() != k) {
        return Err(Error::shape("confusion matrices of different sizes"));
    }
    let weights: Vec<f64> = (0..k)
        .map(|c| ms.iter().map(|m| m.column_sum(c)).sum::<u64>() as f64 + pseudo_count)
        .collect();
    ClassPrior::from_weights(&weights)
}

/// Where a class's concentration vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaSource {
    /// Fitted with the configured objective.
    Fitted,
    /// The regularized fit failed; the plain maximum-likelihood fit is used.
    MleFallback,
    /// No calibration data for the class; uniform (all-ones) parameters.
    Absent,
}

impl AlphaSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AlphaSource::Fitted => "fit",
            AlphaSource::MleFallback => "mle-fallback",
            AlphaSource::Absent => "absent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fit" => Some(AlphaSource::Fitted),
            "mle-fallback" => Some(AlphaSource::MleFallback),
            "absent" => Some(AlphaSource::Absent),
            _ => None,
        }
    }
}

/// One expert's per-ground-truth-class Dirichlet parameters `α^(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletModel {
    alphas: Vec<Vec<f64>>,
    sources: Vec<AlphaSource>,
}

impl DirichletModel {
    pub fn new(alphas: Vec<Vec<f64>>, sources: Vec<AlphaSource>) -> Result<Self> {
        let k = alphas.len();
        if k < 2 || sources.len() != k {
            return Err(Error::shape(format!(
                "{} alpha vectors and {} sources; need K >= 2 of each",
                k,
                sources.len()
            )));
        }
        for (c, a) in alphas.iter().enumerate() {
            if a.len() != k {
                return Err(Error::shape(format!(
                    "alpha for class {c} has {} entries, expected {k}",
                    a.len()
                )));
            }
            check_alpha(a)?;
        }
        Ok(DirichletModel { alphas, sources })
    }

    /// All-ones parameters for every class.
    pub fn uniform(classes: usize) -> Self {
        DirichletModel {
            alphas: vec![vec![1.0; classes]; classes],
            sources: vec![AlphaSource::Absent; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, class: usize) -> &[f64] {
        &self.alphas[class]
    }

    pub fn alphas(&self) -> &[Vec<f64>] {
        &self.alphas
    }

    pub fn source(&self, class: usize) -> AlphaSource {
        self.sources[class]
    }

    pub fn sources(&self) -> &[AlphaSource] {
        &self.sources
    }
}

pub(crate) fn check_alpha(alpha: &[f64]) -> Result<()> {
    match alpha.iter().position(|&a| !(a.is_finite() && a > 0.0)) {
        Some(j) => Err(Error::domain(format!(
            "concentration parameter {j} must be finite and > 0, got {}",
            alpha[j]
        ))),
        None => Ok(()),
    }
}

/// `ln Γ(Σα) - Σ ln Γ(α_j)`, the log normalizer of the Dirichlet density.
pub(crate) fn dirichlet_log_norm(alpha: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    ln_gamma_unchecked(total) - alpha.iter().map(|&a| ln_gamma_unchecked(a)).sum::<f64>()
}

/// Log density of `Dirichlet(alpha)` at `y`. The scores are clipped to
/// `[PROB_FLOOR, 1]` and renormalized first.
pub fn dirichlet_log_pdf(y: &[f64], alpha: &[f64]) -> Result<f64> {
    if y.len() != alpha.len() {
        return Err(Error::shape(format!(
            "{} scores for {} parameters",
            y.len(),
            alpha.len()
        )));
    }
    check_alpha(alpha)?;
    let mut logs = vec![0.0; y.len()];
    numerics::clipped_log_probs(y, &mut logs);
    let kernel: f64 = alpha.iter().zip(&logs).map(|(a, l)| (a - 1.0) * l).sum();
    Ok(dirichlet_log_norm(alpha) + kernel)
}

/// A calibrated expert: its id, confusion counts and optional Dirichlet
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub id: String,
    pub confusion: ConfusionMatrix,
    pub dirichlet: Option<DirichletModel>,
}

/// Everything fusion needs at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub class_set: ClassSet,
    pub experts: Vec<ExpertModel>,
    pub prior: ClassPrior,
    /// Weight of the discrimination term used when the Dirichlet parameters
    /// were fitted.
    pub beta: f64,
    /// Weight of the `Σ α_j²` penalty used when fitting.
    pub delta: f64,
    /// Pseudo-count added to every confusion cell at fusion time.
    pub smoothing: f64,
}

/// Add-one smoothing of confusion cells at fusion time.
pub const DEFAULT_SMOOTHING: f64 = 1.0;

impl FusionModel {
    pub fn validate(&self) -> Result<()> {
        let k = self.class_set.len();
        if self.experts.is_empty() {
            return Err(Error::ModelMismatch("model has no experts".into()));
        }
        if self.prior.len() != k {
            return Err(Error::ModelMismatch(format!(
                "prior has {} classes, expected {k}",
                self.prior.len()
            )));
        }
        if !(0.0..1.0).contains(&self.beta) || !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::domain(format!(
                "beta must lie in [0, 1) and delta be >= 0, got beta={} delta={}",
                self.beta, self.delta
            )));
        }
        check_smoothing(self.smoothing)?;
        for (i, e) in self.experts.iter().enumerate() {
            if self.experts[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::ModelMismatch(format!("duplicate expert id {:?}", e.id)));
            }
            if e.confusion.classes() != k {
                return Err(Error::ModelMismatch(format!(
                    "expert {:?}: confusion is not {k}x{k}",
                    e.id
                )));
            }
            if let Some(d) = &e.dirichlet {
                if d.classes() != k {
                    return Err(Error::ModelMismatch(format!(
                        "expert {:?}: Dirichlet model is not K={k}",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn expert(&self, id: &str) -> Result<&ExpertModel> {
        self.experts
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::ModelMismatch(format!("model has no expert {id:?}")))
    }

    pub fn has_dirichlet(&self) -> bool {
        self.experts.iter().all(|e| e.dirichlet.is_some())
    }
}
