//! Inference-time fusion of aligned expert outputs.
//!
//! Every method is element-wise: the fused label of an element depends only
//! on the experts' outputs at that element. Images can therefore be split
//! into row bands and fused concurrently (`FuseOptions::parallel`) with
//! results identical to a sequential pass.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::domain::{dirichlet_log_norm, FusionModel, LabelMap, ScoreMap};
use crate::error::{Error, Result};
use crate::numerics::{argmax, clipped_log_probs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMethod {
    Bayes,
    Dirichlet,
    Average,
    Variance,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 4] = [
        FusionMethod::Bayes,
        FusionMethod::Dirichlet,
        FusionMethod::Average,
        FusionMethod::Variance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::Bayes => "bayes",
            FusionMethod::Dirichlet => "dirichlet",
            FusionMethod::Average => "average",
            FusionMethod::Variance => "variance",
        }
    }

    /// Averaging is the only method usable without calibrating the experts.
    /// Variance fusion reads no model parameters but is still treated as a
    /// calibrated method by the pipeline.
    pub fn requires_model(self) -> bool {
        self != FusionMethod::Average
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMethod::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::domain(format!(
                "unknown fusion method {s:?} (bayes, dirichlet, average, variance)"
            ))
        })
    }
}

/// Monte-Carlo score samples of one expert on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStack {
    id: String,
    samples: Vec<ScoreMap>,
}

impl SampleStack {
    pub fn new(id: impl Into<String>, samples: Vec<ScoreMap>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::domain(format!(
                "a sample stack needs at least 2 samples for a variance, got {}",
                samples.len()
            )));
        }
        if samples.iter().any(|s| !s.same_shape(&samples[0])) {
            return Err(Error::shape("samples in a stack differ in shape"));
        }
        Ok(SampleStack { id: id.into(), samples })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn samples(&self) -> &[ScoreMap] {
        &self.samples
    }

    fn first(&self) -> &ScoreMap {
        &self.samples[0]
    }

    /// Per-element mean over the samples, at score-map precision.
    pub fn mean_map(&self) -> ScoreMap {
        self.mean_and_certainty().0
    }

    /// Mean map and per-element certainty `ω = 1 / mean_j σ_j²`, with the
    /// unbiased (divisor `T - 1`) sample variance. Zero variance gives
    /// `ω = +inf`.
    pub fn mean_and_certainty(&self) -> (ScoreMap, Vec<f64>) {
        let first = self.first();
        let (k, n) = (first.classes(), first.len());
        let t = self.samples.len() as f64;
        let mut mean = vec![0.0f32; n * k];
        let mut certainty = vec![0.0; n];
        let mut m = vec![0.0f64; k];
        for i in 0..n {
            m.iter_mut().for_each(|v| *v = 0.0);
            for s in &self.samples {
                for (a, &y) in m.iter_mut().zip(s.element(i)) {
                    *a += f64::from(y);
                }
            }
            m.iter_mut().for_each(|v| *v /= t);
            let mut var_total = 0.0;
            for s in &self.samples {
                for (a, &y) in m.iter().zip(s.element(i)) {
                    let d = f64::from(y) - a;
                    var_total += d * d;
                }
            }
            let mean_var = var_total / (t - 1.0) / k as f64;
            certainty[i] = 1.0 / mean_var;
            for (dst, &v) in mean[i * k..(i + 1) * k].iter_mut().zip(&m) {
                *dst = v as f32;
            }
        }
        let map = ScoreMap::new(first.height(), first.width(), k, mean)
            .expect("the mean of simplex vectors lies on the simplex");
        (map, certainty)
    }
}

/// Fused labels and, on request, the per-element scores they were chosen
/// from: unnormalized log-posteriors for `bayes` and `dirichlet`, fused
/// simplex scores for `average` and `variance`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedResult {
    pub labels: LabelMap,
    /// `K` values per element, element-major; `None` unless requested.
    pub scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FuseOptions {
    pub keep_scores: bool,
    /// Fuse row bands on the rayon pool.
    pub parallel: bool,
}

fn drive<F>(height: usize, width: usize, k: usize, opts: FuseOptions, kernel: F) -> FusedResult
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n = height * width;
    let mut labels = vec![0u16; n];
    let mut scores = if opts.keep_scores { vec![0.0; n * k] } else { Vec::new() };

    let region = |start: usize, labels: &mut [u16], scores: Option<&mut [f64]>| match scores {
        Some(buf) => {
            for (off, (l, sc)) in labels.iter_mut().zip(buf.chunks_exact_mut(k)).enumerate() {
                kernel(start + off, sc);
                *l = argmax(sc) as u16;
            }
        }
        None => {
            let mut scratch = vec![0.0; k];
            for (off, l) in labels.iter_mut().enumerate() {
                kernel(start + off, &mut scratch);
                *l = argmax(&scratch) as u16;
            }
        }
    };

    match (opts.parallel, opts.keep_scores) {
        (false, false) => region(0, &mut labels, None),
        (false, true) => region(0, &mut labels, Some(&mut scores)),
        (true, false) => labels
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(row, l)| region(row * width, l, None)),
        (true, true) => labels
            .par_chunks_mut(width)
            .zip(scores.par_chunks_mut(width * k))
            .enumerate()
            .for_each(|(row, (l, s))| region(row * width, l, Some(s))),
    }

    FusedResult {
        labels: LabelMap::new(height, width, labels).expect("dimensions come from validated inputs"),
        scores: opts.keep_scores.then_some(scores),
    }
}

/// Conditional log-likelihood table `[out * K + k]` used at fusion time.
/// A column without any mass (class never seen during calibration) is
/// treated as uninformative.
fn bayes_table(model: &FusionModel, id: &str) -> Result<Vec<f64>> {
    let expert = model.expert(id)?;
    let m = &expert.confusion;
    let k = m.classes();
    let mut table = vec![0.0; k * k];
    for truth in 0..k {
        let total = m.column_sum(truth) as f64 + k as f64 * model.smoothing;
        if total <= 0.0 {
            let uniform = -(k as f64).ln();
            (0..k).for_each(|out| table[out * k + truth] = uniform);
            continue;
        }
        let ln_total = total.ln();
        for out in 0..k {
            table[out * k + truth] = (m.get(out, truth) as f64 + model.smoothing).ln() - ln_total;
        }
    }
    Ok(table)
}

fn check_same_dims(mut dims: impl Iterator<Item = (usize, usize)>) -> Result<(usize, usize)> {
    let first = dims
        .next()
        .ok_or_else(|| Error::domain("fusion needs at least one expert"))?;
    if let Some(other) = dims.find(|d| *d != first) {
        return Err(Error::shape(format!(
            "expert outputs differ in size: {}x{} vs {}x{}",
            first.0, first.1, other.0, other.1
        )));
    }
    Ok(first)
}

/// Bayes categorical fusion of hard expert outputs:
/// `argmax_k [ln p(k) + Σ_i ln p(out_i | k)]`.
pub fn fuse_bayes(expert_labels: &[(&str, &LabelMap)], model: &FusionModel, opts: FuseOptions) -> Result<FusedResult> {
    model.validate()?;
    let (height, width) = check_same_dims(expert_labels.iter().map(|(_, l)| (l.height(), l.width())))?;
    let k = model.class_set.len();
    let tables = expert_labels
        .iter()
        .map(|(id, labels)| {
            labels.check_classes(k)?;
            bayes_table(model, id)
        })
        .collect::<Result<Vec<_>>>()?;
    let prior = model.prior.log_probs();
    Ok(drive(height, width, k, opts, |i, scores| {
        scores.copy_from_slice(prior);
        for ((_, labels), table) in expert_labels.iter().zip(&tables) {
            let row = &table[labels.get(i) * k..(labels.get(i) + 1) * k];
            for (s, l) in scores.iter_mut().zip(row) {
                *s += l;
            }
        }
    }))
}

struct DirichletTerms {
    log_norm: Vec<f64>,
    /// `α_kj - 1`, row per class `k`.
    exponents: Vec<f64>,
}

/// Dirichlet fusion of full score vectors:
/// `argmax_k [ln p(k) + Σ_i ln Dir(y_i; α_i^(k))]`.
pub fn fuse_dirichlet(
    expert_scores: &[(&str, &ScoreMap)],
    model: &FusionModel,
    opts: FuseOptions,
) -> Result<FusedResult> {
    model.validate()?;
    let (height, width) = check_same_dims(expert_scores.iter().map(|(_, s)| (s.height(), s.width())))?;
    let k = model.class_set.len();
    let terms = expert_scores
        .iter()
        .map(|(id, scores)| {
            if scores.classes() != k {
                return Err(Error::ModelMismatch(format!(
                    "expert {id:?} has {} classes, model {k}",
                    scores.classes()
                )));
            }
            let d = model.expert(id)?.dirichlet.as_ref().ok_or_else(|| {
                Error::ModelMismatch(format!("expert {id:?} has no Dirichlet parameters; run `fit` first"))
            })?;
            Ok(DirichletTerms {
                log_norm: d.alphas().iter().map(|a| dirichlet_log_norm(a)).collect(),
                exponents: d.alphas().iter().flat_map(|a| a.iter().map(|v| v - 1.0)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prior = model.prior.log_probs();
    Ok(drive(height, width, k, opts, |i, scores| {
        let mut logs = [0.0f64; 64];
        let mut heap;
        let logs: &mut [f64] = if k <= logs.len() {
            &mut logs[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        scores.copy_from_slice(prior);
        for ((_, map), t) in expert_scores.iter().zip(&terms) {
            clipped_log_probs(map.element(i), logs);
            for (c, s) in scores.iter_mut().enumerate() {
                let row = &t.exponents[c * k..(c + 1) * k];
                let kernel: f64 = row.iter().zip(logs.iter()).map(|(e, l)| e * l).sum();
                *s += t.log_norm[c] + kernel;
            }
        }
    }))
}

fn mean_into(maps: &[&ScoreMap], i: usize, scores: &mut [f64]) {
    scores.iter_mut().for_each(|s| *s = 0.0);
    for map in maps {
        for (s, &y) in scores.iter_mut().zip(map.element(i)) {
            *s += f64::from(y);
        }
    }
    let m = maps.len() as f64;
    scores.iter_mut().for_each(|s| *s /= m);
}

/// Unweighted mean of the experts' score vectors.
pub fn fuse_average(expert_scores: &[&ScoreMap], opts: FuseOptions) -> Result<FusedResult> {
    let (height, width) = check_same_dims(expert_scores.iter().map(|s| (s.height(), s.width())))?;
    let k = expert_scores[0].classes();
    if expert_scores.iter().any(|s| s.classes() != k) {
        return Err(Error::shape("experts disagree on the number of classes"));
    }
    Ok(drive(height, width, k, opts, |i, scores| {
        mean_into(expert_scores, i, scores)
    }))
}

/// Relative spread below which per-element certainties count as equal and
/// the weighted sum is evaluated as a plain mean.
pub const EQUAL_CERTAINTY_TOLERANCE: f64 = 1e-12;

/// Certainty-weighted mean of the experts' Monte-Carlo mean scores,
/// `Σ ω_i ȳ_i / Σ ω_i` with `ω = 1 / mean_j σ_j²`.
///
/// If any expert has zero variance at an element, the fused vector is the
/// plain mean over exactly those experts. If all certainties are equal the
/// plain mean over all experts is used, which is the same computation as
/// [`fuse_average`] on the mean maps.
pub fn fuse_variance(stacks: &[SampleStack], opts: FuseOptions) -> Result<FusedResult> {
    let (height, width) = check_same_dims(stacks.iter().map(|s| (s.first().height(), s.first().width())))?;
    let k = stacks[0].first().classes();
    if stacks.iter().any(|s| s.first().classes() != k) {
        return Err(Error::shape("experts disagree on the number of classes"));
    }
    let (means, certainty): (Vec<ScoreMap>, Vec<Vec<f64>>) = stacks.iter().map(|s| s.mean_and_certainty()).unzip();
    let refs: Vec<&ScoreMap> = means.iter().collect();
    Ok(drive(height, width, k, opts, |i, scores| {
        let w = |e: usize| certainty[e][i];
        let infinite: Vec<&ScoreMap> = (0..refs.len())
            .filter(|&e| w(e).is_infinite())
            .map(|e| refs[e])
            .collect();
        if !infinite.is_empty() {
            mean_into(&infinite, i, scores);
            return;
        }
        let (lo, hi) = (0..refs.len()).fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(w(e)), hi.max(w(e))));
        if hi - lo <= EQUAL_CERTAINTY_TOLERANCE * hi {
            mean_into(&refs, i, scores);
            return;
        }
        let total: f64 = (0..refs.len()).map(w).sum();
        scores.iter_mut().for_each(|s| *s = 0.0);
        for (e, map) in refs.iter().enumerate() {
            let weight = w(e) / total;
            for (s, &y) in scores.iter_mut().zip(map.element(i)) {
                *s += weight * f64::from(y);
            }
        }
    }))
}

/// Prepared in-memory inputs for any fusion method.
#[derive(Debug, Clone, Default)]
pub struct FusionInputs {
    pub scores: Vec<(String, ScoreMap)>,
    /// Hard outputs, normally the argmax of `scores`.
    pub labels: Vec<(String, LabelMap)>,
    pub stacks: Vec<SampleStack>,
}

impl FusionInputs {
    pub fn from_scores(scores: Vec<(String, ScoreMap)>) -> Self {
        let labels = scores.iter().map(|(id, s)| (id.clone(), s.argmax_labels())).collect();
        FusionInputs {
            scores,
            labels,
            stacks: Vec::new(),
        }
    }

    /// Uses the stacks for variance fusion and their mean maps for every
    /// other method.
    pub fn from_stacks(stacks: Vec<SampleStack>) -> Self {
        let scores = stacks.iter().map(|s| (s.id().to_string(), s.mean_map())).collect();
        FusionInputs {
            stacks,
            ..Self::from_scores(scores)
        }
    }
}

/// Runs `method` on prepared inputs.
pub fn run_method(
    method: FusionMethod,
    inputs: &FusionInputs,
    model: Option<&FusionModel>,
    opts: FuseOptions,
) -> Result<FusedResult> {
    let need_model =
        || model.ok_or_else(|| Error::ModelMismatch(format!("method {method} requires a calibrated model")));
    match method {
        FusionMethod::Bayes => {
            let labels: Vec<(&str, &LabelMap)> = inputs.labels.iter().map(|(id, l)| (id.as_str(), l)).collect();
            fuse_bayes(&labels, need_model()?, opts)
        }
        FusionMethod::Dirichlet => {
            let scores: Vec<(&str, &ScoreMap)> = inputs.scores.iter().map(|(id, s)| (id.as_str(), s)).collect();
            fuse_dirichlet(&scores, need_model()?, opts)
        }
        FusionMethod::Average => {
            let scores: Vec<&ScoreMap> = inputs.scores.iter().map(|(_, s)| s).collect();
            fuse_average(&scores, opts)
        }
        FusionMethod::Variance => {
            if inputs.stacks.is_empty() {
                return Err(Error::domain("variance fusion needs Monte-Carlo sample stacks"));
            }
            fuse_variance(&inputs.stacks, opts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClassPrior, ClassSet, ConfusionMatrix, DirichletModel, ExpertModel};

    fn model(confusions: &[ConfusionMatrix], prior: ClassPrior, smoothing: f64) -> FusionModel {
        let k = confusions[0].classes();
        FusionModel {
            class_set: ClassSet::numbered(k, None).unwrap(),
            experts: confusions
                .iter()
                .enumerate()
                .map(|(i, c)| ExpertModel {
                    id: format!("e{i}"),
                    confusion: c.clone(),
                    dirichlet: None,
                })
                .collect(),
            prior,
            beta: 0.0,
            delta: 0.0,
            smoothing,
        }
    }

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn single(labels: &[u16]) -> LabelMap {
        LabelMap::new(1, labels.len(), labels.to_vec()).unwrap()
    }

    fn keep() -> FuseOptions {
        FuseOptions {
            keep_scores: true,
            parallel: false,
        }
    }

    #[test]
    fn bayes_two_expert_example() {
        let m = model(
            &[cm(&[&[9, 1], &[1, 9]]), cm(&[&[6, 4], &[4, 6]])],
            ClassPrior::uniform(2),
            0.0,
        );
        let (a, b) = (single(&[0]), single(&[1]));
        let r = fuse_bayes(&[("e0", &a), ("e1", &b)], &m, keep()).unwrap();
        let s = r.scores.unwrap();
        // p(out1=0|k) p(out2=1|k): k=0 -> 0.9 * 0.4, k=1 -> 0.1 * 0.6
        assert!((s[0] - (0.5f64.ln() + 0.36f64.ln())).abs() < 1e-12);
        assert!((s[1] - (0.5f64.ln() + 0.06f64.ln())).abs() < 1e-12);
        assert_eq!(r.labels.get(0), 0);
    }

    #[test]
    fn bayes_identity_expert_is_passed_through() {
        let m = model(
            &[cm(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]])],
            ClassPrior::uniform(3),
            0.0,
        );
        let l = single(&[2, 0, 1, 1, 0]);
        let r = fuse_bayes(&[("e0", &l)], &m, FuseOptions::default()).unwrap();
        assert_eq!(r.labels, l);
    }

    #[test]
    fn bayes_prior_decides_between_uninformative_experts() {
        let prior = ClassPrior::from_weights(&[0.999, 0.001]).unwrap();
        let m = model(&[cm(&[&[5, 5], &[5, 5]]), cm(&[&[3, 3], &[3, 3]])], prior, 1.0);
        let r = fuse_bayes(
            &[("e0", &single(&[1, 0, 1])), ("e1", &single(&[1, 1, 0]))],
            &m,
            FuseOptions::default(),
        )
        .unwrap();
        assert_eq!(r.labels.as_slice(), &[0, 0, 0]);
    }

    #[test]
    fn bayes_unknown_expert() {
        let m = model(&[cm(&[&[1, 0], &[0, 1]])], ClassPrior::uniform(2), 1.0);
        let r = fuse_bayes(&[("nope", &single(&[0]))], &m, FuseOptions::default());
        assert!(matches!(r, Err(Error::ModelMismatch(_))));
    }

    fn with_dirichlet(mut m: FusionModel, alphas: Vec<Vec<Vec<f64>>>) -> FusionModel {
        for (e, a) in m.experts.iter_mut().zip(alphas) {
            let n = a.len();
            e.dirichlet = Some(DirichletModel::new(a, vec![crate::domain::AlphaSource::Fitted; n]).unwrap());
        }
        m
    }

    #[test]
    fn dirichlet_single_expert_example() {
        let m = with_dirichlet(
            model(&[cm(&[&[1, 0], &[0, 1]])], ClassPrior::uniform(2), 1.0),
            vec![vec![vec![5.0, 1.0], vec![1.0, 5.0]]],
        );
        let s = ScoreMap::new(1, 1, 2, vec![0.9, 0.1]).unwrap();
        let r = fuse_dirichlet(&[("e0", &s)], &m, keep()).unwrap();
        assert_eq!(r.labels.get(0), 0);
        let scores = r.scores.unwrap();
        let want0 = 0.5f64.ln() + crate::domain::dirichlet_log_pdf(&[0.9, 0.1], &[5.0, 1.0]).unwrap();
        assert!((scores[0] - want0).abs() < 1e-6);
    }

    #[test]
    fn dirichlet_uniform_parameters_follow_prior() {
        let prior = ClassPrior::from_weights(&[0.2, 0.5, 0.3]).unwrap();
        let m = with_dirichlet(
            model(&vec![cm(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]]); 2], prior, 1.0),
            vec![vec![vec![1.0; 3]; 3]; 2],
        );
        let a = ScoreMap::new(1, 2, 3, vec![0.9, 0.05, 0.05, 0.1, 0.1, 0.8]).unwrap();
        let b = ScoreMap::new(1, 2, 3, vec![0.1, 0.1, 0.8, 0.7, 0.2, 0.1]).unwrap();
        let r = fuse_dirichlet(&[("e0", &a), ("e1", &b)], &m, FuseOptions::default()).unwrap();
        assert_eq!(r.labels.as_slice(), &[1, 1]);
    }

    #[test]
    fn dirichlet_swap_symmetry() {
        let m = with_dirichlet(
            model(&vec![cm(&[&[1, 0], &[0, 1]]); 2], ClassPrior::uniform(2), 1.0),
            vec![vec![vec![4.0, 1.5], vec![1.5, 4.0]]; 2],
        );
        let a = ScoreMap::new(1, 1, 2, vec![0.7, 0.3]).unwrap();
        let b = ScoreMap::new(1, 1, 2, vec![0.45, 0.55]).unwrap();
        let a_sw = ScoreMap::new(1, 1, 2, vec![0.3, 0.7]).unwrap();
        let b_sw = ScoreMap::new(1, 1, 2, vec![0.55, 0.45]).unwrap();
        let r = fuse_dirichlet(&[("e0", &a), ("e1", &b)], &m, FuseOptions::default()).unwrap();
        let r_sw = fuse_dirichlet(&[("e0", &a_sw), ("e1", &b_sw)], &m, FuseOptions::default()).unwrap();
        assert_eq!(r.labels.get(0), 1 - r_sw.labels.get(0));
    }

    #[test]
    fn dirichlet_requires_parameters() {
        let m = model(&[cm(&[&[1, 0], &[0, 1]])], ClassPrior::uniform(2), 1.0);
        let s = ScoreMap::new(1, 1, 2, vec![0.9, 0.1]).unwrap();
        assert!(matches!(
            fuse_dirichlet(&[("e0", &s)], &m, FuseOptions::default()),
            Err(Error::ModelMismatch(_))
        ));
    }

    #[test]
    fn average_examples() {
        let a = ScoreMap::new(1, 1, 2, vec![0.6, 0.4]).unwrap();
        let b = ScoreMap::new(1, 1, 2, vec![0.2, 0.8]).unwrap();
        let r = fuse_average(&[&a, &b], keep()).unwrap();
        assert_eq!(r.labels.get(0), 1);
        let s = r.scores.unwrap();
        assert!((s[0] - 0.4).abs() < 1e-7 && (s[1] - 0.6).abs() < 1e-7);
        assert_eq!(fuse_average(&[&a], FuseOptions::default()).unwrap().labels.get(0), 0);
        let t = ScoreMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(
            fuse_average(&[&t, &t], FuseOptions::default()).unwrap().labels.get(0),
            0
        );
        assert!(fuse_average(&[], FuseOptions::default()).is_err());
    }

    fn stack(id: &str, samples: &[&[f32]]) -> SampleStack {
        let k = samples[0].len();
        SampleStack::new(
            id,
            samples
                .iter()
                .map(|s| ScoreMap::new(1, 1, k, s.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn variance_weighted_example() {
        // Means (0.6, 0.4) and (0.2, 0.8); T = 2 samples at mean ± d give
        // per-class variance 2 d². d1 = sqrt(0.005) -> mean var 0.01,
        // d2 = sqrt(0.02) -> mean var 0.04; ω = (100, 25).
        let d1 = 0.005f64.sqrt();
        let d2 = 0.02f64.sqrt();
        let a = stack(
            "a",
            &[
                &[(0.6 + d1) as f32, (0.4 - d1) as f32],
                &[(0.6 - d1) as f32, (0.4 + d1) as f32],
            ],
        );
        let b = stack(
            "b",
            &[
                &[(0.2 + d2) as f32, (0.8 - d2) as f32],
                &[(0.2 - d2) as f32, (0.8 + d2) as f32],
            ],
        );
        let (_, wa) = a.mean_and_certainty();
        let (_, wb) = b.mean_and_certainty();
        assert!((wa[0] - 100.0).abs() < 1e-3 && (wb[0] - 25.0).abs() < 1e-3);
        let r = fuse_variance(&[a, b], keep()).unwrap();
        let s = r.scores.unwrap();
        assert!((s[0] - 0.52).abs() < 1e-6, "{s:?}");
        assert_eq!(r.labels.get(0), 0);
    }

    #[test]
    fn variance_zero_variance_expert_dominates() {
        let sure = stack("a", &[&[0.3, 0.7], &[0.3, 0.7]]);
        let noisy = stack("b", &[&[0.95, 0.05], &[0.85, 0.15]]);
        let r = fuse_variance(&[sure, noisy], FuseOptions::default()).unwrap();
        assert_eq!(r.labels.get(0), 1);
        let both = [
            stack("a", &[&[0.3, 0.7], &[0.3, 0.7]]),
            stack("b", &[&[0.9, 0.1], &[0.9, 0.1]]),
        ];
        let r = fuse_variance(&both, keep()).unwrap();
        assert!((r.scores.unwrap()[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn variance_needs_two_samples() {
        let one = ScoreMap::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert!(SampleStack::new("a", vec![one]).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in FusionMethod::ALL {
            assert_eq!(m.as_str().parse::<FusionMethod>().unwrap(), m);
        }
        assert!("median".parse::<FusionMethod>().is_err());
        assert!(!FusionMethod::Average.requires_model());
    }
}
