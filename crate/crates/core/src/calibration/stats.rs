use crate::domain::{ConfusionMatrix, LabelMap, ScoreMap};
use crate::error::{Error, Result};
use crate::numerics::clipped_log_probs;
use crate::rng::{Domain, StreamRng};

/// Adds one count at `[pred(p)][gt(p)]` for every element whose ground
/// truth is not `ignore_index`.
pub fn accumulate_confusion(
    pred: &LabelMap,
    gt: &LabelMap,
    m: &mut ConfusionMatrix,
    ignore_index: Option<usize>,
) -> Result<()> {
    if !pred.same_dims(gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let k = m.classes();
    pred.check_classes(k)?;
    gt.check_classes(k)?;
    for (&p, &t) in pred.as_slice().iter().zip(gt.as_slice()) {
        let t = usize::from(t);
        if Some(t) == ignore_index {
            continue;
        }
        m.add(usize::from(p), t, 1);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    /// `Σ ln y_j` over elements of this ground-truth class.
    pub sum_log: Vec<f64>,
    pub count: u64,
}

/// Dirichlet sufficient statistics of one expert, split by ground-truth
/// class. Mergeable: shards accumulated independently combine exactly in
/// their counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    per_class: Vec<ClassStats>,
    total_sum_log: Vec<f64>,
    total_count: u64,
}

impl SuffStats {
    pub fn new(classes: usize) -> Self {
        SuffStats {
            per_class: vec![
                ClassStats {
                    sum_log: vec![0.0; classes],
                    count: 0,
                };
                classes
            ],
            total_sum_log: vec![0.0; classes],
            total_count: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class(&self, k: usize) -> &ClassStats {
        &self.per_class[k]
    }

    pub fn total_sum_log(&self) -> &[f64] {
        &self.total_sum_log
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    /// Mean log score vector `s` of class `k`, or `None` without data.
    pub fn mean(&self, k: usize) -> Option<Vec<f64>> {
        let c = &self.per_class[k];
        (c.count > 0).then(|| c.sum_log.iter().map(|v| v / c.count as f64).collect())
    }

    fn add_element(&mut self, class: usize, logs: &[f64]) {
        let c = &mut self.per_class[class];
        for ((s, t), &l) in c.sum_log.iter_mut().zip(self.total_sum_log.iter_mut()).zip(logs) {
            *s += l;
            *t += l;
        }
        c.count += 1;
        self.total_count += 1;
    }

    pub fn merge(&mut self, other: &SuffStats) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::shape("cannot merge statistics of different class counts"));
        }
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            for (x, y) in a.sum_log.iter_mut().zip(&b.sum_log) {
                *x += y;
            }
            a.count += b.count;
        }
        for (x, y) in self.total_sum_log.iter_mut().zip(&other.total_sum_log) {
            *x += y;
        }
        self.total_count += other.total_count;
        Ok(())
    }
}

/// Random per-element subsampling of one image: each element is kept with
/// probability `rate`, decided by the `Subsample` stream of `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subsample {
    pub rate: f64,
    pub seed: u64,
}

impl Subsample {
    pub fn validate(&self) -> Result<()> {
        if self.rate > 0.0 && self.rate <= 1.0 {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "subsample rate must lie in (0, 1], got {}",
                self.rate
            )))
        }
    }
}

/// Adds `ln y_j` (clipped) of every non-ignored element to the statistics
/// of its ground-truth class.
pub fn accumulate_suffstats(
    scores: &ScoreMap,
    gt: &LabelMap,
    acc: &mut SuffStats,
    ignore_index: Option<usize>,
    subsample: Option<Subsample>,
) -> Result<()> {
    if !gt.same_dims(scores.height(), scores.width()) {
        return Err(Error::shape(format!(
            "scores are {}x{}, ground truth is {}x{}",
            scores.height(),
            scores.width(),
            gt.height(),
            gt.width()
        )));
    }
    let k = acc.classes();
    if scores.classes() != k {
        return Err(Error::shape(format!(
            "scores have {} classes, statistics {k}",
            scores.classes()
        )));
    }
    gt.check_classes(k)?;
    let mut keep = match subsample {
        Some(s) => {
            s.validate()?;
            let mut rng = StreamRng::new(s.seed, Domain::Subsample, 0);
            Some(move || rng.uniform() < s.rate)
        }
        None => None,
    };
    let mut logs = vec![0.0; k];
    for (y, &t) in scores.elements().zip(gt.as_slice()) {
        if let Some(keep) = keep.as_mut() {
            if !keep() {
                continue;
            }
        }
        let t = usize::from(t);
        if Some(t) == ignore_index {
            continue;
        }
        clipped_log_probs(y, &mut logs);
        acc.add_element(t, &logs);
    }
    Ok(())
}

/// Mean log score vector over every element whose ground truth is not
/// `k`, and the number of such elements.
pub fn complement_stats(acc: &SuffStats, k: usize) -> Result<(Vec<f64>, u64)> {
    if k >= acc.classes() {
        return Err(Error::domain(format!("class {k} out of range")));
    }
    let own = acc.class(k);
    let n = acc.total_count() - own.count;
    if n == 0 {
        return Err(Error::EmptyComplement { class: k });
    }
    let mean = acc
        .total_sum_log()
        .iter()
        .zip(&own.sum_log)
        .map(|(t, s)| (t - s) / n as f64)
        .collect();
    Ok((mean, n))
}
