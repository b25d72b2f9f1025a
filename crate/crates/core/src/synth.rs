//! Synthetic scenes and experts with known generative models.
//!
//! A scene tiles the image with square regions whose classes are drawn
//! from fixed frequencies. An expert emits, at an element of class `k`, a
//! score vector drawn from `Dirichlet(α_true^(k))`. Every draw comes from a
//! stream addressed by `(seed, element or region index)`, so generation is
//! reproducible and independent of evaluation order.

use crate::domain::{ClassSet, LabelMap, ScoreMap};
use crate::error::{Error, Result};
use crate::fusion::SampleStack;
use crate::rng::{Domain, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Class frequencies, summing to one.
    pub class_frequencies: Vec<f64>,
    /// Side of the square regions; the last row and column of regions are
    /// truncated at the image border.
    pub region_size: usize,
    pub seed: u64,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<LabelMap> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::domain(format!("scene is {}x{}", spec.height, spec.width)));
    }
    if spec.region_size == 0 {
        return Err(Error::domain("region_size must be positive"));
    }
    let f = &spec.class_frequencies;
    if f.len() < 2 || f.len() > usize::from(u16::MAX) {
        return Err(Error::domain(format!("{} class frequencies", f.len())));
    }
    if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::domain("class frequencies must be finite and non-negative"));
    }
    let total: f64 = f.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("class frequencies sum to {total}, not 1")));
    }
    let r = spec.region_size;
    let cols = spec.width.div_ceil(r);
    let rows = spec.height.div_ceil(r);
    let region_class: Vec<u16> = (0..rows * cols)
        .map(|region| StreamRng::new(spec.seed, Domain::Scene, region as u64).categorical(f) as u16)
        .collect();
    let labels = (0..spec.height * spec.width)
        .map(|i| {
            let (y, x) = (i / spec.width, i % spec.width);
            region_class[(y / r) * cols + x / r]
        })
        .collect();
    LabelMap::new(spec.height, spec.width, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec {
    pub id: String,
    /// `generative_alphas[k]`: concentration of the expert's scores on
    /// elements of ground-truth class `k`.
    pub generative_alphas: Vec<Vec<f64>>,
}

impl ExpertSpec {
    pub fn new(id: impl Into<String>, generative_alphas: Vec<Vec<f64>>) -> Result<Self> {
        let spec = ExpertSpec {
            id: id.into(),
            generative_alphas,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn classes(&self) -> usize {
        self.generative_alphas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.generative_alphas.len();
        if k < 2 {
            return Err(Error::domain(format!("expert {:?} needs at least 2 classes", self.id)));
        }
        for (c, a) in self.generative_alphas.iter().enumerate() {
            if a.len() != k {
                return Err(Error::shape(format!(
                    "expert {:?}: alpha for class {c} has {} entries, expected {k}",
                    self.id,
                    a.len()
                )));
            }
            if a.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::domain(format!(
                    "expert {:?}: alpha for class {c} must be finite and positive",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Draws one score vector per element from the expert's generative model.
pub fn simulate_expert(gt: &LabelMap, spec: &ExpertSpec, seed: u64) -> Result<ScoreMap> {
    spec.validate()?;
    let k = spec.classes();
    gt.check_classes(k)?;
    let mut y = vec![0.0f64; k];
    ScoreMap::from_fn(gt.height(), gt.width(), k, |i, out| {
        let mut rng = StreamRng::new(seed, Domain::Expert, i as u64);
        rng.dirichlet(&spec.generative_alphas[gt.get(i)], &mut y);
        for (o, v) in out.iter_mut().zip(&y) {
            *o = *v as f32;
        }
    })
}

/// Monte-Carlo sample stack around an expert's scores.
///
/// The per-element centre `c` is the draw [`simulate_expert`] would make
/// with the same seed. Each of the `samples` draws is then
/// `Dirichlet(concentration · max(c, 1e-6))`: a larger concentration means
/// a tighter spread and lower per-element variance.
pub fn simulate_sample_stack(
    gt: &LabelMap,
    spec: &ExpertSpec,
    samples: usize,
    concentration: f64,
    seed: u64,
) -> Result<SampleStack> {
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(Error::domain(format!(
            "sample concentration must be positive, got {concentration}"
        )));
    }
    if samples < 2 {
        return Err(Error::domain(format!(
            "a sample stack needs at least 2 samples, got {samples}"
        )));
    }
    let centre = simulate_expert(gt, spec, seed)?;
    let k = spec.classes();
    let n = gt.len();
    let mut data = vec![vec![0.0f32; n * k]; samples];
    let mut alpha = vec![0.0f64; k];
    let mut y = vec![0.0f64; k];
    for i in 0..n {
        for (a, &c) in alpha.iter_mut().zip(centre.element(i)) {
            *a = concentration * f64::from(c).max(1e-6);
        }
        let mut rng = StreamRng::new(seed, Domain::SampleStack, i as u64);
        for sample in data.iter_mut() {
            rng.dirichlet(&alpha, &mut y);
            for (o, v) in sample[i * k..(i + 1) * k].iter_mut().zip(&y) {
                *o = *v as f32;
            }
        }
    }
    let maps = data
        .into_iter()
        .map(|d| ScoreMap::new(gt.height(), gt.width(), k, d))
        .collect::<Result<Vec<_>>>()?;
    SampleStack::new(spec.id.clone(), maps)
}

/// SplitMix64 finalizer over `seed` and each part in turn. Gives unrelated
/// seeds for different experts, images and splits derived from one `--seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Data split of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Dev = 0,
    Test = 1,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Monte-Carlo sampling attached to a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct StackSpec {
    pub samples: usize,
    /// One sample concentration per expert.
    pub concentrations: Vec<f64>,
}

/// A complete synthetic setup: scene statistics plus a set of experts.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub class_set: ClassSet,
    pub class_frequencies: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub region_size: usize,
    /// Images per split.
    pub images: usize,
    pub experts: Vec<ExpertSpec>,
    pub stacks: Option<StackSpec>,
}

/// One simulated image with its ground truth and every expert's output.
#[derive(Debug, Clone, PartialEq)]
pub struct SimImage {
    pub gt: LabelMap,
    pub experts: Vec<ScoreMap>,
    /// Filled only when the scenario has a [`StackSpec`].
    pub stacks: Vec<SampleStack>,
}

pub const PRESETS: [&str; 4] = ["complementary", "degraded", "sample_stacks", "underconfident"];

/// `1 + peak` on the diagonal, `1` elsewhere.
fn sharp(k: usize, class: usize, peak: f64) -> Vec<f64> {
    (0..k).map(|j| if j == class { 1.0 + peak } else { 1.0 }).collect()
}

/// Sharp on every class except `pair`, whose two classes share one
/// concentration vector and are therefore indistinguishable to the expert.
fn confusing(k: usize, pair: [usize; 2], peak: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            if pair.contains(&c) {
                (0..k)
                    .map(|j| if pair.contains(&j) { 1.0 + peak / 2.0 } else { 1.0 })
                    .collect()
            } else {
                sharp(k, c, peak)
            }
        })
        .collect()
}

impl Scenario {
    /// Built-in scenarios:
    ///
    /// * `complementary`: K = 6; expert `a` cannot tell classes 0 and 1
    ///   apart, expert `b` cannot tell 2 and 3 apart, both are sharp
    ///   elsewhere.
    /// * `degraded`: K = 6; expert `a` is informative, expert `b` emits
    ///   flat Dirichlet noise regardless of the class.
    /// * `sample_stacks`: K = 4; two experts with Monte-Carlo stacks of
    ///   different spread.
    /// * `underconfident`: the complementary structure with weak,
    ///   low-concentration experts and imbalanced class frequencies.
    pub fn preset(name: &str) -> Result<Scenario> {
        let numbered = |k| ClassSet::numbered(k, None);
        let scenario = match name {
            "complementary" => Scenario {
                name: name.into(),
                class_set: numbered(6)?,
                class_frequencies: vec![1.0 / 6.0; 6],
                height: 512,
                width: 512,
                region_size: 16,
                images: 1,
                experts: vec![
                    ExpertSpec::new("a", confusing(6, [0, 1], 4.0))?,
                    ExpertSpec::new("b", confusing(6, [2, 3], 4.0))?,
                ],
                stacks: None,
            },
            "degraded" => Scenario {
                name: name.into(),
                class_set: numbered(6)?,
                class_frequencies: vec![1.0 / 6.0; 6],
                height: 512,
                width: 512,
                region_size: 16,
                images: 1,
                experts: vec![
                    ExpertSpec::new("a", (0..6).map(|c| sharp(6, c, 2.0)).collect())?,
                    ExpertSpec::new("b", vec![vec![1.0; 6]; 6])?,
                ],
                stacks: None,
            },
            "sample_stacks" => Scenario {
                name: name.into(),
                class_set: numbered(4)?,
                class_frequencies: vec![0.25; 4],
                height: 128,
                width: 128,
                region_size: 8,
                images: 1,
                experts: vec![
                    ExpertSpec::new("a", (0..4).map(|c| sharp(4, c, 3.0)).collect())?,
                    ExpertSpec::new("b", (0..4).map(|c| sharp(4, c, 1.5)).collect())?,
                ],
                stacks: Some(StackSpec {
                    samples: 8,
                    concentrations: vec![50.0, 10.0],
                }),
            },
            "underconfident" => Scenario {
                name: name.into(),
                class_set: numbered(6)?,
                class_frequencies: vec![0.3, 0.05, 0.3, 0.05, 0.15, 0.15],
                height: 256,
                width: 256,
                region_size: 4,
                images: 1,
                experts: vec![
                    ExpertSpec::new("a", confusing(6, [0, 1], 0.6))?,
                    ExpertSpec::new("b", confusing(6, [2, 3], 0.6))?,
                ],
                stacks: None,
            },
            other => {
                return Err(Error::domain(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(scenario)
    }

    /// Timing workload: `experts` sharp experts over `classes` uniform
    /// classes, each with a Monte-Carlo stack of `samples` draws.
    pub fn throughput(classes: usize, experts: usize, samples: usize, height: usize, width: usize) -> Result<Scenario> {
        if experts == 0 {
            return Err(Error::domain("throughput scenario needs at least one expert"));
        }
        Ok(Scenario {
            name: "throughput".into(),
            class_set: ClassSet::numbered(classes, None)?,
            class_frequencies: vec![1.0 / classes as f64; classes],
            height,
            width,
            region_size: 16,
            images: 1,
            experts: (0..experts)
                .map(|e| {
                    ExpertSpec::new(
                        format!("e{e}"),
                        (0..classes).map(|c| sharp(classes, c, 2.0 + e as f64)).collect(),
                    )
                })
                .collect::<Result<_>>()?,
            stacks: Some(StackSpec {
                samples,
                concentrations: vec![30.0; experts],
            }),
        })
    }

    pub fn scene_spec(&self, seed: u64, split: Split, image: usize) -> SceneSpec {
        SceneSpec {
            height: self.height,
            width: self.width,
            class_frequencies: self.class_frequencies.clone(),
            region_size: self.region_size,
            seed: derive_seed(seed, &[split as u64, image as u64]),
        }
    }

    /// Seed of expert `e` on one image.
    pub fn expert_seed(&self, seed: u64, split: Split, image: usize, expert: usize) -> u64 {
        derive_seed(seed, &[split as u64, image as u64, 1 + expert as u64])
    }

    pub fn simulate(&self, seed: u64, split: Split, image: usize) -> Result<SimImage> {
        let gt = generate_scene(&self.scene_spec(seed, split, image))?;
        let mut experts = Vec::with_capacity(self.experts.len());
        let mut stacks = Vec::new();
        for (e, spec) in self.experts.iter().enumerate() {
            let s = self.expert_seed(seed, split, image, e);
            match &self.stacks {
                Some(st) => {
                    let stack = simulate_sample_stack(&gt, spec, st.samples, st.concentrations[e], s)?;
                    experts.push(stack.mean_map());
                    stacks.push(stack);
                }
                None => experts.push(simulate_expert(&gt, spec, s)?),
            }
        }
        Ok(SimImage { gt, experts, stacks })
    }
}
