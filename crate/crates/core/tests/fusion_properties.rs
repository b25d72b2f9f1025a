use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use statfuse_core::domain::{
    AlphaSource, ClassPrior, ClassSet, ConfusionMatrix, DirichletModel, ExpertModel, FusionModel, LabelMap, ScoreMap,
};
use statfuse_core::fusion::{
    fuse_average, fuse_bayes, fuse_dirichlet, fuse_variance, run_method, FuseOptions, FusionInputs, FusionMethod,
    SampleStack,
};

fn random_scores(rng: &mut StdRng, h: usize, w: usize, k: usize) -> ScoreMap {
    ScoreMap::from_fn(h, w, k, |_, y| {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
        let total: f64 = raw.iter().sum();
        for (o, r) in y.iter_mut().zip(&raw) {
            *o = (r / total) as f32;
        }
    })
    .unwrap()
}

fn random_labels(rng: &mut StdRng, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..k as u16)).collect()).unwrap()
}

fn random_confusion(rng: &mut StdRng, k: usize) -> ConfusionMatrix {
    ConfusionMatrix::from_rows(
        &(0..k)
            .map(|_| (0..k).map(|_| rng.random_range(0..50u64)).collect())
            .collect::<Vec<_>>(),
    )
    .unwrap()
}

fn random_model(rng: &mut StdRng, k: usize, experts: usize, with_alpha: bool) -> FusionModel {
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    FusionModel {
        class_set: ClassSet::numbered(k, None).unwrap(),
        experts: (0..experts)
            .map(|e| ExpertModel {
                id: format!("e{e}"),
                confusion: random_confusion(rng, k),
                dirichlet: with_alpha.then(|| {
                    DirichletModel::new(
                        (0..k)
                            .map(|_| (0..k).map(|_| rng.random_range(0.2..12.0)).collect())
                            .collect(),
                        vec![AlphaSource::Fitted; k],
                    )
                    .unwrap()
                }),
            })
            .collect(),
        prior: ClassPrior::from_weights(&weights).unwrap(),
        beta: 0.0,
        delta: 0.0,
        smoothing: 1.0,
    }
}

/// Direct transcription of the decision rule: for each candidate class sum
/// the log prior and each expert's smoothed conditional log-likelihood.
fn bayes_oracle(model: &FusionModel, labels: &[&LabelMap], i: usize) -> (usize, Vec<f64>) {
    let k = model.class_set.len();
    let weights: Vec<f64> = model.prior.log_probs().iter().map(|v| v.exp()).collect();
    let wsum: f64 = weights.iter().sum();
    let mut scores = Vec::with_capacity(k);
    for (class, w) in weights.iter().enumerate() {
        let mut s = (w / wsum).ln();
        for (e, l) in model.experts.iter().zip(labels) {
            let out = l.get(i);
            let column: f64 = (0..k).map(|o| e.confusion.get(o, class) as f64 + model.smoothing).sum();
            s += ((e.confusion.get(out, class) as f64 + model.smoothing) / column).ln();
        }
        scores.push(s);
    }
    let mut best = 0;
    for c in 1..k {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    (best, scores)
}

fn keep() -> FuseOptions {
    FuseOptions {
        keep_scores: true,
        parallel: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bayes_matches_direct_enumeration(seed in any::<u64>(), k in 2usize..5, m in 1usize..4) {
        let mut rng = StdRng::seed_from_u64(seed);
        let model = random_model(&mut rng, k, m, false);
        let maps: Vec<LabelMap> = (0..m).map(|_| random_labels(&mut rng, 4, 5, k)).collect();
        let refs: Vec<&LabelMap> = maps.iter().collect();
        let named: Vec<(&str, &LabelMap)> = model.experts.iter().map(|e| e.id.as_str()).zip(refs.iter().copied()).collect();
        let fused = fuse_bayes(&named, &model, keep()).unwrap();
        let scores = fused.scores.unwrap();
        for i in 0..20 {
            let (label, want) = bayes_oracle(&model, &refs, i);
            prop_assert_eq!(fused.labels.get(i), label);
            for c in 0..k {
                prop_assert!((scores[i * k + c] - want[c]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn uninformative_expert_is_a_no_op(seed in any::<u64>(), k in 2usize..5) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut model = random_model(&mut rng, k, 2, false);
        let a = random_labels(&mut rng, 6, 6, k);
        let b = random_labels(&mut rng, 6, 6, k);
        let before = fuse_bayes(&[("e0", &a), ("e1", &b)], &model, FuseOptions::default()).unwrap();
        let count = rng.random_range(0..20u64);
        model.experts.push(ExpertModel {
            id: "flat".into(),
            confusion: ConfusionMatrix::from_rows(&vec![vec![count; k]; k]).unwrap(),
            dirichlet: None,
        });
        let noise = random_labels(&mut rng, 6, 6, k);
        let after = fuse_bayes(&[("e0", &a), ("e1", &b), ("flat", &noise)], &model, FuseOptions::default()).unwrap();
        prop_assert_eq!(before.labels, after.labels);
    }

    #[test]
    fn flat_dirichlet_returns_prior_argmax(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut model = random_model(&mut rng, k, 2, false);
        for e in &mut model.experts {
            e.dirichlet = Some(DirichletModel::uniform(k));
        }
        let a = random_scores(&mut rng, 3, 4, k);
        let b = random_scores(&mut rng, 3, 4, k);
        let fused = fuse_dirichlet(&[("e0", &a), ("e1", &b)], &model, FuseOptions::default()).unwrap();
        let p = model.prior.log_probs();
        let best = (0..k).fold(0, |b, c| if p[c] > p[b] { c } else { b });
        prop_assert!(fused.labels.as_slice().iter().all(|&l| usize::from(l) == best));
    }

    #[test]
    fn average_ignores_expert_order(seed in any::<u64>(), k in 2usize..6, m in 2usize..5) {
        let mut rng = StdRng::seed_from_u64(seed);
        let maps: Vec<ScoreMap> = (0..m).map(|_| random_scores(&mut rng, 5, 5, k)).collect();
        let fwd: Vec<&ScoreMap> = maps.iter().collect();
        let rev: Vec<&ScoreMap> = maps.iter().rev().collect();
        prop_assert_eq!(
            fuse_average(&fwd, FuseOptions::default()).unwrap().labels,
            fuse_average(&rev, FuseOptions::default()).unwrap().labels
        );
    }

    #[test]
    fn class_permutation_is_equivariant(seed in any::<u64>(), k in 2usize..5) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let model = random_model(&mut rng, k, 2, true);
        let stacks: Vec<SampleStack> = (0..2)
            .map(|e| SampleStack::new(format!("e{e}"), (0..3).map(|_| random_scores(&mut rng, 4, 4, k)).collect()).unwrap())
            .collect();
        let inputs = FusionInputs::from_stacks(stacks);

        let permute_scores = |s: &ScoreMap| {
            ScoreMap::from_fn(s.height(), s.width(), k, |i, y| {
                for c in 0..k {
                    y[perm[c]] = s.element(i)[c];
                }
            })
            .unwrap()
        };
        let mut pmodel = model.clone();
        let log_p = model.prior.log_probs();
        let mut plog = vec![0.0; k];
        for c in 0..k {
            plog[perm[c]] = log_p[c];
        }
        pmodel.prior = ClassPrior::from_log_probs(plog).unwrap();
        for (pe, e) in pmodel.experts.iter_mut().zip(&model.experts) {
            let mut rows = vec![vec![0u64; k]; k];
            for o in 0..k {
                for t in 0..k {
                    rows[perm[o]][perm[t]] = e.confusion.get(o, t);
                }
            }
            pe.confusion = ConfusionMatrix::from_rows(&rows).unwrap();
            let d = e.dirichlet.as_ref().unwrap();
            let mut alphas = vec![vec![0.0; k]; k];
            for c in 0..k {
                for j in 0..k {
                    alphas[perm[c]][perm[j]] = d.alpha(c)[j];
                }
            }
            pe.dirichlet = Some(DirichletModel::new(alphas, vec![AlphaSource::Fitted; k]).unwrap());
        }
        let pstacks: Vec<SampleStack> = inputs
            .stacks
            .iter()
            .map(|s| SampleStack::new(s.id(), s.samples().iter().map(permute_scores).collect()).unwrap())
            .collect();
        let pinputs = FusionInputs::from_stacks(pstacks);

        for method in FusionMethod::ALL {
            let a = run_method(method, &inputs, Some(&model), FuseOptions::default()).unwrap();
            let b = run_method(method, &pinputs, Some(&pmodel), FuseOptions::default()).unwrap();
            for i in 0..16 {
                prop_assert_eq!(perm[a.labels.get(i)], b.labels.get(i), "{} element {}", method, i);
            }
        }
    }
}

#[test]
fn region_split_matches_sequential() {
    let mut rng = StdRng::seed_from_u64(5);
    let k = 5;
    let model = random_model(&mut rng, k, 3, true);
    let stacks: Vec<SampleStack> = (0..3)
        .map(|e| {
            SampleStack::new(
                format!("e{e}"),
                (0..4).map(|_| random_scores(&mut rng, 37, 23, k)).collect(),
            )
            .unwrap()
        })
        .collect();
    let inputs = FusionInputs::from_stacks(stacks);
    for method in FusionMethod::ALL {
        for keep_scores in [false, true] {
            let seq = run_method(
                method,
                &inputs,
                Some(&model),
                FuseOptions {
                    keep_scores,
                    parallel: false,
                },
            )
            .unwrap();
            let par = run_method(
                method,
                &inputs,
                Some(&model),
                FuseOptions {
                    keep_scores,
                    parallel: true,
                },
            )
            .unwrap();
            assert_eq!(seq, par, "{method}");
        }
    }
}

#[test]
fn fusion_is_deterministic() {
    let mut rng = StdRng::seed_from_u64(6);
    let model = random_model(&mut rng, 4, 2, true);
    let stacks: Vec<SampleStack> = (0..2)
        .map(|e| {
            SampleStack::new(
                format!("e{e}"),
                (0..3).map(|_| random_scores(&mut rng, 9, 9, 4)).collect(),
            )
            .unwrap()
        })
        .collect();
    let inputs = FusionInputs::from_stacks(stacks);
    for method in FusionMethod::ALL {
        let a = run_method(method, &inputs, Some(&model), keep()).unwrap();
        let b = run_method(method, &inputs, Some(&model), keep()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn kept_scores_agree_with_labels() {
    let mut rng = StdRng::seed_from_u64(8);
    let model = random_model(&mut rng, 3, 2, true);
    let stacks: Vec<SampleStack> = (0..2)
        .map(|e| {
            SampleStack::new(
                format!("e{e}"),
                (0..3).map(|_| random_scores(&mut rng, 6, 7, 3)).collect(),
            )
            .unwrap()
        })
        .collect();
    let inputs = FusionInputs::from_stacks(stacks);
    for method in FusionMethod::ALL {
        let r = run_method(method, &inputs, Some(&model), keep()).unwrap();
        let s = r.scores.unwrap();
        for i in 0..42 {
            let e = &s[i * 3..i * 3 + 3];
            let best = (0..3).fold(0, |b, c| if e[c] > e[b] { c } else { b });
            assert_eq!(r.labels.get(i), best);
        }
        if matches!(method, FusionMethod::Average | FusionMethod::Variance) {
            for e in s.chunks(3) {
                assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn equal_variances_reduce_to_average() {
    let mut rng = StdRng::seed_from_u64(9);
    let k = 4;
    // Every stack is {c + d, c - d} with the same offset pattern, so all
    // experts share one per-element variance.
    let d: Vec<f32> = vec![0.01, -0.01, 0.005, -0.005];
    let stacks: Vec<SampleStack> = (0..3)
        .map(|e| {
            let centre = ScoreMap::from_fn(10, 10, k, |_, y| {
                let raw: Vec<f32> = (0..k).map(|_| rng.random_range(0.1..1.0f32)).collect();
                let t: f32 = raw.iter().sum();
                for (o, r) in y.iter_mut().zip(&raw) {
                    *o = 0.05 + 0.8 * r / t;
                }
                let extra = 1.0 - y.iter().sum::<f32>();
                y[0] += extra;
            })
            .unwrap();
            let shifted = |sign: f32| {
                ScoreMap::from_fn(10, 10, k, |i, y| {
                    for c in 0..k {
                        y[c] = centre.element(i)[c] + sign * d[c];
                    }
                })
                .unwrap()
            };
            SampleStack::new(format!("e{e}"), vec![shifted(1.0), shifted(-1.0)]).unwrap()
        })
        .collect();
    let means: Vec<ScoreMap> = stacks.iter().map(|s| s.mean_map()).collect();
    let refs: Vec<&ScoreMap> = means.iter().collect();
    let v = fuse_variance(&stacks, keep()).unwrap();
    let a = fuse_average(&refs, keep()).unwrap();
    assert_eq!(v.labels, a.labels);
}
