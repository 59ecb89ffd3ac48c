mod common;

use common::rng;
use domainness::adaptation::{fit_second_order, AlignmentTransform};
use domainness::classifier::{train_logistic, train_multiclass, TrainConfig};
use domainness::fusion::{evaluate_pairs, fuse, DescriptorSet, IdentityAdapter, MarginMatrix};
use domainness::FeatureVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn fv(v: Vec<f32>) -> FeatureVector {
    FeatureVector::new(v).unwrap()
}

fn covariance(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    (0..d)
        .map(|i| (0..d).map(|j| samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / n).collect())
        .collect()
}

fn frobenius(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Samples `mean + A z` for a random mixing matrix `A`.
fn gaussian(rng: &mut impl Rng, n: usize, d: usize) -> Vec<FeatureVector> {
    let mix: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            fv((0..d).map(|i| (mean[i] + (0..d).map(|k| mix[i][k] * z[k]).sum::<f64>()) as f32).collect())
        })
        .collect()
}

fn as_f64(set: &[FeatureVector]) -> Vec<Vec<f64>> {
    set.iter().map(|f| f.values().iter().map(|&v| v as f64).collect()).collect()
}

#[test]
fn loss_never_increases_on_random_datasets() {
    let mut rng = rng(21);
    for t in 0..50 {
        let n = rng.random_range(4..60);
        let d = rng.random_range(1..12);
        let scale = rng.random_range(0.1..20.0f32);
        let feats: Vec<FeatureVector> =
            (0..n).map(|_| fv((0..d).map(|_| rng.random_range(-scale..scale)).collect())).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let trained = train_logistic(&feats, &labels, &TrainConfig::default()).unwrap();
        for w in trained.loss_history.windows(2) {
            assert!(w[1] <= w[0], "dataset {t}: loss rose from {} to {}", w[0], w[1]);
        }
    }
}

#[test]
fn retraining_is_bit_exact() {
    let mut rng = rng(22);
    let feats: Vec<FeatureVector> = (0..40).map(|_| fv((0..6).map(|_| rng.random()).collect())).collect();
    let labels: Vec<&str> = (0..40).map(|i| ["a", "b", "c"][i % 3]).collect();
    let cfg = TrainConfig::default();
    let a = train_multiclass(&feats, &labels, &cfg).unwrap();
    let b = train_multiclass(&feats, &labels, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn aligned_source_covariance_matches_target() {
    let mut rng = rng(23);
    let src = gaussian(&mut rng, 500, 5);
    let tgt = gaussian(&mut rng, 500, 5);
    let t = fit_second_order(&src, &tgt, 1e-3).unwrap();
    let moved: Vec<FeatureVector> = src.iter().map(|f| t.apply(f).unwrap()).collect();
    let (cm, ct) = (covariance(&as_f64(&moved)), covariance(&as_f64(&tgt)));
    let diff: Vec<Vec<f64>> = cm.iter().zip(&ct).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
    let rel = frobenius(&diff) / frobenius(&ct);
    assert!(rel < 0.1, "relative error {rel}");
    // the source mean lands on the target mean
    let mean = |s: &[Vec<f64>], j: usize| s.iter().map(|v| v[j]).sum::<f64>() / s.len() as f64;
    for j in 0..5 {
        assert!((mean(&as_f64(&moved), j) - mean(&as_f64(&tgt), j)).abs() < 1e-3);
    }
}

#[test]
fn aligning_a_set_with_itself_is_identity() {
    let mut rng = rng(24);
    let src = gaussian(&mut rng, 500, 5);
    let t = fit_second_order(&src, &src, 1e-3).unwrap();
    let id = AlignmentTransform::identity(5);
    for (a, b) in t.matrix.iter().zip(&id.matrix) {
        assert!((a - b).abs() < 1e-4);
    }
    for f in &src {
        for (a, b) in t.apply(f).unwrap().values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()));
        }
    }
}

fn descriptor_set(rng: &mut impl Rng, n: usize, shift: f32) -> DescriptorSet {
    let noise = Normal::new(0.0f32, 1.0).unwrap();
    let classes = ["a", "b", "c"];
    let mut set = DescriptorSet::default();
    for i in 0..n {
        let c = i % 3;
        let mut point = |k: usize| {
            fv((0..4).map(|j| if j == c { 3.0 + shift * k as f32 } else { 0.0 } + noise.sample(&mut *rng)).collect())
        };
        set.paths.push(format!("img{i}.png"));
        set.classes.push(Some(classes[c].to_string()));
        set.global.push(point(0));
        for k in 0..3 {
            set.levels[k].push(point(k));
        }
    }
    set
}

#[test]
fn identity_adapter_changes_nothing() {
    let mut rng = rng(25);
    let src = descriptor_set(&mut rng, 45, 0.5);
    let tgt = descriptor_set(&mut rng, 30, -0.5);
    let cfg = TrainConfig::default();
    let plain = evaluate_pairs(&src, &tgt, None, &cfg).unwrap();
    let ident = evaluate_pairs(&src, &tgt, Some(&IdentityAdapter), &cfg).unwrap();
    assert_eq!(plain.accuracy, ident.accuracy);
    assert_eq!(plain.margins, ident.margins);
    assert_eq!(plain.models, ident.models);
}

#[test]
fn same_set_on_both_sides_is_well_classified_on_the_diagonal() {
    let mut rng = rng(26);
    let set = descriptor_set(&mut rng, 60, 0.0);
    let eval = evaluate_pairs(&set, &set, None, &TrainConfig::default()).unwrap();
    for k in 0..3 {
        assert!(eval.accuracy[k][k] >= 0.9, "level {k}: {}", eval.accuracy[k][k]);
    }
}

#[test]
fn fusion_ignores_shifts_and_positive_scaling() {
    let mut rng = rng(27);
    let classes: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let mm = |v: Vec<f64>| MarginMatrix::new(classes.clone(), v).unwrap();
    for _ in 0..200 {
        let levels: Vec<Vec<f64>> = (0..9).map(|_| (0..4).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let global: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let base = fuse(&levels.iter().cloned().map(mm).collect::<Vec<_>>(), &mm(global.clone())).unwrap();
        let shift = rng.random_range(-10.0..10.0);
        let shifted = fuse(
            &levels.iter().map(|l| mm(l.iter().map(|v| v + shift).collect())).collect::<Vec<_>>(),
            &mm(global.iter().map(|v| v - shift).collect()),
        )
        .unwrap();
        assert_eq!(base, shifted);
        // powers of two keep the arithmetic exact
        let s = [0.25, 2.0, 8.0][rng.random_range(0..3)];
        let scaled = fuse(
            &levels.iter().map(|l| mm(l.iter().map(|v| v * s).collect())).collect::<Vec<_>>(),
            &mm(global.iter().map(|v| v * s).collect()),
        )
        .unwrap();
        assert_eq!(base, scaled);
    }
}
