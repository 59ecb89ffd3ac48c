//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use domainness::classifier::{LinearModel, LinearRow};
use domainness::extractor::{builtin_extract, BUILTIN_DIM};
use domainness::{DomainnessMap, FeatureVector, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, height: usize, width: usize) -> ImageTensor {
    ImageTensor::from_fn(height, width, |_, _| [rng.random(), rng.random(), rng.random()])
}

/// Random binary model over the builtin descriptor, with a few zero weights.
pub fn random_model(rng: &mut impl Rng) -> LinearModel {
    let weights = (0..BUILTIN_DIM)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(-2.0f32..2.0) })
        .collect();
    LinearModel {
        classes: vec!["S".into(), "T".into()],
        row: LinearRow { weights, bias: rng.random_range(-1.0f32..1.0) },
    }
}

/// Domainness map computed the slow way: every occluded copy is built from
/// scratch, and every pixel scans every occluder.
pub fn oracle_map(img: &ImageTensor, model: &LinearModel, patch: usize, stride: usize, fill: [f32; 3]) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let maxw = model.weights().iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let u: Vec<f64> = model
        .weights()
        .iter()
        .map(|&v| if maxw == 0.0 { 1.0 } else { (v as f64).abs() / maxw })
        .collect();
    let base = builtin_extract(img).unwrap();

    let mut occluders = Vec::new();
    let mut r = 0;
    while r + patch <= h {
        let mut c = 0;
        while c + patch <= w {
            let occluded = ImageTensor::from_fn(h, w, |y, x| {
                if y >= r && y < r + patch && x >= c && x < c + patch {
                    fill
                } else {
                    img.rgb(y, x)
                }
            });
            let f = builtin_extract(&occluded).unwrap();
            let d = distance(&base, &f, &u);
            occluders.push((r, c, d));
            c += stride;
        }
        r += stride;
    }

    let mut raw = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let hits: Vec<f64> = occluders
                .iter()
                .filter(|(r, c, _)| y >= *r && y < r + patch && x >= *c && x < c + patch)
                .map(|o| o.2)
                .collect();
            if !hits.is_empty() {
                raw[y * w + x] = Some(hits.iter().sum::<f64>() / hits.len() as f64);
            }
        }
    }
    let covered: Vec<f64> = raw.iter().flatten().copied().collect();
    let lo = covered.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = covered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.iter()
        .map(|v| match v {
            Some(v) if hi > lo => (v - lo) / (hi - lo),
            _ => 0.0,
        })
        .collect()
}

fn distance(a: &FeatureVector, b: &FeatureVector, u: &[f64]) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .zip(u)
        .map(|((&x, &y), &u)| (u * (x as f64 - y as f64)).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs_diff(map: &DomainnessMap, oracle: &[f64]) -> f64 {
    map.scores()
        .iter()
        .zip(oracle)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max)
}
