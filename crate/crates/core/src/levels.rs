//! Low / mid / high domainness descriptors.
//!
//! For each patch scale, random patches are scored by their mean domainness,
//! split into rank terciles and max-pooled per tercile; pooled vectors of the
//! three scales are concatenated per level.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::extractor::Extractor;
use crate::image::ImageTensor;
use crate::types::{DomainnessMap, FeatureVector};

pub const SCALES: [usize; 3] = [32, 64, 128];
pub const PATCHES_PER_SCALE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L,
    M,
    H,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L, Level::M, Level::H];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::L => "L",
            Level::M => "M",
            Level::H => "H",
        };
        f.write_str(s)
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Level::L),
            "M" => Ok(Level::M),
            "H" => Ok(Level::H),
            other => Err(Error::invalid(format!("unknown level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub scale: usize,
    pub pos: (usize, usize),
    pub domainness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelDescriptor {
    pub level: Level,
    pub values: FeatureVector,
}

/// SplitMix64 finalizer, used to derive independent seed streams.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One seed per scale, derived from `(master, scale index)`.
pub fn scale_seeds(master: u64) -> [u64; 3] {
    [0u64, 1, 2].map(|i| mix_seed(mix_seed(master) ^ i))
}

/// Uniform top-left corners, drawn with replacement.
pub fn sample_patches(height: usize, width: usize, scale: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if scale == 0 || scale > height.min(width) {
        return Err(Error::invalid(format!(
            "patch scale {scale} does not fit a {height}x{width} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let r = rng.random_range(0..=height - scale);
            let c = rng.random_range(0..=width - scale);
            (r, c)
        })
        .collect())
}

pub fn patch_domainness(map: &DomainnessMap, pos: (usize, usize), scale: usize) -> Result<f64> {
    let (r0, c0) = pos;
    if r0 + scale > map.height() || c0 + scale > map.width() || scale == 0 {
        return Err(Error::invalid(format!(
            "patch {scale}x{scale} at ({r0}, {c0}) exceeds {}x{}",
            map.height(),
            map.width()
        )));
    }
    let mut sum = 0.0f64;
    for r in r0..r0 + scale {
        for c in c0..c0 + scale {
            sum += map.get(r, c) as f64;
        }
    }
    Ok(sum / (scale * scale) as f64)
}

/// Rank terciles with index tie-break. `L` takes the first `⌈n/3⌉` ranks,
/// `M` the next `⌈n/3⌉` capped so that `H` keeps at least one element.
pub fn tercile_split(values: &[f64]) -> Result<Vec<Level>> {
    let n = values.len();
    if n < 3 {
        return Err(Error::invalid(format!("tercile split needs at least 3 values, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let third = n.div_ceil(3);
    let low = third;
    let mid = third.min(n - low - 1);
    let mut out = vec![Level::H; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < low {
            out[i] = Level::L;
        } else if rank < low + mid {
            out[i] = Level::M;
        }
    }
    Ok(out)
}

/// Coordinate-wise maximum of feature vectors.
pub fn max_pool(features: &[FeatureVector]) -> Result<FeatureVector> {
    let (first, rest) = features
        .split_first()
        .ok_or_else(|| Error::invalid("cannot pool an empty level"))?;
    let mut acc = first.clone();
    for f in rest {
        acc.max_assign(f)?;
    }
    Ok(acc)
}

pub fn pooled_level(patches: &[ImageTensor], extractor: &dyn Extractor) -> Result<FeatureVector> {
    let features = patches
        .par_iter()
        .map(|p| extractor.extract(p))
        .collect::<Result<Vec<_>>>()?;
    max_pool(&features)
}

/// Scored samples and pooled vectors for one scale.
#[derive(Debug, Clone)]
pub struct ScaleResult {
    pub samples: Vec<PatchSample>,
    pub levels: Vec<Level>,
    pub pooled: [FeatureVector; 3],
}

pub fn pool_scale(
    img: &ImageTensor,
    map: &DomainnessMap,
    extractor: &dyn Extractor,
    scale: usize,
    n: usize,
    seed: u64,
) -> Result<ScaleResult> {
    check_dim(img.height(), map.height())?;
    check_dim(img.width(), map.width())?;
    let positions = sample_patches(img.height(), img.width(), scale, n, seed)?;
    let samples = positions
        .iter()
        .map(|&pos| {
            Ok(PatchSample {
                scale,
                pos,
                domainness: patch_domainness(map, pos, scale)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = samples.iter().map(|s| s.domainness).collect();
    let levels = tercile_split(&scores)?;
    let features = positions
        .par_iter()
        .map(|&(r, c)| extractor.extract(&img.crop(r, c, scale, scale)?))
        .collect::<Result<Vec<_>>>()?;
    let pooled = Level::ALL.map(|lvl| {
        let members: Vec<FeatureVector> = features
            .iter()
            .zip(&levels)
            .filter(|(_, l)| **l == lvl)
            .map(|(f, _)| f.clone())
            .collect();
        max_pool(&members)
    });
    let [l, m, h] = pooled;
    Ok(ScaleResult {
        samples,
        levels,
        pooled: [l?, m?, h?],
    })
}

/// L, M and H descriptors, each `3 × dim` long (scales 32, 64, 128 in order).
pub fn build_level_descriptors(
    img: &ImageTensor,
    map: &DomainnessMap,
    extractor: &dyn Extractor,
    seeds: [u64; 3],
) -> Result<[LevelDescriptor; 3]> {
    let per_scale = SCALES
        .iter()
        .zip(seeds)
        .map(|(&scale, seed)| pool_scale(img, map, extractor, scale, PATCHES_PER_SCALE, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Level::ALL.map(|lvl| LevelDescriptor {
        level: lvl,
        values: FeatureVector::concat(per_scale.iter().map(|s| &s.pooled[lvl.index()])),
    }))
}
