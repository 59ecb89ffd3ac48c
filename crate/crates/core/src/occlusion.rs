//! Domainness maps by dense occlusion.
//!
//! Every grid occluder yields one discrepancy value `d = ‖u ⊙ (f − f_occ)‖₂`.
//! Each pixel averages the values of all occluders covering it, and covered
//! pixels are min-max rescaled into `[0, 1]`.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{domain_weighting, LinearModel};
use crate::error::{check_dim, Error, Result};
use crate::extractor::Extractor;
use crate::image::{save_gray, save_image, ImageTensor};
use crate::types::{DomainnessMap, FeatureVector};

pub const DEFAULT_PATCH: usize = 16;
pub const DEFAULT_STRIDE: usize = 8;
pub const DEFAULT_OVERLAY_THRESHOLD: f32 = 0.5;

/// A constant-color square pasted onto an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub fill: [f32; 3],
}

impl Occluder {
    pub fn new(row: usize, col: usize, size: usize, fill: [f32; 3]) -> Self {
        Self { row, col, size, fill }
    }

    #[inline]
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.size && c >= self.col && c < self.col + self.size
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row + self.size > height || self.col + self.size > width {
            return Err(Error::invalid(format!(
                "occluder {}x{0} at ({}, {}) exceeds {height}x{width}",
                self.size, self.row, self.col
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionGrid {
    pub patch: usize,
    pub stride: usize,
    /// Top-left corners, rows then columns.
    pub positions: Vec<(usize, usize)>,
}

pub fn make_grid(height: usize, width: usize, patch: usize, stride: usize) -> Result<OcclusionGrid> {
    if patch == 0 || patch > height.min(width) {
        return Err(Error::invalid(format!(
            "occluder size {patch} does not fit a {height}x{width} image"
        )));
    }
    if stride == 0 || stride > patch {
        return Err(Error::invalid(format!("stride {stride} must lie in 1..={patch}")));
    }
    let rows = (0..=height - patch).step_by(stride);
    let positions = rows
        .flat_map(|r| (0..=width - patch).step_by(stride).map(move |c| (r, c)))
        .collect();
    Ok(OcclusionGrid {
        patch,
        stride,
        positions,
    })
}

/// Copy of `img` with the occluder region set to its fill color.
pub fn occlude(img: &ImageTensor, occ: &Occluder) -> Result<ImageTensor> {
    occ.check_bounds(img.height(), img.width())?;
    let mut out = img.clone();
    for r in occ.row..occ.row + occ.size {
        for c in occ.col..occ.col + occ.size {
            for k in 0..img.channels() {
                let v = if img.channels() == 3 { occ.fill[k] } else { occ.fill[0] };
                out.set(r, c, k, v);
            }
        }
    }
    Ok(out)
}

/// Weighted L2 distance `‖u ⊙ (a − b)‖₂`.
pub fn discrepancy(orig: &FeatureVector, occluded: &FeatureVector, weights: &[f32]) -> Result<f64> {
    check_dim(orig.dim(), occluded.dim())?;
    check_dim(orig.dim(), weights.len())?;
    let sq: f64 = orig
        .values()
        .iter()
        .zip(occluded.values())
        .zip(weights)
        .map(|((&a, &b), &u)| {
            let d = u as f64 * (a as f64 - b as f64);
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    None,
    #[default]
    AbsW,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Weighting::None),
            "abs-w" => Ok(Weighting::AbsW),
            other => Err(Error::invalid(format!("unknown weighting `{other}` (none|abs-w)"))),
        }
    }
}

/// Occluder colour: the pair's mean colour, or explicit RGB.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Fill {
    #[default]
    Auto,
    Rgb([f32; 3]),
}

impl FromStr for Fill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Fill::Auto);
        }
        let parts: Vec<f32> = s
            .split(',')
            .map(|p| p.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad fill `{s}` (auto|r,g,b)")))?;
        match parts.as_slice() {
            &[r, g, b] if [r, g, b].iter().all(|v| (0.0..=1.0).contains(v)) => Ok(Fill::Rgb([r, g, b])),
            _ => Err(Error::invalid(format!("bad fill `{s}` (auto|r,g,b in [0,1])"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapConfig {
    pub patch: usize,
    pub stride: usize,
    pub fill: [f32; 3],
    pub weighting: Weighting,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            patch: DEFAULT_PATCH,
            stride: DEFAULT_STRIDE,
            fill: [0.5; 3],
            weighting: Weighting::AbsW,
        }
    }
}

/// Averaged discrepancies before rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub covered: Vec<bool>,
}

/// Accumulates per-occluder values into per-pixel means, reducing in grid order.
pub fn accumulate(height: usize, width: usize, grid: &OcclusionGrid, values: &[f64]) -> Result<RawMap> {
    check_dim(grid.positions.len(), values.len())?;
    let mut sum = vec![0.0f64; height * width];
    let mut count = vec![0u32; height * width];
    for (&(r0, c0), &d) in grid.positions.iter().zip(values) {
        for r in r0..r0 + grid.patch {
            let row = r * width;
            for c in c0..c0 + grid.patch {
                sum[row + c] += d;
                count[row + c] += 1;
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    Ok(RawMap {
        height,
        width,
        values,
        covered: count.iter().map(|&n| n > 0).collect(),
    })
}

/// Min-max rescale over covered pixels. Uncovered pixels score 0; a flat map
/// (max = min up to rounding) becomes all zeros.
pub fn finalize(raw: &RawMap) -> DomainnessMap {
    let covered = || raw.values.iter().zip(&raw.covered).filter(|(_, &c)| c).map(|(&v, _)| v);
    let min = covered().fold(f64::INFINITY, f64::min);
    let max = covered().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let degenerate = !(span > 16.0 * f64::EPSILON * max.abs());
    let scores = raw
        .values
        .iter()
        .zip(&raw.covered)
        .map(|(&v, &c)| {
            if !c || degenerate {
                0.0
            } else {
                (((v - min) / span) as f32).clamp(0.0, 1.0)
            }
        })
        .collect();
    DomainnessMap::new(raw.height, raw.width, scores).expect("dimensions match")
}

/// Per-occluder discrepancies in grid order; positions may be evaluated in
/// parallel, each into its own slot.
pub fn occlusion_discrepancies(
    img: &ImageTensor,
    extractor: &dyn Extractor,
    weights: &[f32],
    grid: &OcclusionGrid,
    fill: [f32; 3],
) -> Result<Vec<f64>> {
    check_dim(extractor.dim(), weights.len())?;
    let probe = extractor.probe(img)?;
    grid.positions
        .par_iter()
        .map(|&(row, col)| {
            let occ = Occluder::new(row, col, grid.patch, fill);
            let f = probe.occluded(&occ).map_err(|e| match e {
                Error::Extractor(msg) => Error::Extractor(format!("occluder at ({row}, {col}): {msg}")),
                other => other,
            })?;
            discrepancy(probe.base(), &f, weights)
        })
        .collect()
}

pub fn feature_weights(model: &LinearModel, weighting: Weighting) -> Vec<f32> {
    match weighting {
        Weighting::AbsW => domain_weighting(model),
        Weighting::None => vec![1.0; model.dim()],
    }
}

pub fn build_map(
    img: &ImageTensor,
    extractor: &dyn Extractor,
    model: &LinearModel,
    cfg: &MapConfig,
) -> Result<DomainnessMap> {
    check_dim(extractor.dim(), model.dim())?;
    let grid = make_grid(img.height(), img.width(), cfg.patch, cfg.stride)?;
    let weights = feature_weights(model, cfg.weighting);
    let d = occlusion_discrepancies(img, extractor, &weights, &grid, cfg.fill)?;
    Ok(finalize(&accumulate(img.height(), img.width(), &grid, &d)?))
}

/// Grays out pixels whose domainness is below `threshold`.
pub fn overlay(img: &ImageTensor, map: &DomainnessMap, threshold: f32) -> Result<ImageTensor> {
    check_dim(img.height() * img.width(), map.scores().len())?;
    Ok(ImageTensor::from_fn(img.height(), img.width(), |r, c| {
        let px = img.rgb(r, c);
        if map.get(r, c) >= threshold {
            px
        } else {
            let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            [0.25 + 0.5 * luma; 3]
        }
    }))
}

pub fn save_heatmap(map: &DomainnessMap, path: impl AsRef<Path>) -> Result<()> {
    save_gray(map.scores(), map.height(), map.width(), path)
}

pub fn save_overlay(img: &ImageTensor, map: &DomainnessMap, threshold: f32, path: impl AsRef<Path>) -> Result<()> {
    save_image(&overlay(img, map, threshold)?, path)
}
