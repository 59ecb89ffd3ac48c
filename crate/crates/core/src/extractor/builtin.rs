//! Deterministic 224-dimensional descriptor.
//!
//! The image is split into a 4×4 grid of cells (remainder pixels go to the
//! last row/column of cells). Per cell and RGB channel the mean and population
//! standard deviation are stored (96 values), followed by an 8-bin
//! magnitude-weighted histogram of luminance gradient orientation over
//! `[0, π)` per cell, L1-normalized (128 values). Within the moment block the
//! layout is cell-major, then channel, then (mean, std).

use std::f64::consts::PI;

use super::{Extractor, ExtractorDescriptor, ExtractorKind, OcclusionProbe};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::occlusion::Occluder;
use crate::types::FeatureVector;

pub const GRID_CELLS: usize = 4;
pub const ORIENTATION_BINS: usize = 8;

const CELLS: usize = GRID_CELLS * GRID_CELLS;
const MOMENTS_PER_CELL: usize = 6;
const MOMENT_DIM: usize = CELLS * MOMENTS_PER_CELL;
pub const BUILTIN_DIM: usize = MOMENT_DIM + CELLS * ORIENTATION_BINS;

const MIN_SIDE: usize = 8;

trait Pixels: Sync {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn rgb(&self, r: usize, c: usize) -> [f32; 3];

    #[inline]
    fn luma(&self, r: usize, c: usize) -> f64 {
        let [red, green, blue] = self.rgb(r, c);
        0.299 * red as f64 + 0.587 * green as f64 + 0.114 * blue as f64
    }
}

impl Pixels for ImageTensor {
    fn height(&self) -> usize {
        ImageTensor::height(self)
    }

    fn width(&self) -> usize {
        ImageTensor::width(self)
    }

    #[inline]
    fn rgb(&self, r: usize, c: usize) -> [f32; 3] {
        ImageTensor::rgb(self, r, c)
    }
}

/// An image seen through one occluder, without materializing the copy.
struct Occluded<'a> {
    img: &'a ImageTensor,
    occ: &'a Occluder,
}

impl Pixels for Occluded<'_> {
    fn height(&self) -> usize {
        self.img.height()
    }

    fn width(&self) -> usize {
        self.img.width()
    }

    #[inline]
    fn rgb(&self, r: usize, c: usize) -> [f32; 3] {
        if self.occ.contains(r, c) {
            self.occ.fill
        } else {
            self.img.rgb(r, c)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Gradient {
    magnitude: f64,
    bin: u8,
}

#[inline]
fn derivative(at: impl Fn(usize) -> f64, i: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else if i == 0 {
        at(1) - at(0)
    } else if i == n - 1 {
        at(n - 1) - at(n - 2)
    } else {
        (at(i + 1) - at(i - 1)) / 2.0
    }
}

#[inline]
fn gradient<P: Pixels + ?Sized>(src: &P, r: usize, c: usize) -> Gradient {
    let gx = derivative(|j| src.luma(r, j), c, src.width());
    let gy = derivative(|i| src.luma(i, c), r, src.height());
    let magnitude = (gx * gx + gy * gy).sqrt();
    let mut theta = gy.atan2(gx);
    if theta < 0.0 {
        theta += PI;
    }
    if theta >= PI {
        theta -= PI;
    }
    let bin = ((theta / (PI / ORIENTATION_BINS as f64)) as usize).min(ORIENTATION_BINS - 1) as u8;
    Gradient { magnitude, bin }
}

#[inline]
fn cell_span(n: usize, i: usize) -> (usize, usize) {
    let step = n / GRID_CELLS;
    let end = if i == GRID_CELLS - 1 { n } else { (i + 1) * step };
    (i * step, end)
}

/// Writes the moment and histogram coordinates of one cell into `out`.
fn cell_features<P: Pixels + ?Sized>(
    src: &P,
    grad: impl Fn(usize, usize) -> Gradient,
    cell: usize,
    out: &mut [f32],
) {
    let (r0, r1) = cell_span(src.height(), cell / GRID_CELLS);
    let (c0, c1) = cell_span(src.width(), cell % GRID_CELLS);
    let n = ((r1 - r0) * (c1 - c0)) as f64;

    let mut sum = [0.0f64; 3];
    let mut hist = [0.0f64; ORIENTATION_BINS];
    for r in r0..r1 {
        for c in c0..c1 {
            let px = src.rgb(r, c);
            for k in 0..3 {
                sum[k] += px[k] as f64;
            }
            let g = grad(r, c);
            hist[g.bin as usize] += g.magnitude;
        }
    }
    let mean = sum.map(|s| s / n);
    let mut sq = [0.0f64; 3];
    for r in r0..r1 {
        for c in c0..c1 {
            let px = src.rgb(r, c);
            for k in 0..3 {
                let d = px[k] as f64 - mean[k];
                sq[k] += d * d;
            }
        }
    }

    let m = &mut out[cell * MOMENTS_PER_CELL..(cell + 1) * MOMENTS_PER_CELL];
    for k in 0..3 {
        m[2 * k] = mean[k] as f32;
        m[2 * k + 1] = (sq[k] / n).sqrt() as f32;
    }

    let total: f64 = hist.iter().sum();
    let h = &mut out[MOMENT_DIM + cell * ORIENTATION_BINS..MOMENT_DIM + (cell + 1) * ORIENTATION_BINS];
    for (dst, v) in h.iter_mut().zip(hist) {
        *dst = if total > 0.0 { (v / total) as f32 } else { 0.0 };
    }
}

fn check_size(img: &ImageTensor) -> Result<()> {
    if img.height() < MIN_SIDE || img.width() < MIN_SIDE {
        return Err(Error::invalid(format!(
            "built-in extractor needs at least {MIN_SIDE}x{MIN_SIDE} pixels, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

pub fn builtin_extract(img: &ImageTensor) -> Result<FeatureVector> {
    check_size(img)?;
    let mut out = vec![0.0f32; BUILTIN_DIM];
    for cell in 0..CELLS {
        cell_features(img, |r, c| gradient(img, r, c), cell, &mut out);
    }
    FeatureVector::new(out)
}

#[derive(Debug, Clone)]
pub struct BuiltinExtractor {
    descriptor: ExtractorDescriptor,
}

impl Default for BuiltinExtractor {
    fn default() -> Self {
        Self {
            descriptor: ExtractorDescriptor {
                name: "builtin-224".into(),
                dim: BUILTIN_DIM,
                kind: ExtractorKind::Builtin,
            },
        }
    }
}

impl BuiltinExtractor {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Extractor for BuiltinExtractor {
    fn descriptor(&self) -> &ExtractorDescriptor {
        &self.descriptor
    }

    fn extract(&self, img: &ImageTensor) -> Result<FeatureVector> {
        builtin_extract(img)
    }

    fn probe<'a>(&'a self, img: &'a ImageTensor) -> Result<Box<dyn OcclusionProbe + 'a>> {
        check_size(img)?;
        let (h, w) = (img.height(), img.width());
        let mut field = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                field.push(gradient(img, r, c));
            }
        }
        let mut base = vec![0.0f32; BUILTIN_DIM];
        for cell in 0..CELLS {
            cell_features(img, |r, c| field[r * w + c], cell, &mut base);
        }
        Ok(Box::new(CachedProbe {
            img,
            field,
            base: FeatureVector::new(base)?,
        }))
    }
}

/// Recomputes only the cells whose pixels or gradients the occluder touches.
/// Gradients outside the occluder's one-pixel halo come from the cached field;
/// they are the same values the full extraction would compute there.
struct CachedProbe<'a> {
    img: &'a ImageTensor,
    field: Vec<Gradient>,
    base: FeatureVector,
}

impl OcclusionProbe for CachedProbe<'_> {
    fn base(&self) -> &FeatureVector {
        &self.base
    }

    fn occluded(&self, occ: &Occluder) -> Result<FeatureVector> {
        let (h, w) = (self.img.height(), self.img.width());
        occ.check_bounds(h, w)?;
        let view = Occluded { img: self.img, occ };
        let halo_r0 = occ.row.saturating_sub(1);
        let halo_c0 = occ.col.saturating_sub(1);
        let halo_r1 = (occ.row + occ.size + 1).min(h);
        let halo_c1 = (occ.col + occ.size + 1).min(w);
        let in_halo = |r: usize, c: usize| r >= halo_r0 && r < halo_r1 && c >= halo_c0 && c < halo_c1;

        let mut out = self.base.values().to_vec();
        for cell in 0..CELLS {
            let (r0, r1) = cell_span(h, cell / GRID_CELLS);
            let (c0, c1) = cell_span(w, cell % GRID_CELLS);
            if r1 <= halo_r0 || r0 >= halo_r1 || c1 <= halo_c0 || c0 >= halo_c1 {
                continue;
            }
            cell_features(
                &view,
                |r, c| {
                    if in_halo(r, c) {
                        gradient(&view, r, c)
                    } else {
                        self.field[r * w + c]
                    }
                },
                cell,
                &mut out,
            );
        }
        FeatureVector::new(out)
    }
}
