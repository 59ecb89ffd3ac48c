//! Synthetic two-domain shape datasets with exact segmentation masks.
//!
//! Domain `P` shows shapes on a near-white horizontal gradient. Domain `Q`
//! changes the background to grey value noise, the foreground (hue rotation
//! plus pixel noise), or both. Image `i` of either domain shares its class,
//! placement, size and base colour, so only the configured shift differs.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_image, save_mask, ImageTensor, SegMask, CANONICAL_SIDE};
use crate::levels::mix_seed;
use crate::manifest::{DatasetManifest, ManifestEntry};

pub const DOMAIN_P: &str = "P";
pub const DOMAIN_Q: &str = "Q";

pub const SHAPES: [&str; 5] = ["disk", "square", "triangle", "cross", "ring"];

const PALETTE: [[f32; 3]; 5] = [
    [0.02, 0.02, 0.03],
    [0.06, 0.05, 0.05],
    [0.10, 0.11, 0.10],
    [0.14, 0.13, 0.15],
    [0.18, 0.18, 0.17],
];

const HUE_SHIFT: f32 = 0.3;
const FG_NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    Background,
    Foreground,
    #[default]
    Both,
}

impl Shift {
    fn background(self) -> bool {
        matches!(self, Shift::Background | Shift::Both)
    }

    fn foreground(self) -> bool {
        matches!(self, Shift::Foreground | Shift::Both)
    }
}

impl FromStr for Shift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background" => Ok(Shift::Background),
            "foreground" => Ok(Shift::Foreground),
            "both" => Ok(Shift::Both),
            other => Err(Error::invalid(format!("unknown shift `{other}` (background|foreground|both)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_domain: usize,
    pub shift: Shift,
    pub seed: u64,
    pub side: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            per_domain: 100,
            shift: Shift::Both,
            seed: 7,
            side: CANONICAL_SIDE,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > SHAPES.len() {
            return Err(Error::invalid(format!("classes must lie in 2..={}", SHAPES.len())));
        }
        if self.per_domain < 10 {
            return Err(Error::invalid("per_domain must be at least 10"));
        }
        if self.side < 64 {
            return Err(Error::invalid("side must be at least 64"));
        }
        Ok(())
    }
}

/// Geometry and colour shared by image `i` of both domains.
#[derive(Debug, Clone, Copy)]
struct ShapeSpec {
    class: usize,
    center: (f32, f32),
    size: f32,
    color: [f32; 3],
}

impl ShapeSpec {
    fn draw(cfg: &SynthConfig, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ mix_seed(index as u64)));
        let side = cfg.side as f32;
        let scale = side / CANONICAL_SIDE as f32;
        let class = index % cfg.classes;
        let center = (
            rng.random_range(side / 3.0..=2.0 * side / 3.0),
            rng.random_range(side / 3.0..=2.0 * side / 3.0),
        );
        let size = rng.random_range(60.0..=100.0) * scale;
        let jitter: f32 = rng.random_range(-0.05..=0.05);
        let color = PALETTE[class].map(|v| (v + jitter).clamp(0.0, 1.0));
        Self {
            class,
            center,
            size,
            color,
        }
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        let dy = r as f32 + 0.5 - self.center.0;
        let dx = c as f32 + 0.5 - self.center.1;
        let half = self.size / 2.0;
        match SHAPES[self.class] {
            "disk" => dx * dx + dy * dy <= half * half,
            "square" => dx.abs() <= 0.8 * half && dy.abs() <= 0.8 * half,
            "triangle" => dy >= -half && dy <= half && dx.abs() <= (dy + half) / 2.0,
            "cross" => {
                let arm = self.size / 6.0;
                (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
            }
            _ => {
                let d2 = dx * dx + dy * dy;
                d2 <= half * half && d2 >= (0.55 * half) * (0.55 * half)
            }
        }
    }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on a lattice of the given spacing.
fn value_noise_octave(side: usize, spacing: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let cells = side / spacing + 2;
    let lattice: Vec<f32> = (0..cells * cells).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        let fy = r as f32 / spacing as f32;
        let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for c in 0..side {
            let fx = c as f32 / spacing as f32;
            let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |y: usize, x: usize| lattice[y * cells + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Two octaves of value noise mapped into `[0.2, 0.6]`.
fn noise_background(side: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let coarse_spacing = (side / 8).max(2);
    let coarse = value_noise_octave(side, coarse_spacing, rng);
    let fine = value_noise_octave(side, (coarse_spacing / 2).max(1), rng);
    coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| 0.2 + 0.4 * ((a + 0.5 * b) / 1.5))
        .collect()
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Rotates hue by `turns` of the colour wheel.
pub fn rotate_hue(rgb: [f32; 3], turns: f32) -> [f32; 3] {
    let [h, s, v] = rgb_to_hsv(rgb);
    hsv_to_rgb([h + turns, s, v])
}

/// One rendered sample: image, mask and class name.
pub struct Sample {
    pub image: ImageTensor,
    pub mask: SegMask,
    pub class: &'static str,
}

/// Renders image `index` of `domain` (`P` or `Q`).
pub fn render(cfg: &SynthConfig, domain: &str, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let shifted = match domain {
        DOMAIN_P => false,
        DOMAIN_Q => true,
        other => return Err(Error::invalid(format!("synthetic domains are P and Q, got `{other}`"))),
    };
    let shape = ShapeSpec::draw(cfg, index);
    let side = cfg.side;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed ^ 0x5159) ^ index as u64));

    let background: Vec<f32> = if shifted && cfg.shift.background() {
        noise_background(side, &mut rng)
    } else {
        (0..side * side)
            .map(|i| 0.85 + 0.10 * (i % side) as f32 / (side - 1) as f32)
            .collect()
    };
    let modify_fg = shifted && cfg.shift.foreground();
    let fg_color = if modify_fg {
        rotate_hue(shape.color, HUE_SHIFT)
    } else {
        shape.color
    };
    let noise = Normal::new(0.0, FG_NOISE_SIGMA).expect("valid sigma");

    let mask = SegMask::from_fn(side, side, |r, c| shape.contains(r, c));
    let image = ImageTensor::from_fn(side, side, |r, c| {
        if mask.is_foreground(r, c) {
            if modify_fg {
                fg_color.map(|v| v + noise.sample(&mut rng) as f32)
            } else {
                fg_color
            }
        } else {
            [background[r * side + c]; 3]
        }
    });
    Ok(Sample {
        image,
        mask,
        class: SHAPES[shape.class],
    })
}

/// Writes `images/NNNN.png`, `masks/NNNN.png`, `manifest.json` (both domains)
/// and `P.json` / `Q.json` (one domain each) under `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs: Vec<(&str, usize)> = [DOMAIN_P, DOMAIN_Q]
        .iter()
        .flat_map(|&d| (0..cfg.per_domain).map(move |i| (d, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .enumerate()
        .map(|(n, &(domain, i))| {
            let sample = render(cfg, domain, i)?;
            let image = format!("images/{n:04}.png");
            let mask = format!("masks/{n:04}.png");
            save_image(&sample.image, out.join(&image))?;
            save_mask(&sample.mask, out.join(&mask))?;
            Ok(ManifestEntry {
                path: image,
                domain: domain.to_string(),
                class: Some(sample.class.to_string()),
                mask: Some(mask),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: ".".into(),
        entries,
    };
    manifest.save(out.join("manifest.json"))?;
    for d in [DOMAIN_P, DOMAIN_Q] {
        manifest.filter_domain(d).save(out.join(format!("{d}.json")))?;
    }
    Ok(manifest)
}
