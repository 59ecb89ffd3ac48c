//! Mean domainness inside and outside object masks over a central crop.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::image::SegMask;
use crate::types::DomainnessMap;

pub const DEFAULT_CROP: usize = 227;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean_in: f64,
    pub mean_out: f64,
    pub n_in: usize,
    pub n_out: usize,
}

/// Top-left corner of the centred `crop`×`crop` window (floor centring).
pub fn crop_origin(height: usize, width: usize, crop: usize) -> (usize, usize) {
    ((height - crop) / 2, (width - crop) / 2)
}

pub fn fg_bg_stats(map: &DomainnessMap, mask: &SegMask, crop: usize) -> Result<RegionStats> {
    check_dim(map.height(), mask.height())?;
    check_dim(map.width(), mask.width())?;
    if crop == 0 || crop > map.height().min(map.width()) {
        return Err(Error::invalid(format!(
            "crop {crop} does not fit a {}x{} map",
            map.height(),
            map.width()
        )));
    }
    let (r0, c0) = crop_origin(map.height(), map.width(), crop);
    let (mut sum_in, mut sum_out) = (0.0f64, 0.0f64);
    let (mut n_in, mut n_out) = (0usize, 0usize);
    for r in r0..r0 + crop {
        for c in c0..c0 + crop {
            let v = map.get(r, c) as f64;
            if mask.is_foreground(r, c) {
                sum_in += v;
                n_in += 1;
            } else {
                sum_out += v;
                n_out += 1;
            }
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::invalid("empty region"));
    }
    Ok(RegionStats {
        mean_in: sum_in / n_in as f64,
        mean_out: sum_out / n_out as f64,
        n_in,
        n_out,
    })
}

/// Unweighted means of per-image `(mean_in, mean_out)` pairs.
pub fn aggregate_stats(per_image: &[(f64, f64)]) -> Result<(f64, f64)> {
    if per_image.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty list"));
    }
    let n = per_image.len() as f64;
    let (a, b) = per_image.iter().fold((0.0, 0.0), |(a, b), (i, o)| (a + i, b + o));
    Ok((a / n, b / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_map() {
        let map = DomainnessMap::constant(10, 10, 0.3);
        let mask = SegMask::from_fn(10, 10, |r, c| r < 5 && c < 4);
        let s = fg_bg_stats(&map, &mask, 10).unwrap();
        assert!((s.mean_in - 0.3).abs() < 1e-7 && (s.mean_out - 0.3).abs() < 1e-7);
        assert_eq!(s.n_in + s.n_out, 100);
    }

    #[test]
    fn map_equal_to_mask() {
        let mask = SegMask::from_fn(8, 8, |r, c| r + c < 6);
        let map = DomainnessMap::from_fn(8, 8, |r, c| mask.is_foreground(r, c) as u8 as f32);
        let s = fg_bg_stats(&map, &mask, 8).unwrap();
        assert_eq!((s.mean_in, s.mean_out), (1.0, 0.0));
    }

    #[test]
    fn hand_computed_window() {
        // 4×4 map, crop 2 → window rows 1..3, cols 1..3:
        //   (1,1)=0.5 fg   (1,2)=0.25 bg
        //   (2,1)=1.0 fg   (2,2)=0.0  bg
        // mean_in = (0.5 + 1.0)/2 = 0.75, mean_out = (0.25 + 0)/2 = 0.125
        let mut map = DomainnessMap::constant(4, 4, 0.9);
        map.set(1, 1, 0.5);
        map.set(1, 2, 0.25);
        map.set(2, 1, 1.0);
        map.set(2, 2, 0.0);
        let mask = SegMask::from_fn(4, 4, |_, c| c <= 1);
        let s = fg_bg_stats(&map, &mask, 2).unwrap();
        assert_eq!((s.mean_in, s.mean_out, s.n_in, s.n_out), (0.75, 0.125, 2, 2));
    }

    #[test]
    fn odd_remainder_uses_floor() {
        assert_eq!(crop_origin(256, 256, 227), (14, 14));
        assert_eq!(crop_origin(5, 6, 2), (1, 2));
    }

    #[test]
    fn single_region_window_is_an_error() {
        let map = DomainnessMap::constant(6, 6, 0.1);
        let mask = SegMask::from_fn(6, 6, |r, _| r == 0);
        let err = fg_bg_stats(&map, &mask, 2).unwrap_err();
        assert!(err.to_string().contains("empty region"));
        assert!(fg_bg_stats(&map, &mask, 7).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_stats(&[(0.4, 0.2)]).unwrap(), (0.4, 0.2));
        let (a, b) = aggregate_stats(&[(0.4, 0.2), (0.6, 0.4)]).unwrap();
        assert!((a - 0.5).abs() < 1e-12 && (b - 0.3).abs() < 1e-12);
        assert!(aggregate_stats(&[]).is_err());
    }

    proptest! {
        #[test]
        fn polarity_swap_and_outside_invariance(seed in any::<u64>(), crop in 2usize..10) {
            let mut s = seed | 1;
            let mut next = move || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; s };
            let map = DomainnessMap::from_fn(10, 10, |_, _| (next() % 1000) as f32 / 999.0);
            let mask = SegMask::from_fn(10, 10, |r, c| (r * 10 + c) % 3 == 0);
            let a = fg_bg_stats(&map, &mask, crop).unwrap();
            prop_assert!((0.0..=1.0).contains(&a.mean_in) && (0.0..=1.0).contains(&a.mean_out));
            prop_assert_eq!(a.n_in + a.n_out, crop * crop);

            let b = fg_bg_stats(&map, &mask.inverted(), crop).unwrap();
            prop_assert_eq!((a.mean_in, a.mean_out), (b.mean_out, b.mean_in));

            let (r0, c0) = crop_origin(10, 10, crop);
            let mut edited = map.clone();
            for r in 0..10 {
                for c in 0..10 {
                    if r < r0 || r >= r0 + crop || c < c0 || c >= c0 + crop {
                        edited.set(r, c, 1.0 - map.get(r, c));
                    }
                }
            }
            prop_assert_eq!(fg_bg_stats(&edited, &mask, crop).unwrap(), a);
        }
    }
}
