use super::HyperCube;
use crate::error::{Error, Result};

/// Drops `head` leading and `tail` trailing channels.
pub fn trim_channels(cube: &HyperCube, head: usize, tail: usize) -> Result<HyperCube> {
    let c = cube.channels();
    if head + tail >= c {
        return Err(Error::arg(format!(
            "cannot trim {head}+{tail} channels from a {c}-channel cube"
        )));
    }
    let n = cube.pixels();
    let data = cube.data()[head * n..(c - tail) * n].to_vec();
    let centers = cube.band_centers().map(|bc| bc[head..c - tail].to_vec());
    HyperCube::from_parts(
        cube.height(),
        cube.width(),
        c - head - tail,
        data,
        centers,
        cube.mask().map(<[bool]>::to_vec),
    )
}

/// Replaces each run of `factor` consecutive channels with their mean.
///
/// Band centers are averaged the same way.
pub fn average_reduce_channels(cube: &HyperCube, factor: usize) -> Result<HyperCube> {
    let c = cube.channels();
    if factor == 0 || !c.is_multiple_of(factor) {
        return Err(Error::arg(format!(
            "reduction factor {factor} does not divide {c} channels"
        )));
    }
    let n = cube.pixels();
    let out_c = c / factor;
    let mut data = vec![0f32; out_c * n];
    let mut acc = vec![0f64; n];
    for j in 0..out_c {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for ch in j * factor..(j + 1) * factor {
            for (a, &v) in acc.iter_mut().zip(cube.band(ch)) {
                *a += f64::from(v);
            }
        }
        for (dst, a) in data[j * n..(j + 1) * n].iter_mut().zip(&acc) {
            *dst = (*a / factor as f64) as f32;
        }
    }
    let centers = cube.band_centers().map(|bc| {
        bc.chunks_exact(factor)
            .map(|g| g.iter().sum::<f64>() / factor as f64)
            .collect()
    });
    HyperCube::from_parts(
        cube.height(),
        cube.width(),
        out_c,
        data,
        centers,
        cube.mask().map(<[bool]>::to_vec),
    )
}

/// Number of full-fit windows along both axes.
pub fn crop_count(height: usize, width: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || window > height || window > width {
        return 0;
    }
    ((height - window) / stride + 1) * ((width - window) / stride + 1)
}

/// Square `window`-sized crops at offsets `0, stride, 2*stride, ...` that fit
/// entirely inside the cube, in row-major offset order.
pub fn crop_windows(cube: &HyperCube, window: usize, stride: usize) -> Result<Vec<HyperCube>> {
    let (h, w) = (cube.height(), cube.width());
    if window == 0 || stride == 0 {
        return Err(Error::arg("window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::arg(format!(
            "window {window} does not fit a {h}x{w} cube"
        )));
    }
    let offsets = |len: usize| (0..=len - window).step_by(stride).collect::<Vec<_>>();
    let (rows, cols) = (offsets(h), offsets(w));
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r0 in &rows {
        for &c0 in &cols {
            let mut data = Vec::with_capacity(window * window * cube.channels());
            for band in cube.bands() {
                for r in r0..r0 + window {
                    data.extend_from_slice(&band[r * w + c0..r * w + c0 + window]);
                }
            }
            let mask = cube.mask().map(|m| {
                (r0..r0 + window)
                    .flat_map(|r| m[r * w + c0..r * w + c0 + window].iter().copied())
                    .collect()
            });
            out.push(HyperCube::from_parts(
                window,
                window,
                cube.channels(),
                data,
                cube.band_centers().map(<[f64]>::to_vec),
                mask,
            )?);
        }
    }
    Ok(out)
}

/// Fraction of mask pixels marked foreground.
pub fn foreground_fraction(cube: &HyperCube) -> Option<f64> {
    cube.mask()
        .map(|m| m.iter().filter(|&&v| v).count() as f64 / m.len() as f64)
}

/// Keeps crops whose foreground fraction is at least `threshold`.
pub fn density_filter(crops: Vec<HyperCube>, threshold: f64) -> Result<Vec<HyperCube>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::arg(format!(
            "density threshold {threshold} outside [0, 1]"
        )));
    }
    let mut kept = Vec::with_capacity(crops.len());
    for (i, crop) in crops.into_iter().enumerate() {
        let frac = foreground_fraction(&crop)
            .ok_or_else(|| Error::arg(format!("crop {i} has no foreground mask")))?;
        if frac >= threshold {
            kept.push(crop);
        }
    }
    Ok(kept)
}

/// Rescales the whole cube linearly to `[0, 1]`. A constant cube maps to zeros.
pub fn minmax_normalize(cube: &HyperCube) -> Result<HyperCube> {
    let (lo, hi) = cube
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let data = cube
        .data()
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    HyperCube::from_parts(
        cube.height(),
        cube.width(),
        cube.channels(),
        data,
        cube.band_centers().map(<[f64]>::to_vec),
        cube.mask().map(<[bool]>::to_vec),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> HyperCube {
        HyperCube::from_fn(h, w, c, |r, col, ch| (ch * 1000 + r * w + col) as f32).unwrap()
    }

    #[test]
    fn trim_224_to_204() {
        let cube = HyperCube::zeros(1, 1, 224).unwrap();
        assert_eq!(trim_channels(&cube, 10, 10).unwrap().channels(), 204);
    }

    #[test]
    fn trim_identity_and_shift() {
        let centers: Vec<f64> = (0..6).map(|i| 900.0 + i as f64).collect();
        let cube = ramp(2, 2, 6).with_band_centers(centers).unwrap();
        assert_eq!(trim_channels(&cube, 0, 0).unwrap(), cube);
        let t = trim_channels(&cube, 2, 1).unwrap();
        assert_eq!(t.channels(), 3);
        assert_eq!(t.band(0), cube.band(2));
        assert_eq!(t.band_centers().unwrap(), &[902.0, 903.0, 904.0]);
    }

    #[test]
    fn trim_rejects_overlap() {
        let cube = HyperCube::zeros(1, 1, 5).unwrap();
        assert!(trim_channels(&cube, 3, 3).is_err());
        assert!(trim_channels(&cube, 2, 3).is_err());
    }

    #[test]
    fn reduce_204_to_102() {
        let cube = HyperCube::zeros(1, 1, 204).unwrap();
        assert_eq!(average_reduce_channels(&cube, 2).unwrap().channels(), 102);
    }

    #[test]
    fn reduce_by_hand() {
        let cube = HyperCube::new(1, 1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(average_reduce_channels(&cube, 2).unwrap().data(), &[2.0]);
        let cube = ramp(2, 3, 4);
        assert_eq!(average_reduce_channels(&cube, 1).unwrap(), cube);
        assert!(average_reduce_channels(&cube, 3).is_err());
        assert!(average_reduce_channels(&cube, 0).is_err());
    }

    #[test]
    fn crop_counts() {
        let cube = HyperCube::zeros(640, 640, 1).unwrap();
        assert_eq!(crop_windows(&cube, 128, 64).unwrap().len(), 81);
        let cube = HyperCube::zeros(128, 128, 1).unwrap();
        assert_eq!(crop_windows(&cube, 128, 64).unwrap().len(), 1);
        let cube = HyperCube::zeros(100, 100, 1).unwrap();
        assert!(crop_windows(&cube, 128, 64).is_err());
    }

    #[test]
    fn crop_content_and_mask() {
        let mask: Vec<bool> = (0..16).map(|i| i % 4 == 3).collect();
        let cube = ramp(4, 4, 2).with_mask(mask).unwrap();
        let crops = crop_windows(&cube, 2, 2).unwrap();
        assert_eq!(crops.len(), 4);
        // second crop in row-major order starts at (0, 2)
        assert_eq!(crops[1].get(0, 0, 1), cube.get(0, 2, 1));
        assert_eq!(crops[1].get(1, 1, 0), cube.get(1, 3, 0));
        assert_eq!(crops[1].mask().unwrap(), &[false, true, false, true]);
        assert_eq!(crops[0].mask().unwrap(), &[false; 4]);
    }

    fn masked(fg: usize, total: usize) -> HyperCube {
        let mask = (0..total).map(|i| i < fg).collect();
        HyperCube::zeros(1, total, 1)
            .unwrap()
            .with_mask(mask)
            .unwrap()
    }

    #[test]
    fn density_rules() {
        let kept = density_filter(vec![masked(6, 10)], 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert!(density_filter(vec![masked(0, 10)], 0.5).unwrap().is_empty());
        assert_eq!(
            density_filter(vec![masked(0, 10), masked(3, 10)], 0.0)
                .unwrap()
                .len(),
            2
        );
        let no_mask = HyperCube::zeros(1, 1, 1).unwrap();
        assert!(density_filter(vec![no_mask], 0.5).is_err());
        assert!(density_filter(vec![], 1.5).is_err());
    }

    #[test]
    fn minmax_scales_to_unit_range() {
        let c = HyperCube::new(1, 2, 1, vec![2.0, 6.0]).unwrap();
        assert_eq!(minmax_normalize(&c).unwrap().data(), &[0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn trim_composes(c in 3usize..20, a in 0usize..4, b in 0usize..4, d in 0usize..4, e in 0usize..4) {
            prop_assume!(a + b + d + e < c);
            let cube = ramp(2, 2, c);
            let twice = trim_channels(&trim_channels(&cube, a, b).unwrap(), d, e).unwrap();
            prop_assert_eq!(twice, trim_channels(&cube, a + d, b + e).unwrap());
        }

        #[test]
        fn reduce_preserves_global_mean(groups in 1usize..6, factor in 1usize..5, seed in any::<u32>()) {
            let c = groups * factor;
            let cube = HyperCube::from_fn(3, 3, c, |r, col, ch| {
                ((seed as usize).wrapping_mul(31 + r * 7 + col * 13 + ch * 17) % 997) as f32 / 97.0
            }).unwrap();
            let mean = |x: &HyperCube| x.data().iter().map(|&v| f64::from(v)).sum::<f64>() / x.data().len() as f64;
            let before = mean(&cube);
            let after = mean(&average_reduce_channels(&cube, factor).unwrap());
            prop_assert!((before - after).abs() <= 1e-6 * before.abs().max(1e-12));
        }

        #[test]
        fn crop_count_formula(h in 1usize..40, w in 1usize..40, win in 1usize..12, stride in 1usize..9) {
            prop_assume!(win <= h && win <= w);
            let cube = HyperCube::zeros(h, w, 1).unwrap();
            let n = crop_windows(&cube, win, stride).unwrap().len();
            prop_assert_eq!(n, ((h - win) / stride + 1) * ((w - win) / stride + 1));
            prop_assert_eq!(n, crop_count(h, w, win, stride));
        }

        #[test]
        fn density_output_is_subsequence(fgs in proptest::collection::vec(0usize..=8, 0..12), t in 0.0f64..=1.0) {
            let crops: Vec<_> = fgs.iter().map(|&f| masked(f, 8)).collect();
            let kept = density_filter(crops.clone(), t).unwrap();
            let mut it = crops.iter();
            for k in &kept {
                prop_assert!(it.any(|c| c == k));
            }
            let expected = fgs.iter().filter(|&&f| f as f64 / 8.0 >= t).count();
            prop_assert_eq!(kept.len(), expected);
        }
    }
}
