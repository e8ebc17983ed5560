use ndarray::Array2;

use super::Pixel;
use crate::error::{Error, Result};

/// Default Gaussian width of a centerline heatmap, in pixels.
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Beyond this many sigmas a Gaussian contributes less than `exp(-50)`.
const SUPPORT_SIGMAS: f64 = 10.0;

/// Dense `[0, 1]` target built from centerline points.
#[derive(Debug, Clone)]
pub struct HeatmapTarget {
    pub values: Array2<f64>,
    pub sigma: f64,
}

/// Renders a Gaussian bump of width `sigma` at every centerline point and
/// combines overlapping bumps by pointwise maximum, so every annotated point
/// has value exactly `1.0`.
pub fn build_heatmap(points: &[Pixel], shape: (usize, usize), sigma: f64) -> Result<HeatmapTarget> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let (h, w) = shape;
    if let Some(p) = points.iter().find(|&&(r, c)| r >= h || c >= w) {
        return Err(Error::InvalidData(format!("centerline point {p:?} outside {h}x{w}")));
    }
    let mut values = Array2::<f64>::zeros(shape);
    let radius = (SUPPORT_SIGMAS * sigma).ceil() as usize;
    let denom = 2.0 * sigma * sigma;
    for &(pr, pc) in points {
        let r0 = pr.saturating_sub(radius);
        let r1 = (pr + radius + 1).min(h);
        let c0 = pc.saturating_sub(radius);
        let c1 = (pc + radius + 1).min(w);
        for r in r0..r1 {
            let dr = r as f64 - pr as f64;
            for c in c0..c1 {
                let dc = c as f64 - pc as f64;
                let v = (-(dr * dr + dc * dc) / denom).exp();
                let cell = &mut values[[r, c]];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Ok(HeatmapTarget { values, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn single_point_kernel() {
        let hm = build_heatmap(&[(5, 5)], (11, 11), 1.0).unwrap();
        assert_eq!(hm.values[[5, 5]], 1.0);
        assert_abs_diff_eq!(hm.values[[5, 6]], (-0.5f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(hm.values[[5, 6]], 0.6065, epsilon = 1e-4);
    }

    #[test]
    fn empty_centerline_is_zero() {
        let hm = build_heatmap(&[], (8, 9), 2.0).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distant_points_do_not_interfere() {
        let sigma = 2.0;
        let pts = [(20, 5), (20, 25)];
        let hm = build_heatmap(&pts, (40, 40), sigma).unwrap();
        for &(r, c) in &pts {
            assert_abs_diff_eq!(hm.values[[r, c]], 1.0, epsilon = 1e-9);
        }
        // Direct evaluation of the max-of-Gaussians formula at an arbitrary pixel.
        let (r, c) = (22.0f64, 9.0f64);
        let expected = pts
            .iter()
            .map(|&(pr, pc)| {
                let d2 = (r - pr as f64).powi(2) + (c - pc as f64).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(hm.values[[22, 9]], expected, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_sigma_and_points() {
        assert!(build_heatmap(&[(1, 1)], (4, 4), 0.0).is_err());
        assert!(build_heatmap(&[(4, 1)], (4, 4), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn rotation_symmetry_about_single_point(sigma in 0.3f64..5.0, dr in 0usize..8, dc in 0usize..8) {
            let center = (10usize, 10usize);
            let hm = build_heatmap(&[center], (21, 21), sigma).unwrap();
            let (dr, dc) = (dr as isize, dc as isize);
            let at = |r: isize, c: isize| hm.values[[(10 + r) as usize, (10 + c) as usize]];
            let v = at(dr, dc);
            prop_assert_eq!(v, at(-dc, dr));
            prop_assert_eq!(v, at(-dr, -dc));
            prop_assert_eq!(v, at(dc, -dr));
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn values_decrease_with_distance(sigma in 0.5f64..4.0) {
            let hm = build_heatmap(&[(10, 10)], (21, 21), sigma).unwrap();
            for k in 0..10 {
                prop_assert!(hm.values[[10, 10 + k]] >= hm.values[[10, 11 + k]]);
            }
        }
    }
}
