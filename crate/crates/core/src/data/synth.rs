//! Synthetic vessel-like images with per-image background noise.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageSample, Pixel};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Background noise model of a synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseProfile {
    Clean,
    Speckle,
    ArtifactBands,
    /// A different profile drawn independently for each image.
    Mixed,
}

impl std::str::FromStr for NoiseProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "speckle" => Ok(Self::Speckle),
            "artifact_bands" => Ok(Self::ArtifactBands),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Config(format!("unknown noise profile `{other}`"))),
        }
    }
}

const MIN_FOREGROUND: f64 = 0.01;
const MAX_FOREGROUND: f64 = 0.30;
const MAX_ATTEMPTS: usize = 200;

/// Generates `n_images` samples with random smooth curves, their masks and
/// centerlines, corrupted by `noise`. Output depends only on the arguments.
pub fn generate_synthetic(
    seed: u64,
    n_images: usize,
    size: (usize, usize),
    noise: NoiseProfile,
) -> Result<Vec<ImageSample>> {
    let (h, w) = size;
    if h < 32 || w < 32 {
        return Err(Error::Config(format!("synthetic images must be at least 32x32, got {h}x{w}")));
    }
    (0..n_images)
        .map(|idx| generate_one(seed, idx, size, noise))
        .collect()
}

fn generate_one(seed: u64, idx: usize, size: (usize, usize), noise: NoiseProfile) -> Result<ImageSample> {
    let image_seed = derive_seed(seed, &format!("synth/{idx}"));
    let mut structure_rng = ChaCha8Rng::seed_from_u64(derive_seed(image_seed, "structure"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(image_seed, "noise"));
    let profile = match noise {
        NoiseProfile::Mixed => {
            let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(image_seed, "profile"));
            [NoiseProfile::Clean, NoiseProfile::Speckle, NoiseProfile::ArtifactBands][pick.gen_range(0..3)]
        }
        p => p,
    };

    let (h, w) = size;
    for _ in 0..MAX_ATTEMPTS {
        let vessels = draw_vessels(&mut structure_rng, size);
        let fg = vessels.mask.iter().filter(|&&m| m == 1).count() as f64 / (h * w) as f64;
        if fg <= MIN_FOREGROUND || fg >= MAX_FOREGROUND {
            continue;
        }
        let mut pixels = background(&mut structure_rng, size);
        pixels += &vessels.intensity;
        apply_noise(&mut noise_rng, &mut pixels, profile);
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        return Ok(ImageSample::new(format!("synth_{seed}_{idx:03}"), pixels)
            .with_mask(vessels.mask)
            .with_centerline(vessels.centerline));
    }
    Err(Error::InvalidData(format!(
        "could not draw a vessel layout with foreground fraction in ({MIN_FOREGROUND}, {MAX_FOREGROUND})"
    )))
}

struct Vessels {
    mask: Array2<u8>,
    intensity: Array2<f32>,
    centerline: Vec<Pixel>,
}

fn draw_vessels(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> Vessels {
    let mut mask = Array2::<u8>::zeros((h, w));
    let mut intensity = Array2::<f32>::zeros((h, w));
    let mut centerline = Vec::new();
    let n_curves = rng.gen_range(2..=4);
    for _ in 0..n_curves {
        let path = random_curve(rng, (h, w));
        let radius: f64 = [0.5, 1.0, 1.5][rng.gen_range(0..3)];
        let contrast: f32 = rng.gen_range(0.3..0.55);
        let reach = radius + 1.0;
        let span = reach.ceil() as isize;
        for &(pr, pc) in &path {
            for dr in -span..=span {
                for dc in -span..=span {
                    let (r, c) = (pr as isize + dr, pc as isize + dc);
                    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                        continue;
                    }
                    let d = ((dr * dr + dc * dc) as f64).sqrt();
                    let (r, c) = (r as usize, c as usize);
                    let v = if d <= radius + 1e-9 {
                        mask[[r, c]] = 1;
                        contrast
                    } else if d <= reach {
                        0.3 * contrast
                    } else {
                        continue;
                    };
                    if v > intensity[[r, c]] {
                        intensity[[r, c]] = v;
                    }
                }
            }
        }
        centerline.extend(path);
    }
    Vessels {
        mask,
        intensity,
        centerline,
    }
}

/// A cubic Bezier between two interior points, rasterized into an
/// 8-connected pixel path without repeated pixels.
fn random_curve(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> Vec<Pixel> {
    let margin = 2.0;
    let (hf, wf) = (h as f64, w as f64);
    let min_len = 0.5 * hf.min(wf);
    let (p0, p3) = loop {
        let a = (rng.gen_range(margin..hf - margin), rng.gen_range(margin..wf - margin));
        let b = (rng.gen_range(margin..hf - margin), rng.gen_range(margin..wf - margin));
        if ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= min_len {
            break (a, b);
        }
    };
    let (dr, dc) = (p3.0 - p0.0, p3.1 - p0.1);
    let len = (dr * dr + dc * dc).sqrt();
    let (nr, nc) = (-dc / len, dr / len);
    let bend = 0.25 * len;
    let u1 = rng.gen_range(-bend..bend);
    let u2 = rng.gen_range(-bend..bend);
    let clamp = |p: (f64, f64)| (p.0.clamp(margin, hf - margin), p.1.clamp(margin, wf - margin));
    let p1 = clamp((p0.0 + dr / 3.0 + nr * u1, p0.1 + dc / 3.0 + nc * u1));
    let p2 = clamp((p0.0 + 2.0 * dr / 3.0 + nr * u2, p0.1 + 2.0 * dc / 3.0 + nc * u2));

    let steps = (4.0 * len).ceil() as usize * 2;
    let mut path: Vec<Pixel> = Vec::new();
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let s = 1.0 - t;
        let b = |a: f64, b: f64, c: f64, d: f64| s * s * s * a + 3.0 * s * s * t * b + 3.0 * s * t * t * c + t * t * t * d;
        let r = b(p0.0, p1.0, p2.0, p3.0).round() as usize;
        let c = b(p0.1, p1.1, p2.1, p3.1).round() as usize;
        let p = (r.min(h - 1), c.min(w - 1));
        match path.last() {
            Some(&last) if last == p => {}
            Some(&last) => {
                for q in bridge(last, p) {
                    push_unique(&mut path, q);
                }
            }
            None => path.push(p),
        }
    }
    path
}

fn push_unique(path: &mut Vec<Pixel>, p: Pixel) {
    // Drop tiny loops where the rounded curve revisits a recent pixel.
    if let Some(pos) = path.iter().rev().take(3).position(|&q| q == p) {
        let keep = path.len() - pos;
        path.truncate(keep);
        return;
    }
    path.push(p);
}

/// Points strictly after `a` up to and including `b`, 8-connected.
fn bridge(a: Pixel, b: Pixel) -> Vec<Pixel> {
    let (mut r, mut c) = (a.0 as isize, a.1 as isize);
    let (br, bc) = (b.0 as isize, b.1 as isize);
    let mut out = Vec::new();
    while (r, c) != (br, bc) {
        r += (br - r).signum();
        c += (bc - c).signum();
        out.push((r as usize, c as usize));
    }
    out
}

fn background(rng: &mut ChaCha8Rng, (h, w): (usize, usize)) -> Array2<f32> {
    let base: f32 = rng.gen_range(0.15..0.3);
    let amp: f32 = rng.gen_range(0.0..0.1);
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (sa, ca) = angle.sin_cos();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let u = (r as f32 / h as f32 - 0.5) * sa + (c as f32 / w as f32 - 0.5) * ca;
        base + amp * u
    })
}

fn apply_noise(rng: &mut ChaCha8Rng, pixels: &mut Array2<f32>, profile: NoiseProfile) {
    let gauss = |sd: f32| Normal::new(0.0f32, sd).expect("finite sd");
    match profile {
        NoiseProfile::Clean | NoiseProfile::Mixed => {
            let n = gauss(0.02);
            pixels.mapv_inplace(|v| v + n.sample(rng));
        }
        NoiseProfile::Speckle => {
            let mult = gauss(0.2);
            let add = gauss(0.03);
            pixels.mapv_inplace(|v| v * (1.0 + mult.sample(rng)) + add.sample(rng));
        }
        NoiseProfile::ArtifactBands => {
            let (h, w) = pixels.dim();
            let n_bands = rng.gen_range(2..=4);
            let mut bands = Array2::<f32>::zeros((h, w));
            for _ in 0..n_bands {
                let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
                let (sa, ca) = angle.sin_cos();
                let offset: f32 = rng.gen_range(0.0..(h.max(w) as f32));
                let half_width: f32 = rng.gen_range(4.0..8.0);
                let amp: f32 = rng.gen_range(0.1..0.25);
                let (cr, cc) = (h as f32 / 2.0, w as f32 / 2.0);
                for ((r, c), b) in bands.indexed_iter_mut() {
                    let d = ((r as f32 - cr) * sa - (c as f32 - cc) * ca + cr.max(cc) - offset).abs();
                    let v = amp * (-(d / half_width).powi(2)).exp();
                    if v > *b {
                        *b = v;
                    }
                }
            }
            let period: f32 = rng.gen_range(5.0..12.0);
            let n = gauss(0.02);
            for ((r, _), p) in pixels.indexed_iter_mut() {
                let stripe = 0.04 * (std::f32::consts::TAU * r as f32 / period).sin();
                *p += stripe + n.sample(rng);
            }
            *pixels += &bands;
        }
    }
}
