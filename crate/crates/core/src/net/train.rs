//! Supervised training of a [`SegModel`] on random augmented crops.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, Adam, FeatureStack, SegModel, Tensor};
use crate::data::{dense_target, ImageSample, TargetKind};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Optimization settings. One epoch is one Adam step on a batch of
/// `crops_per_step` random crops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub crop_size: usize,
    pub crops_per_step: usize,
    /// Random flips and quarter-turn rotations.
    pub augment: bool,
    pub seed: u64,
    pub target: TargetKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 1e-3,
            crop_size: 64,
            crops_per_step: 8,
            augment: true,
            seed: 0,
            target: TargetKind::Mask,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.crop_size == 0 || self.crops_per_step == 0 {
            return Err(Error::Config("crop_size and crops_per_step must be positive".into()));
        }
        Ok(())
    }
}

/// One training image with a dense target in `[0, 1]` and an optional
/// per-pixel weight; pixels with zero weight contribute no loss.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub pixels: Array2<f32>,
    pub target: Array2<f32>,
    pub weight: Option<Array2<f32>>,
}

impl TrainItem {
    pub fn dense(pixels: Array2<f32>, target: Array2<f32>) -> Self {
        Self {
            pixels,
            target,
            weight: None,
        }
    }

    pub fn masked(pixels: Array2<f32>, target: Array2<f32>, weight: Array2<f32>) -> Self {
        Self {
            pixels,
            target,
            weight: Some(weight),
        }
    }
}

/// Mean batch loss per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Binary cross-entropy of logit `z` against soft target `y`, computed
/// without forming `sigmoid(z)`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

struct HeadPass {
    loss_sum: f64,
    count: f64,
    /// `weight * (sigmoid(z) - y)` per pixel.
    dlogits: Vec<f64>,
}

/// Final-layer forward/backward on channel-major features `(d, n)`.
fn head_pass(features: &[f32], d: usize, target: &[f32], weight: Option<&[f32]>, w: &[f64], b: f64) -> HeadPass {
    let n = target.len();
    debug_assert_eq!(features.len(), d * n);
    let mut logits = vec![b; n];
    for (ch, &wd) in w.iter().enumerate() {
        for (z, &x) in logits.iter_mut().zip(&features[ch * n..(ch + 1) * n]) {
            *z += wd * f64::from(x);
        }
    }
    let mut loss_sum = 0.0;
    let mut count = 0.0;
    let mut dlogits = vec![0.0; n];
    for (p, &z) in logits.iter().enumerate() {
        let wt = weight.map_or(1.0, |wv| f64::from(wv[p]));
        if wt == 0.0 {
            continue;
        }
        let y = f64::from(target[p]);
        loss_sum += wt * bce_with_logit(z, y);
        count += wt;
        dlogits[p] = wt * (sigmoid(z) - y);
    }
    HeadPass {
        loss_sum,
        count,
        dlogits,
    }
}

fn channel_major(features: &FeatureStack) -> Vec<f32> {
    let (h, w, d) = features.vectors.dim();
    let n = h * w;
    let mut out = vec![0.0f32; d * n];
    for ((r, c, ch), &v) in features.vectors.indexed_iter() {
        out[ch * n + r * w + c] = v;
    }
    out
}

/// Mean pixel BCE of the final layer `(weights, bias)` applied to
/// `features`, and its gradient w.r.t. the weights and the bias.
pub fn bce_head_gradient(features: &FeatureStack, target: &Array2<f32>, weights: &[f64], bias: f64) -> (f64, Vec<f64>, f64) {
    let d = features.dim();
    let flat = channel_major(features);
    let target: Vec<f32> = target.iter().copied().collect();
    let pass = head_pass(&flat, d, &target, None, weights, bias);
    let n = target.len();
    let scale = 1.0 / pass.count;
    let grad_w = (0..d)
        .map(|ch| {
            flat[ch * n..(ch + 1) * n]
                .iter()
                .zip(&pass.dlogits)
                .map(|(&x, &g)| f64::from(x) * g)
                .sum::<f64>()
                * scale
        })
        .collect();
    let grad_b = pass.dlogits.iter().sum::<f64>() * scale;
    (pass.loss_sum * scale, grad_w, grad_b)
}

/// Mean over items of the per-image (weighted) BCE, full images, no
/// augmentation.
pub fn dataset_loss(model: &SegModel, items: &[TrainItem]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let (w, b) = model.head();
    let total: f64 = items
        .iter()
        .map(|item| {
            let features = model.extract_features(&ImageSample::new("", item.pixels.clone()));
            let flat = channel_major(&features);
            let target: Vec<f32> = item.target.iter().copied().collect();
            let weight: Option<Vec<f32>> = item.weight.as_ref().map(|a| a.iter().copied().collect());
            let pass = head_pass(&flat, features.dim(), &target, weight.as_deref(), w, b);
            if pass.count > 0.0 {
                pass.loss_sum / pass.count
            } else {
                0.0
            }
        })
        .sum();
    total / items.len() as f64
}

/// Trains a fresh mini U-Net (initialized from `config.seed`) on the dense
/// targets of `labeled`.
pub fn train_supervised(labeled: &[ImageSample], config: &TrainConfig) -> Result<(SegModel, TrainLog)> {
    let model = SegModel::mini_unet(derive_seed(config.seed, "init"));
    train_supervised_from(model, labeled, config)
}

/// Same as [`train_supervised`] starting from an existing model.
pub fn train_supervised_from(mut model: SegModel, labeled: &[ImageSample], config: &TrainConfig) -> Result<(SegModel, TrainLog)> {
    if labeled.is_empty() {
        return Err(Error::Config("no labeled samples to train on".into()));
    }
    let items = labeled
        .iter()
        .map(|s| Ok(TrainItem::dense(s.pixels.clone(), dense_target(s, config.target)?)))
        .collect::<Result<Vec<_>>>()?;
    let log = fit(&mut model, &items, &[], config)?;
    Ok((model, log))
}

/// Minimizes `mean_crop_loss(labeled) + mean_crop_loss(pseudo)`. Each step
/// draws `crops_per_step` crops, split evenly between the two pools when
/// `pseudo` is non-empty and all from `labeled` otherwise.
pub fn fit(model: &mut SegModel, labeled: &[TrainItem], pseudo: &[TrainItem], config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("no labeled items to train on".into()));
    }
    for item in labeled.iter().chain(pseudo) {
        if item.target.dim() != item.pixels.dim() || item.weight.as_ref().is_some_and(|w| w.dim() != item.pixels.dim()) {
            return Err(Error::Shape("training target does not match its image".into()));
        }
    }
    let stride = model.backbone().stride();
    let n_backbone = model.backbone().params().len();
    let d = model.feature_dim();
    let mut adam_backbone = Adam::<f32>::new(n_backbone, config.learning_rate);
    let mut adam_head = Adam::<f64>::new(d + 1, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batches"));
    let mut log = TrainLog::default();

    let (n_labeled, n_pseudo) = if pseudo.is_empty() {
        (config.crops_per_step, 0)
    } else {
        let half = config.crops_per_step.div_ceil(2);
        (half, (config.crops_per_step - half).max(1))
    };

    for epoch in 0..config.epochs {
        let mut grads = vec![0.0f32; n_backbone];
        let mut head_grads = vec![0.0f64; d + 1];
        let mut loss = 0.0;
        for (pool, count) in [(labeled, n_labeled), (pseudo, n_pseudo)] {
            for _ in 0..count {
                let item = &pool[rng.gen_range(0..pool.len())];
                let crop = Crop::sample(item, config, stride, &mut rng)?;
                loss += crop_pass(model, &crop, 1.0 / count as f64, &mut grads, &mut head_grads)? / count as f64;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch: epoch + 1, loss });
        }
        log.losses.push(loss);
        if (epoch + 1) % 100 == 0 {
            log::debug!("epoch {}: loss {loss:.5}", epoch + 1);
        }
        adam_backbone.step(model.backbone_mut().params_mut(), &grads);
        let (hw, hb) = model.head_mut();
        let mut head: Vec<f64> = hw.to_vec();
        head.push(*hb);
        adam_head.step(&mut head, &head_grads);
        *hb = head[d];
        hw.copy_from_slice(&head[..d]);
    }
    Ok(log)
}

struct Crop {
    input: Tensor,
    target: Vec<f32>,
    weight: Option<Vec<f32>>,
}

impl Crop {
    fn sample(item: &TrainItem, config: &TrainConfig, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (h, w) = item.pixels.dim();
        let side = config.crop_size.min(h).min(w) / stride * stride;
        if side == 0 {
            return Err(Error::Config(format!("image {h}x{w} is smaller than the backbone stride {stride}")));
        }
        let r0 = rng.gen_range(0..=h - side);
        let c0 = rng.gen_range(0..=w - side);
        let (turns, flip) = if config.augment {
            (rng.gen_range(0..4u8), rng.gen_bool(0.5))
        } else {
            (0, false)
        };
        let gather = |a: &Array2<f32>| -> Vec<f32> {
            let mut out = Vec::with_capacity(side * side);
            for r in 0..side {
                for c in 0..side {
                    let (sr, sc) = augment_source(r, c, side, turns, flip);
                    out.push(a[[r0 + sr, c0 + sc]]);
                }
            }
            out
        };
        Ok(Self {
            input: Tensor::from_vec(1, side, side, gather(&item.pixels)),
            target: gather(&item.target),
            weight: item.weight.as_ref().map(gather),
        })
    }
}

/// Source coordinate inside an `n×n` patch for output `(r, c)` after
/// `turns` quarter rotations and an optional horizontal flip.
fn augment_source(r: usize, c: usize, n: usize, turns: u8, flip: bool) -> (usize, usize) {
    let c = if flip { n - 1 - c } else { c };
    match turns % 4 {
        0 => (r, c),
        1 => (c, n - 1 - r),
        2 => (n - 1 - r, n - 1 - c),
        _ => (n - 1 - c, r),
    }
}

/// Forward and backward on one crop; gradients are scaled by `scale` and
/// accumulated. Returns the crop's mean loss.
fn crop_pass(model: &SegModel, crop: &Crop, scale: f64, grads: &mut [f32], head_grads: &mut [f64]) -> Result<f64> {
    let (features, tape) = model.backbone().forward_train(&crop.input);
    let d = features.channels;
    let n = features.plane();
    let (w, b) = model.head();
    let pass = head_pass(&features.data, d, &crop.target, crop.weight.as_deref(), w, b);
    if pass.count == 0.0 {
        return Ok(0.0);
    }
    let k = scale / pass.count;
    let mut grad_features = Tensor::zeros(d, features.height, features.width);
    for ch in 0..d {
        let xs = &features.data[ch * n..(ch + 1) * n];
        head_grads[ch] += xs.iter().zip(&pass.dlogits).map(|(&x, &g)| f64::from(x) * g).sum::<f64>() * k;
        let gw = w[ch] * k;
        for (gf, &g) in grad_features.data[ch * n..(ch + 1) * n].iter_mut().zip(&pass.dlogits) {
            *gf = (g * gw) as f32;
        }
    }
    head_grads[d] += pass.dlogits.iter().sum::<f64>() * k;
    model.backbone().backward(tape, &grad_features, grads);
    Ok(pass.loss_sum / pass.count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, NoiseProfile};

    #[test]
    fn augment_source_is_a_permutation() {
        let n = 5;
        for turns in 0..4 {
            for flip in [false, true] {
                let mut seen = vec![false; n * n];
                for r in 0..n {
                    for c in 0..n {
                        let (sr, sc) = augment_source(r, c, n, turns, flip);
                        assert!(!seen[sr * n + sc]);
                        seen[sr * n + sc] = true;
                    }
                }
            }
        }
    }

    #[test]
    fn bce_matches_probability_form() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (1.5, 0.25), (0.0, 0.5)] {
            let p = sigmoid(z);
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logit(z, y) - direct).abs() < 1e-12);
        }
        assert!(bce_with_logit(-1000.0, 1.0).is_finite());
    }

    #[test]
    fn rejects_zero_epochs() {
        let s = generate_synthetic(1, 1, (32, 32), NoiseProfile::Clean).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train_supervised(&s, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn all_zero_masks_drive_output_down() {
        let mut s = generate_synthetic(2, 2, (32, 32), NoiseProfile::Clean).unwrap();
        for x in &mut s {
            x.mask = Some(Array2::zeros((32, 32)));
        }
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 1e-2,
            crop_size: 32,
            crops_per_step: 2,
            ..TrainConfig::default()
        };
        let (model, _) = train_supervised(&s, &cfg).unwrap();
        for x in &s {
            let mean = model.predict(x).values.mean().unwrap();
            assert!(mean < 0.5, "mean {mean}");
        }
    }

    #[test]
    fn short_training_reduces_loss() {
        let s = generate_synthetic(3, 2, (32, 32), NoiseProfile::Clean).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            learning_rate: 3e-3,
            crop_size: 32,
            crops_per_step: 2,
            ..TrainConfig::default()
        };
        let items: Vec<_> = s
            .iter()
            .map(|x| TrainItem::dense(x.pixels.clone(), dense_target(x, TargetKind::Mask).unwrap()))
            .collect();
        let init = SegModel::mini_unet(derive_seed(cfg.seed, "init"));
        let before = dataset_loss(&init, &items);
        let (model, log) = train_supervised(&s, &cfg).unwrap();
        assert_eq!(log.losses.len(), 60);
        assert!(dataset_loss(&model, &items) < before);
        assert!(log.losses.last().unwrap() <= &log.losses[0]);
    }

    #[test]
    fn training_is_deterministic() {
        let s = generate_synthetic(4, 2, (32, 32), NoiseProfile::Speckle).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            crop_size: 16,
            crops_per_step: 3,
            ..TrainConfig::default()
        };
        let (a, la) = train_supervised(&s, &cfg).unwrap();
        let (b, lb) = train_supervised(&s, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.backbone().params(), b.backbone().params());
        assert_eq!(a.head(), b.head());
    }
}
