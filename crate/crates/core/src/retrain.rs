//! Re-training on labeled images plus sparse pseudo-labels.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{dense_target, ImageSample, Pixel, TargetKind};
use crate::error::{Error, Result};
use crate::net::{fit, BackboneKind, ConfidenceMap, MiniUnet, SegModel, TrainConfig, TrainItem, TrainLog};
use crate::pseudo::PseudoLabelSet;
use crate::seed::derive_seed;

const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of `pred` over exactly the keyed pixels.
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn masked_loss(pred: &ConfidenceMap, labels: &BTreeMap<Pixel, u8>) -> Result<f64> {
    if labels.is_empty() {
        log::warn!("`{}` has no pseudo-labels; it contributes nothing", pred.image_id);
        return Ok(0.0);
    }
    let (h, w) = pred.shape();
    let mut sum = 0.0;
    for (&(r, c), &y) in labels {
        if r >= h || c >= w {
            return Err(Error::Shape(format!("label ({r},{c}) outside {h}x{w} prediction")));
        }
        let p = f64::from(pred.values[[r, c]]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum -= match y {
            1 => p.ln(),
            0 => (1.0 - p).ln(),
            other => return Err(Error::InvalidData(format!("label {other} at ({r},{c}) is not 0 or 1"))),
        };
    }
    Ok(sum / labels.len() as f64)
}

/// How the re-trained model is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelInit {
    #[default]
    FromScratch,
    /// Continue from the pre-trained parameters.
    WarmStart,
}

impl std::str::FromStr for ModelInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "from_scratch" => Ok(Self::FromScratch),
            "warm_start" => Ok(Self::WarmStart),
            _ => Err(Error::Config(format!("unknown retrain_init `{s}`"))),
        }
    }
}

/// Training terms of the re-training loss.
#[derive(Debug, Clone, Default)]
pub struct RetrainBatchSpec {
    /// `(image, dense target)`.
    pub labeled_terms: Vec<(Array2<f32>, Array2<f32>)>,
    /// `(image, sparse labels)`; positives map to 1, both negative kinds to 0.
    pub pseudo_terms: Vec<(String, Array2<f32>, BTreeMap<Pixel, u8>)>,
}

impl RetrainBatchSpec {
    pub fn build(
        labeled: &[ImageSample],
        unlabeled: &[ImageSample],
        pseudo: &BTreeMap<String, PseudoLabelSet>,
        target: TargetKind,
    ) -> Result<Self> {
        let labeled_terms = labeled
            .iter()
            .map(|s| Ok((s.pixels.clone(), dense_target(s, target)?)))
            .collect::<Result<_>>()?;
        let mut pseudo_terms = Vec::new();
        for s in unlabeled {
            let Some(set) = pseudo.get(&s.id) else { continue };
            set.validate()?;
            if set.shape != s.shape() {
                return Err(Error::Shape(format!(
                    "pseudo-labels for `{}` are {:?}, image is {:?}",
                    s.id,
                    set.shape,
                    s.shape()
                )));
            }
            pseudo_terms.push((s.id.clone(), s.pixels.clone(), set.labels().collect()));
        }
        Ok(Self {
            labeled_terms,
            pseudo_terms,
        })
    }

    /// Training items for [`fit`]. Pseudo terms without any keyed pixel are
    /// dropped with a warning.
    pub fn into_items(self) -> (Vec<TrainItem>, Vec<TrainItem>) {
        let labeled = self
            .labeled_terms
            .into_iter()
            .map(|(pixels, target)| TrainItem::dense(pixels, target))
            .collect();
        let mut pseudo = Vec::new();
        for (id, pixels, labels) in self.pseudo_terms {
            if labels.is_empty() {
                log::warn!("`{id}` has no pseudo-labels; it contributes nothing");
                continue;
            }
            let mut target = Array2::zeros(pixels.dim());
            let mut weight = Array2::zeros(pixels.dim());
            for ((r, c), y) in labels {
                target[[r, c]] = f32::from(y);
                weight[[r, c]] = 1.0;
            }
            pseudo.push(TrainItem::masked(pixels, target, weight));
        }
        (labeled, pseudo)
    }
}

/// Trains on the labeled images (full-image BCE) and the pseudo-labeled
/// images (masked BCE), the two terms weighted equally.
pub fn retrain(
    init: ModelInit,
    pretrained: &SegModel,
    labeled: &[ImageSample],
    unlabeled: &[ImageSample],
    pseudo: &BTreeMap<String, PseudoLabelSet>,
    config: &TrainConfig,
) -> Result<(SegModel, TrainLog)> {
    let spec = RetrainBatchSpec::build(labeled, unlabeled, pseudo, config.target)?;
    let (labeled_items, pseudo_items) = spec.into_items();
    let mut model = match init {
        ModelInit::WarmStart => pretrained.clone(),
        ModelInit::FromScratch => fresh_like(pretrained, derive_seed(config.seed, "init"))?,
    };
    let log = fit(&mut model, &labeled_items, &pseudo_items, config)?;
    Ok((model, log))
}

fn fresh_like(model: &SegModel, seed: u64) -> Result<SegModel> {
    match model.backbone_kind() {
        BackboneKind::MiniUnet => {
            let widths = MiniUnet::from_architecture(&model.backbone().architecture())?.widths();
            Ok(SegModel::new(Box::new(MiniUnet::with_widths(widths, seed))))
        }
        BackboneKind::Custom => Err(Error::Config(
            "from-scratch re-training needs a mini_unet backbone; use warm_start".into(),
        )),
    }
}
