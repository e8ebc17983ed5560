//! Segmentation network: a pluggable feature backbone (g′) followed by a
//! per-pixel linear classification layer with a sigmoid output.

mod adam;
mod checkpoint;
mod tensor;
mod train;
mod unet;

pub use adam::Adam;
pub use checkpoint::CHECKPOINT_MAGIC;
pub use tensor::Tensor;
pub use train::{
    bce_head_gradient, bce_with_logit, dataset_loss, fit, train_supervised, train_supervised_from,
    TrainConfig, TrainItem, TrainLog,
};
pub use unet::{MiniUnet, MINI_UNET};

use std::any::Any;
use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;

/// A named slice of a backbone's flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// A trainable per-pixel feature extractor.
///
/// Inputs are single-channel `(1, H, W)` tensors whose sides are multiples of
/// [`Backbone::stride`]; outputs are `(feature_dim, H, W)`.
pub trait Backbone: Send + Sync + fmt::Debug {
    /// Identifier stored in checkpoints.
    fn kind(&self) -> &str;
    /// Free-form architecture string stored in checkpoints.
    fn architecture(&self) -> String;
    fn feature_dim(&self) -> usize;
    fn stride(&self) -> usize;
    fn params(&self) -> &[f32];
    fn params_mut(&mut self) -> &mut [f32];
    fn param_table(&self) -> Vec<ParamSpec>;
    fn forward(&self, input: &Tensor) -> Tensor;
    /// Forward pass that also returns whatever the backward pass needs.
    fn forward_train(&self, input: &Tensor) -> (Tensor, Box<dyn Any + Send>);
    /// Accumulates parameter gradients into `grads` (same layout as
    /// [`Backbone::params`]).
    fn backward(&self, tape: Box<dyn Any + Send>, grad_features: &Tensor, grads: &mut [f32]);
    fn clone_box(&self) -> Box<dyn Backbone>;
}

/// Which backbone a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    MiniUnet,
    Custom,
}

/// Per-pixel foreground confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub image_id: String,
    pub values: Array2<f32>,
}

impl ConfidenceMap {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Per-pixel feature vectors, shape `(H, W, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub image_id: String,
    pub vectors: Array3<f32>,
}

impl FeatureStack {
    pub fn dim(&self) -> usize {
        self.vectors.dim().2
    }

    pub fn shape(&self) -> (usize, usize) {
        let (h, w, _) = self.vectors.dim();
        (h, w)
    }

    /// Feature vector at `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> ndarray::ArrayView1<'_, f32> {
        self.vectors.slice(ndarray::s![row, col, ..])
    }
}

/// A backbone plus its final 1×1 classification layer.
pub struct SegModel {
    backbone: Box<dyn Backbone>,
    head_weights: Vec<f64>,
    head_bias: f64,
}

impl Clone for SegModel {
    fn clone(&self) -> Self {
        Self {
            backbone: self.backbone.clone_box(),
            head_weights: self.head_weights.clone(),
            head_bias: self.head_bias,
        }
    }
}

impl fmt::Debug for SegModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SegModel")
            .field("backbone", &self.backbone.kind())
            .field("feature_dim", &self.feature_dim())
            .finish()
    }
}

impl SegModel {
    /// Wraps `backbone` with a zero-initialized head, so every output starts
    /// at `sigmoid(0) = 0.5`.
    pub fn new(backbone: Box<dyn Backbone>) -> Self {
        let d = backbone.feature_dim();
        Self {
            backbone,
            head_weights: vec![0.0; d],
            head_bias: 0.0,
        }
    }

    pub fn mini_unet(seed: u64) -> Self {
        Self::new(Box::new(MiniUnet::new(seed)))
    }

    pub fn backbone_kind(&self) -> BackboneKind {
        if self.backbone.kind() == MINI_UNET {
            BackboneKind::MiniUnet
        } else {
            BackboneKind::Custom
        }
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub(crate) fn backbone_mut(&mut self) -> &mut dyn Backbone {
        self.backbone.as_mut()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn head(&self) -> (&[f64], f64) {
        (&self.head_weights, self.head_bias)
    }

    pub fn set_head(&mut self, weights: Vec<f64>, bias: f64) {
        assert_eq!(weights.len(), self.feature_dim(), "head width");
        self.head_weights = weights;
        self.head_bias = bias;
    }

    pub(crate) fn head_mut(&mut self) -> (&mut [f64], &mut f64) {
        (&mut self.head_weights, &mut self.head_bias)
    }

    /// Confidence map `g(I)`.
    pub fn predict(&self, image: &ImageSample) -> ConfidenceMap {
        let features = self.extract_features(image);
        self.apply_head(&features)
    }

    /// Applies the final classification layer to precomputed features.
    pub fn apply_head(&self, features: &FeatureStack) -> ConfidenceMap {
        let (h, w) = features.shape();
        let values = Array2::from_shape_fn((h, w), |(r, c)| {
            let z = self.head_bias
                + features
                    .at(r, c)
                    .iter()
                    .zip(&self.head_weights)
                    .map(|(&x, &wt)| f64::from(x) * wt)
                    .sum::<f64>();
            sigmoid(z) as f32
        });
        ConfidenceMap {
            image_id: features.image_id.clone(),
            values,
        }
    }

    /// Output of the backbone, i.e. the input of the final layer.
    pub fn extract_features(&self, image: &ImageSample) -> FeatureStack {
        let (h, w) = image.shape();
        let input = pad_to_stride(&image.pixels, self.backbone.stride());
        let out = self.backbone.forward(&input);
        let d = out.channels;
        let mut vectors = Array3::<f32>::zeros((h, w, d));
        for ch in 0..d {
            let plane = out.channel(ch);
            for r in 0..h {
                for c in 0..w {
                    vectors[[r, c, ch]] = plane[r * out.width + c];
                }
            }
        }
        FeatureStack {
            image_id: image.id.clone(),
            vectors,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Edge-replicates `pixels` up to the next multiple of `stride` on the bottom
/// and right.
pub(crate) fn pad_to_stride(pixels: &Array2<f32>, stride: usize) -> Tensor {
    let (h, w) = pixels.dim();
    let up = |n: usize| n.div_ceil(stride).max(1) * stride;
    let (ph, pw) = (up(h), up(w));
    let mut t = Tensor::zeros(1, ph, pw);
    for r in 0..ph {
        for c in 0..pw {
            t.data[r * pw + c] = pixels[[r.min(h - 1), c.min(w - 1)]];
        }
    }
    t
}
