//! Image samples, dataset splits and ground-truth targets.
//!
//! Images are single-channel `f32` arrays in `[0, 1]`. Masks are `u8` arrays
//! holding `0` (background) or `1` (foreground). Pixel indices are
//! `(row, col)` pairs throughout the crate.

mod heatmap;
mod io;
mod synth;

pub use heatmap::{build_heatmap, HeatmapTarget, DEFAULT_SIGMA};
pub use io::{
    load_dataset, read_centerline_csv, read_gray_png, read_mask_png, write_centerline_csv,
    write_dataset, write_gray_png, write_mask_png, Layout,
};
pub use synth::{generate_synthetic, NoiseProfile};

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pixel index, `(row, col)`.
pub type Pixel = (usize, usize);

/// Role of a sample within a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Labeled,
    Unlabeled,
    Test,
}

/// A grayscale image with optional annotations.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array2<f32>,
    /// Dense foreground mask, values in `{0, 1}`.
    pub mask: Option<Array2<u8>>,
    /// Annotated centerline points. Consecutive 8-connected points belong to
    /// the same branch; see [`split_branches`].
    pub centerline: Option<Vec<Pixel>>,
    pub role: Role,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Array2<f32>) -> Self {
        Self {
            id: id.into(),
            pixels,
            mask: None,
            centerline: None,
            role: Role::Test,
        }
    }

    pub fn with_mask(mut self, mask: Array2<u8>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_centerline(mut self, points: Vec<Pixel>) -> Self {
        self.centerline = Some(points);
        self
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn has_annotation(&self) -> bool {
        self.mask.is_some() || self.centerline.is_some()
    }

    /// Ground-truth branches of the centerline annotation.
    pub fn centerline_branches(&self) -> Vec<Vec<Pixel>> {
        self.centerline
            .as_deref()
            .map(split_branches)
            .unwrap_or_default()
    }

    /// Checks the value-range, shape and role invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.shape();
        if h == 0 || w == 0 {
            return Err(Error::InvalidData(format!("`{}` is empty", self.id)));
        }
        if let Some(v) = self.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidData(format!(
                "`{}` has pixel value {v} outside [0, 1]",
                self.id
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "mask of `{}` is {:?}, image is {:?}",
                    self.id,
                    mask.dim(),
                    (h, w)
                )));
            }
            if mask.iter().any(|&v| v > 1) {
                return Err(Error::InvalidData(format!(
                    "mask of `{}` holds values other than 0/1",
                    self.id
                )));
            }
        }
        if let Some(points) = &self.centerline {
            if let Some(p) = points.iter().find(|&&(r, c)| r >= h || c >= w) {
                return Err(Error::InvalidData(format!(
                    "centerline point {p:?} of `{}` is outside {h}x{w}",
                    self.id
                )));
            }
        }
        if self.role == Role::Labeled && !self.has_annotation() {
            return Err(Error::MissingAnnotation(self.id.clone()));
        }
        Ok(())
    }
}

/// Splits an ordered point list into branches wherever two consecutive
/// points are not 8-neighbors.
pub fn split_branches(points: &[Pixel]) -> Vec<Vec<Pixel>> {
    let mut branches: Vec<Vec<Pixel>> = Vec::new();
    let mut current: Vec<Pixel> = Vec::new();
    for &p in points {
        if let Some(&last) = current.last() {
            if chebyshev(last, p) > 1 {
                branches.push(std::mem::take(&mut current));
            }
        }
        current.push(p);
    }
    if !current.is_empty() {
        branches.push(current);
    }
    branches
}

pub(crate) fn chebyshev(a: Pixel, b: Pixel) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Labeled, unlabeled and test partitions of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<ImageSample>,
    pub unlabeled: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub fold_index: usize,
}

impl DatasetSplit {
    /// Builds a split from in-memory samples, assigning roles.
    pub fn from_parts(
        labeled: Vec<ImageSample>,
        unlabeled: Vec<ImageSample>,
        test: Vec<ImageSample>,
        fold_index: usize,
    ) -> Result<Self> {
        let set_role = |v: Vec<ImageSample>, role| -> Vec<ImageSample> {
            v.into_iter().map(|s| s.with_role(role)).collect()
        };
        let split = Self {
            labeled: set_role(labeled, Role::Labeled),
            unlabeled: set_role(unlabeled, Role::Unlabeled),
            test: set_role(test, Role::Test),
            fold_index,
        };
        split.validate()?;
        Ok(split)
    }

    /// Partitions `samples` in order: the first `n_labeled` become labeled,
    /// the next `n_unlabeled` unlabeled and the rest test.
    pub fn partition(
        samples: Vec<ImageSample>,
        n_labeled: usize,
        n_unlabeled: usize,
        fold_index: usize,
    ) -> Result<Self> {
        if n_labeled + n_unlabeled > samples.len() {
            return Err(Error::Split(format!(
                "{n_labeled} labeled + {n_unlabeled} unlabeled exceeds {} samples",
                samples.len()
            )));
        }
        let mut rest = samples;
        let test = rest.split_off(n_labeled + n_unlabeled);
        let unlabeled = rest.split_off(n_labeled);
        Self::from_parts(rest, unlabeled, test, fold_index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::Split("labeled set is empty".into()));
        }
        let mut seen = HashSet::new();
        for s in self.all() {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Split(format!("sample `{}` appears twice", s.id)));
            }
            s.validate()?;
        }
        Ok(())
    }

    pub fn all(&self) -> impl Iterator<Item = &ImageSample> {
        self.labeled
            .iter()
            .chain(self.unlabeled.iter())
            .chain(self.test.iter())
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.test.iter().map(|s| s.id.clone()).collect()
    }
}

/// Kind of dense target the network is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TargetKind {
    /// Binary segmentation mask.
    Mask,
    /// Gaussian heatmap around the annotated centerline.
    Heatmap { sigma: f64 },
}

/// Dense training target for `sample`, values in `[0, 1]`.
pub fn dense_target(sample: &ImageSample, kind: TargetKind) -> Result<Array2<f32>> {
    match kind {
        TargetKind::Mask => sample
            .mask
            .as_ref()
            .map(|m| m.mapv(f32::from))
            .ok_or_else(|| Error::MissingAnnotation(sample.id.clone())),
        TargetKind::Heatmap { sigma } => {
            let points = sample
                .centerline
                .as_ref()
                .ok_or_else(|| Error::MissingAnnotation(sample.id.clone()))?;
            Ok(build_heatmap(points, sample.shape(), sigma)?
                .values
                .mapv(|v| v as f32))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sample(id: &str) -> ImageSample {
        ImageSample::new(id, Array2::zeros((4, 4))).with_mask(Array2::zeros((4, 4)))
    }

    #[test]
    fn branches_split_on_gaps() {
        let pts = vec![(0, 0), (1, 1), (2, 1), (9, 9), (9, 10)];
        let b = split_branches(&pts);
        assert_eq!(b, vec![vec![(0, 0), (1, 1), (2, 1)], vec![(9, 9), (9, 10)]]);
        assert!(split_branches(&[]).is_empty());
    }

    #[test]
    fn validate_rejects_bad_samples() {
        let mut s = sample("a");
        s.pixels[[0, 0]] = 1.5;
        assert!(matches!(s.validate(), Err(Error::InvalidData(_))));

        let s = ImageSample::new("b", Array2::zeros((4, 4))).with_mask(Array2::zeros((3, 4)));
        assert!(matches!(s.validate(), Err(Error::Shape(_))));

        let s = ImageSample::new("c", Array2::zeros((4, 4))).with_role(Role::Labeled);
        assert!(matches!(s.validate(), Err(Error::MissingAnnotation(_))));

        let s = ImageSample::new("d", Array2::zeros((4, 4))).with_centerline(vec![(4, 0)]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn split_rejects_duplicates_and_empty_labeled() {
        let err = DatasetSplit::from_parts(vec![sample("a")], vec![sample("a")], vec![], 0);
        assert!(matches!(err, Err(Error::Split(_))));
        let err = DatasetSplit::from_parts(vec![], vec![sample("a")], vec![], 0);
        assert!(matches!(err, Err(Error::Split(_))));
    }

    #[test]
    fn partition_counts() {
        let samples: Vec<_> = (0..5).map(|i| sample(&format!("s{i}"))).collect();
        let split = DatasetSplit::partition(samples, 2, 1, 0).unwrap();
        assert_eq!(split.labeled.len(), 2);
        assert_eq!(split.unlabeled.len(), 1);
        assert_eq!(split.test.len(), 2);
        assert!(split.labeled.iter().all(|s| s.role == Role::Labeled));
    }
}
