//! Confidence-thresholded pseudo-labels and their on-disk cache format.
//!
//! Cache files are plain text:
//!
//! ```text
//! image=<id> height=<H> width=<W>
//! POS
//! row,col
//! NEG
//! row,col
//! PUNEG
//! row,col
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Pixel;
use crate::error::{Error, Result};
use crate::net::ConfidenceMap;

/// Default thresholds for binary segmentation.
pub const SEG_TH_P: f64 = 0.8;
pub const SEG_TH_N: f64 = 0.1;
/// Default thresholds for heatmap targets.
pub const HEATMAP_TH_P: f64 = 100.0 / 256.0;
pub const HEATMAP_TH_N: f64 = 2.0 / 256.0;

/// Pseudo-labels of one unlabeled image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub image_id: String,
    pub shape: (usize, usize),
    /// Confident foreground pixels.
    pub positives: BTreeSet<Pixel>,
    /// Confident background pixels.
    pub negatives: BTreeSet<Pixel>,
    /// Background pixels added by PU learning.
    pub pu_negatives: BTreeSet<Pixel>,
}

impl PseudoLabelSet {
    pub fn empty(image_id: impl Into<String>, shape: (usize, usize)) -> Self {
        Self {
            image_id: image_id.into(),
            shape,
            positives: BTreeSet::new(),
            negatives: BTreeSet::new(),
            pu_negatives: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len() + self.pu_negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds PU-selected negatives; they must not already carry a label.
    pub fn add_pu_negatives(&mut self, pixels: impl IntoIterator<Item = Pixel>) -> Result<()> {
        for p in pixels {
            if self.positives.contains(&p) || self.negatives.contains(&p) {
                return Err(Error::InvalidData(format!(
                    "pixel {p:?} of `{}` is already pseudo-labeled",
                    self.image_id
                )));
            }
            self.check_bounds(p)?;
            self.pu_negatives.insert(p);
        }
        Ok(())
    }

    /// Every labeled pixel with its label: positives `1`, both negative sets `0`.
    pub fn labels(&self) -> impl Iterator<Item = (Pixel, u8)> + '_ {
        self.positives
            .iter()
            .map(|&p| (p, 1))
            .chain(self.negatives.iter().map(|&p| (p, 0)))
            .chain(self.pu_negatives.iter().map(|&p| (p, 0)))
    }

    fn check_bounds(&self, (r, c): Pixel) -> Result<()> {
        if r >= self.shape.0 || c >= self.shape.1 {
            return Err(Error::InvalidData(format!(
                "pixel {:?} outside {}x{} image `{}`",
                (r, c),
                self.shape.0,
                self.shape.1,
                self.image_id
            )));
        }
        Ok(())
    }

    /// Checks bounds and pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        for p in self.positives.iter().chain(&self.negatives).chain(&self.pu_negatives) {
            self.check_bounds(*p)?;
        }
        let overlap = self.positives.intersection(&self.negatives).next().is_some()
            || self.positives.intersection(&self.pu_negatives).next().is_some()
            || self.negatives.intersection(&self.pu_negatives).next().is_some();
        if overlap {
            return Err(Error::InvalidData(format!("pseudo-label sets of `{}` overlap", self.image_id)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("image={} height={} width={}\n", self.image_id, self.shape.0, self.shape.1);
        for (title, set) in [("POS", &self.positives), ("NEG", &self.negatives), ("PUNEG", &self.pu_negatives)] {
            s.push_str(title);
            s.push('\n');
            for (r, c) in set {
                let _ = writeln!(s, "{r},{c}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidData(format!("pseudo-label cache: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let mut id = None;
        let mut height = None;
        let mut width = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("image", v)) => id = Some(v.to_string()),
                Some(("height", v)) => height = v.parse().ok(),
                Some(("width", v)) => width = v.parse().ok(),
                _ => return Err(bad("malformed header")),
            }
        }
        let (id, height, width) = match (id, height, width) {
            (Some(i), Some(h), Some(w)) => (i, h, w),
            _ => return Err(bad("incomplete header")),
        };
        let mut set = Self::empty(id, (height, width));
        let mut section: Option<&mut BTreeSet<Pixel>> = None;
        for line in lines {
            let line = line.trim();
            match line {
                "" => continue,
                "POS" => section = Some(&mut set.positives),
                "NEG" => section = Some(&mut set.negatives),
                "PUNEG" => section = Some(&mut set.pu_negatives),
                _ => {
                    let target = section.as_deref_mut().ok_or_else(|| bad("index before section"))?;
                    let (r, c) = line.split_once(',').ok_or_else(|| bad("expected row,col"))?;
                    let r = r.parse().map_err(|_| bad("bad row"))?;
                    let c = c.parse().map_err(|_| bad("bad col"))?;
                    target.insert((r, c));
                }
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Positives are pixels with confidence strictly above `th_p`, negatives
/// strictly below `th_n`; everything in between stays unlabeled.
pub fn select_by_confidence(conf: &ConfidenceMap, th_p: f64, th_n: f64) -> Result<PseudoLabelSet> {
    validate_thresholds(th_p, th_n)?;
    let mut set = PseudoLabelSet::empty(conf.image_id.clone(), conf.shape());
    // Confidences are single precision; compare at that precision so a
    // value equal to the threshold is not counted as above it.
    let (th_p, th_n) = (th_p as f32, th_n as f32);
    for ((r, c), &v) in conf.values.indexed_iter() {
        if v > th_p {
            set.positives.insert((r, c));
        } else if v < th_n {
            set.negatives.insert((r, c));
        }
    }
    Ok(set)
}

pub fn validate_thresholds(th_p: f64, th_n: f64) -> Result<()> {
    let in_unit = |t: f64| t > 0.0 && t < 1.0;
    if !in_unit(th_p) || !in_unit(th_n) {
        return Err(Error::Config(format!("thresholds must lie in (0, 1), got th_p={th_p}, th_n={th_n}")));
    }
    if th_n >= th_p {
        return Err(Error::Config(format!("th_n ({th_n}) must be below th_p ({th_p})")));
    }
    Ok(())
}

/// All pixels of a `shape` image that carry neither a positive nor a
/// negative confidence label.
pub fn unlabeled_indices(shape: (usize, usize), pls: &PseudoLabelSet) -> Result<BTreeSet<Pixel>> {
    if pls.shape != shape {
        return Err(Error::Shape(format!(
            "pseudo-labels of `{}` are {:?}, expected {shape:?}",
            pls.image_id, pls.shape
        )));
    }
    pls.validate()?;
    let (h, w) = shape;
    Ok((0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|p| !pls.positives.contains(p) && !pls.negatives.contains(p))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn conf(values: Array2<f32>) -> ConfidenceMap {
        ConfidenceMap {
            image_id: "img".into(),
            values,
        }
    }

    #[test]
    fn two_by_two_example() {
        let c = conf(array![[0.9, 0.5], [0.05, 0.8]]);
        let s = select_by_confidence(&c, 0.8, 0.1).unwrap();
        assert_eq!(s.positives, BTreeSet::from([(0, 0)]));
        assert_eq!(s.negatives, BTreeSet::from([(1, 0)]));
        assert!(s.pu_negatives.is_empty());
        assert_eq!(unlabeled_indices((2, 2), &s).unwrap(), BTreeSet::from([(0, 1), (1, 1)]));
    }

    #[test]
    fn default_thresholds() {
        assert_eq!((SEG_TH_P, SEG_TH_N), (0.8, 0.1));
        assert_eq!(HEATMAP_TH_P, 0.390625);
        assert_eq!(HEATMAP_TH_N, 0.0078125);
    }

    #[test]
    fn invalid_thresholds() {
        let c = conf(array![[0.5]]);
        assert!(matches!(select_by_confidence(&c, 0.1, 0.1), Err(Error::Config(_))));
        assert!(matches!(select_by_confidence(&c, 0.1, 0.8), Err(Error::Config(_))));
        assert!(matches!(select_by_confidence(&c, 1.0, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn complement_edge_cases() {
        let empty = PseudoLabelSet::empty("x", (2, 3));
        assert_eq!(unlabeled_indices((2, 3), &empty).unwrap().len(), 6);
        let mut full = PseudoLabelSet::empty("x", (2, 2));
        full.positives.extend([(0, 0), (0, 1)]);
        full.negatives.extend([(1, 0), (1, 1)]);
        assert!(unlabeled_indices((2, 2), &full).unwrap().is_empty());
        assert!(unlabeled_indices((3, 2), &full).is_err());
    }

    #[test]
    fn ties_go_to_unlabeled() {
        let c = conf(array![[0.5, 0.25]]);
        let s = select_by_confidence(&c, 0.5, 0.25).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn pu_negatives_must_be_fresh() {
        let c = conf(array![[0.9, 0.5, 0.01]]);
        let mut s = select_by_confidence(&c, 0.8, 0.1).unwrap();
        assert!(s.add_pu_negatives([(0, 0)]).is_err());
        assert!(s.add_pu_negatives([(0, 7)]).is_err());
        s.add_pu_negatives([(0, 1)]).unwrap();
        assert_eq!(s.labels().collect::<Vec<_>>(), vec![((0, 0), 1), ((0, 2), 0), ((0, 1), 0)]);
    }

    #[test]
    fn cache_text_roundtrip() {
        let c = conf(array![[0.9, 0.5, 0.01], [0.3, 0.95, 0.02]]);
        let mut s = select_by_confidence(&c, 0.8, 0.1).unwrap();
        s.add_pu_negatives([(1, 0)]).unwrap();
        let text = s.to_text();
        assert!(text.contains("POS\n0,0\n1,1\nNEG\n"));
        assert_eq!(PseudoLabelSet::from_text(&text).unwrap(), s);
        assert!(PseudoLabelSet::from_text("image=a height=1 width=1\n0,0\n").is_err());
    }

    proptest! {
        #[test]
        fn partition_property(values in proptest::collection::vec(0.0f32..=1.0, 1..64), th_n in 0.01f64..0.5, gap in 0.01f64..0.49) {
            let th_p = th_n + gap;
            let n = values.len();
            let c = conf(Array2::from_shape_vec((1, n), values).unwrap());
            let s = select_by_confidence(&c, th_p, th_n).unwrap();
            let u = unlabeled_indices((1, n), &s).unwrap();
            prop_assert_eq!(s.positives.len() + s.negatives.len() + u.len(), n);
            prop_assert!(s.positives.is_disjoint(&s.negatives));
            prop_assert!(u.is_disjoint(&s.positives) && u.is_disjoint(&s.negatives));
        }
    }
}
