//! Per-image versus pooled PU heads when one image's background looks like
//! another image's foreground.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use puseg::data::Pixel;
use puseg::pu::{select_pu_negatives, train_pu_head, FeatureMatrix, PuProblem, PuScoreMap, PuTrainConfig, DEFAULT_ALPHA};

fn cluster(rng: &mut ChaCha8Rng, center: [f64; 2], n: usize) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, 0.15).unwrap();
    (0..n).map(|_| center.iter().map(|c| c + noise.sample(rng)).collect()).collect()
}

struct Image {
    rows: Vec<Vec<f64>>,
    foreground: Vec<bool>,
}

impl Image {
    fn new(rng: &mut ChaCha8Rng, fg: ([f64; 2], usize), bg: ([f64; 2], usize)) -> Self {
        let mut rows = cluster(rng, fg.0, fg.1);
        rows.extend(cluster(rng, bg.0, bg.1));
        let foreground = (0..fg.1 + bg.1).map(|i| i < fg.1).collect();
        Self { rows, foreground }
    }

    fn matrix(&self) -> FeatureMatrix {
        FeatureMatrix::from_rows(&self.rows).unwrap()
    }

    /// Precision of the lower-α% selection under `head`.
    fn precision(&self, head: &puseg::pu::PuHead) -> f64 {
        let scores: BTreeMap<Pixel, f64> = self.rows.iter().enumerate().map(|(i, x)| ((0, i), head.score(x))).collect();
        let map = PuScoreMap {
            image_id: "a".into(),
            scores,
        };
        let chosen: BTreeSet<Pixel> = select_pu_negatives(&map, DEFAULT_ALPHA).unwrap();
        let correct = chosen.iter().filter(|(_, i)| !self.foreground[*i]).count();
        correct as f64 / chosen.len() as f64
    }
}

#[test]
fn individual_beats_batch_on_mimicking_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let config = PuTrainConfig {
        epochs: 500,
        ..PuTrainConfig::default()
    };
    // Labeled foreground: bright and smooth.
    let positives = FeatureMatrix::from_rows(&cluster(&mut rng, [2.0, 0.0], 200)).unwrap();
    // Image A: vessels like the labeled ones, plus textured noise.
    let a = Image::new(&mut rng, ([2.0, 0.0], 60), ([1.0, 2.0], 40));
    // Image B: textured vessels that look like A's noise, on a smooth
    // background.
    let b = Image::new(&mut rng, ([1.0, 2.0], 60), ([2.2, -1.5], 200));

    let (own, _) = train_pu_head(&PuProblem::new(positives.clone(), a.matrix()).unwrap(), &config).unwrap();
    let mut pooled_rows = a.rows.clone();
    pooled_rows.extend(b.rows.iter().cloned());
    let pooled = FeatureMatrix::from_rows(&pooled_rows).unwrap();
    let (shared, _) = train_pu_head(&PuProblem::new(positives, pooled).unwrap(), &config).unwrap();

    let individual = a.precision(&own);
    let batch = a.precision(&shared);
    assert!(individual > batch, "individual {individual} vs batch {batch}");
    assert!(individual >= 0.9, "individual precision {individual}");
}

#[test]
fn separable_problem_selects_only_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let positives = FeatureMatrix::from_rows(&cluster(&mut rng, [1.0, 1.0], 100)).unwrap();
    let shift: f64 = rng.gen_range(2.5..3.5);
    let img = Image::new(&mut rng, ([1.0, 1.0], 30), ([-shift, -shift], 70));
    let (head, log) = train_pu_head(&PuProblem::new(positives, img.matrix()).unwrap(), &PuTrainConfig::default()).unwrap();
    assert!(log.final_risk <= log.initial_risk || log.clamp_activations > 0);
    assert_eq!(img.precision(&head), 1.0);
}
