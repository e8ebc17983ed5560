//! Positive-unlabeled learning of per-image background pseudo-labels.
//!
//! Positives are feature vectors of labeled foreground pixels; unlabeled
//! data are the ambiguous pixels of one image (or of all images in batch
//! mode). A linear head is trained with the non-negative PU risk
//!
//! ```text
//! L = π·R⁺_p + max(0, R⁻_u − π·R⁻_p)
//! ```
//!
//! and the pixels whose scores fall in the lowest α% become extra negatives.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{dense_target, DatasetSplit, ImageSample, Pixel, TargetKind};
use crate::error::{Error, Result};
use crate::net::{sigmoid, Adam, FeatureStack, SegModel};
use crate::pseudo::{unlabeled_indices, PseudoLabelSet};
use crate::seed::derive_seed;

/// Default fraction (percent) of scored pixels selected as negatives.
pub const DEFAULT_ALPHA: f64 = 20.0;

/// Row-major `n × dim` matrix of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not form rows of width {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("rows of different widths".into()));
        }
        Self::new(dim, rows.concat())
    }

    /// Feature vectors of `pixels` in iteration order.
    pub fn gather<'a>(features: &FeatureStack, pixels: impl IntoIterator<Item = &'a Pixel>) -> Self {
        let dim = features.dim();
        let mut data = Vec::new();
        for &(r, c) in pixels {
            data.extend(features.at(r, c).iter().map(|&v| f64::from(v)));
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    fn extend(&mut self, other: &FeatureMatrix) {
        debug_assert_eq!(self.dim, other.dim);
        self.data.extend_from_slice(&other.data);
    }

    fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, data }
    }
}

/// Class prior `n_p / (n_p + n_u)`.
pub fn estimate_prior(n_p: usize, n_u: usize) -> Result<f64> {
    if n_p == 0 || n_u == 0 {
        return Err(Error::Prior { n_p, n_u });
    }
    Ok(n_p as f64 / (n_p + n_u) as f64)
}

/// Positive and unlabeled feature vectors with the class prior.
#[derive(Debug, Clone)]
pub struct PuProblem {
    positive: FeatureMatrix,
    unlabeled: FeatureMatrix,
    prior: f64,
}

impl PuProblem {
    /// Builds a problem whose prior is computed from the two set sizes.
    pub fn new(positive: FeatureMatrix, unlabeled: FeatureMatrix) -> Result<Self> {
        let prior = estimate_prior(positive.len(), unlabeled.len())?;
        Self::with_prior(positive, unlabeled, prior)
    }

    pub fn with_prior(positive: FeatureMatrix, unlabeled: FeatureMatrix, prior: f64) -> Result<Self> {
        if positive.is_empty() || unlabeled.is_empty() {
            return Err(Error::Prior {
                n_p: positive.len(),
                n_u: unlabeled.len(),
            });
        }
        if positive.dim() != unlabeled.dim() {
            return Err(Error::Shape(format!(
                "positive features have width {}, unlabeled {}",
                positive.dim(),
                unlabeled.dim()
            )));
        }
        if !(prior > 0.0 && prior < 1.0) {
            return Err(Error::Config(format!("class prior {prior} outside (0, 1)")));
        }
        Ok(Self {
            positive,
            unlabeled,
            prior,
        })
    }

    pub fn positive(&self) -> &FeatureMatrix {
        &self.positive
    }

    pub fn unlabeled(&self) -> &FeatureMatrix {
        &self.unlabeled
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn dim(&self) -> usize {
        self.positive.dim()
    }

    /// Uniformly subsamples each side down to at most `cap` vectors. The
    /// prior of the full problem is kept.
    pub fn subsampled(&self, cap: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |m: &FeatureMatrix| -> FeatureMatrix {
            if m.len() <= cap {
                return m.clone();
            }
            let mut idx = rand::seq::index::sample(&mut rng, m.len(), cap).into_vec();
            idx.sort_unstable();
            m.select(&idx)
        };
        Self {
            positive: pick(&self.positive),
            unlabeled: pick(&self.unlabeled),
            prior: self.prior,
        }
    }
}

/// A linear scoring function `f(x) = w·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuHead {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Image the head was trained for, or `BATCH`.
    pub image_id: String,
}

pub const BATCH_HEAD_ID: &str = "BATCH";

impl PuHead {
    pub fn zeros(dim: usize, image_id: impl Into<String>) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
            image_id: image_id.into(),
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if self.weights.len() != dim {
            return Err(Error::Shape(format!("head has {} weights, features have {dim}", self.weights.len())));
        }
        Ok(())
    }
}

/// Per-sample loss used inside the risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    /// `l(z, +1) = σ(−z)`, `l(z, −1) = σ(z)`; differentiable, used for training.
    Sigmoid,
    /// `l(z, y) = (1 − sign(y·z)) / 2`; evaluation only.
    ZeroOne,
}

impl Surrogate {
    fn positive(self, z: f64) -> f64 {
        match self {
            Surrogate::Sigmoid => sigmoid(-z),
            Surrogate::ZeroOne => (1.0 - sign(z)) / 2.0,
        }
    }

    fn negative(self, z: f64) -> f64 {
        match self {
            Surrogate::Sigmoid => sigmoid(z),
            Surrogate::ZeroOne => (1.0 + sign(z)) / 2.0,
        }
    }
}

fn sign(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The empirical risks making up the non-negative PU risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuRisk {
    pub prior: f64,
    /// `R⁺_p`: positives scored as positive.
    pub positive_risk: f64,
    /// `R⁻_u`: unlabeled scored as negative.
    pub unlabeled_negative_risk: f64,
    /// `R⁻_p`: positives scored as negative.
    pub positive_negative_risk: f64,
}

impl PuRisk {
    /// `R⁻_u − π·R⁻_p`, the estimated negative-class risk before clamping.
    pub fn negative_term(&self) -> f64 {
        self.unlabeled_negative_risk - self.prior * self.positive_negative_risk
    }

    pub fn clamped(&self) -> bool {
        self.negative_term() < 0.0
    }

    /// `π·R⁺_p + max(0, R⁻_u − π·R⁻_p)`.
    pub fn value(&self) -> f64 {
        self.prior * self.positive_risk + self.negative_term().max(0.0)
    }
}

pub fn pu_risk_terms(head: &PuHead, problem: &PuProblem, surrogate: Surrogate) -> Result<PuRisk> {
    head.check_dim(problem.dim())?;
    let n_p = problem.positive.len() as f64;
    let n_u = problem.unlabeled.len() as f64;
    let (mut rp_pos, mut rp_neg) = (0.0, 0.0);
    for x in problem.positive.rows() {
        let z = head.score(x);
        rp_pos += surrogate.positive(z);
        rp_neg += surrogate.negative(z);
    }
    let ru_neg: f64 = problem.unlabeled.rows().map(|x| surrogate.negative(head.score(x))).sum();
    Ok(PuRisk {
        prior: problem.prior,
        positive_risk: rp_pos / n_p,
        unlabeled_negative_risk: ru_neg / n_u,
        positive_negative_risk: rp_neg / n_p,
    })
}

/// The non-negative PU risk of `head` on `problem`.
pub fn pu_risk(head: &PuHead, problem: &PuProblem, surrogate: Surrogate) -> Result<f64> {
    Ok(pu_risk_terms(head, problem, surrogate)?.value())
}

/// Sigmoid-surrogate risks and the gradients of each w.r.t. `(weights, bias)`;
/// the last element of every gradient is the bias component.
#[derive(Debug, Clone)]
pub struct RiskGradients {
    pub risk: PuRisk,
    pub positive_risk: Vec<f64>,
    pub unlabeled_negative_risk: Vec<f64>,
    pub positive_negative_risk: Vec<f64>,
}

impl RiskGradients {
    /// Gradient of the unclamped sum `π·R⁺_p + R⁻_u − π·R⁻_p`.
    pub fn unclamped(&self) -> Vec<f64> {
        let pi = self.risk.prior;
        (0..self.positive_risk.len())
            .map(|i| pi * self.positive_risk[i] + self.unlabeled_negative_risk[i] - pi * self.positive_negative_risk[i])
            .collect()
    }

    /// Descent direction of the non-negative PU rule: the unclamped gradient
    /// when the negative term is non-negative, otherwise the gradient of
    /// `−(R⁻_u − π·R⁻_p)`.
    pub fn step_direction(&self) -> Vec<f64> {
        if self.risk.clamped() {
            let pi = self.risk.prior;
            (0..self.positive_risk.len())
                .map(|i| -(self.unlabeled_negative_risk[i] - pi * self.positive_negative_risk[i]))
                .collect()
        } else {
            self.unclamped()
        }
    }
}

pub fn pu_risk_gradients(head: &PuHead, problem: &PuProblem) -> Result<RiskGradients> {
    head.check_dim(problem.dim())?;
    let d = problem.dim();
    let n_p = problem.positive.len() as f64;
    let n_u = problem.unlabeled.len() as f64;
    let mut g_rp_pos = vec![0.0; d + 1];
    let mut g_rp_neg = vec![0.0; d + 1];
    let mut g_ru_neg = vec![0.0; d + 1];
    let (mut rp_pos, mut rp_neg, mut ru_neg) = (0.0, 0.0, 0.0);
    let accumulate = |g: &mut [f64], x: &[f64], k: f64| {
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += k * xi;
        }
        g[d] += k;
    };
    for x in problem.positive.rows() {
        let z = head.score(x);
        let (s_pos, s_neg) = (sigmoid(-z), sigmoid(z));
        rp_pos += s_pos;
        rp_neg += s_neg;
        // d/dz σ(−z) = −σ(z)σ(−z), d/dz σ(z) = σ(z)σ(−z)
        let slope = s_pos * s_neg;
        accumulate(&mut g_rp_pos, x, -slope / n_p);
        accumulate(&mut g_rp_neg, x, slope / n_p);
    }
    for x in problem.unlabeled.rows() {
        let z = head.score(x);
        let s = sigmoid(z);
        ru_neg += s;
        accumulate(&mut g_ru_neg, x, s * (1.0 - s) / n_u);
    }
    Ok(RiskGradients {
        risk: PuRisk {
            prior: problem.prior,
            positive_risk: rp_pos / n_p,
            unlabeled_negative_risk: ru_neg / n_u,
            positive_negative_risk: rp_neg / n_p,
        },
        positive_risk: g_rp_pos,
        unlabeled_negative_risk: g_ru_neg,
        positive_negative_risk: g_rp_neg,
    })
}

/// Settings for fitting one PU head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Per-side cap on the number of feature vectors used for training.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for PuTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 1e-2,
            max_samples: 50_000,
            seed: 0,
        }
    }
}

/// Summary of one PU head fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuTrainLog {
    pub initial_risk: f64,
    pub final_risk: f64,
    /// Number of steps taken on the clamped branch.
    pub clamp_activations: usize,
}

/// Fits a linear head by full-batch Adam on the sigmoid-surrogate
/// non-negative PU risk, starting from zero weights.
pub fn train_pu_head(problem: &PuProblem, config: &PuTrainConfig) -> Result<(PuHead, PuTrainLog)> {
    if config.epochs == 0 {
        return Err(Error::Config("PU epochs must be at least 1".into()));
    }
    if !(config.learning_rate > 0.0) || config.max_samples == 0 {
        return Err(Error::Config("PU learning rate and max_samples must be positive".into()));
    }
    let sampled = problem.subsampled(config.max_samples, derive_seed(config.seed, "subsample"));
    // Optimize in standardized coordinates; fold the scaling back afterwards.
    let (mean, scale) = standardization(&sampled);
    let standardized = PuProblem {
        positive: standardize(&sampled.positive, &mean, &scale),
        unlabeled: standardize(&sampled.unlabeled, &mean, &scale),
        prior: sampled.prior,
    };
    let d = problem.dim();
    let mut head = PuHead::zeros(d, "");
    let mut params = vec![0.0; d + 1];
    let mut adam = Adam::<f64>::new(d + 1, config.learning_rate);
    let mut clamp_activations = 0;
    let mut initial_risk = None;
    for epoch in 0..config.epochs {
        let g = pu_risk_gradients(&head, &standardized)?;
        let risk = g.risk.value();
        if !risk.is_finite() {
            return Err(Error::Divergence { epoch: epoch + 1, loss: risk });
        }
        initial_risk.get_or_insert(risk);
        if g.risk.clamped() {
            clamp_activations += 1;
        }
        adam.step(&mut params, &g.step_direction());
        head.weights.copy_from_slice(&params[..d]);
        head.bias = params[d];
    }
    let final_risk = pu_risk(&head, &standardized, Surrogate::Sigmoid)?;
    if !final_risk.is_finite() {
        return Err(Error::Divergence {
            epoch: config.epochs,
            loss: final_risk,
        });
    }
    let weights: Vec<f64> = head.weights.iter().zip(&scale).map(|(w, s)| w / s).collect();
    let bias = head.bias - weights.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>();
    let log = PuTrainLog {
        initial_risk: initial_risk.unwrap_or(final_risk),
        final_risk,
        clamp_activations,
    };
    Ok((
        PuHead {
            weights,
            bias,
            image_id: String::new(),
        },
        log,
    ))
}

fn standardization(problem: &PuProblem) -> (Vec<f64>, Vec<f64>) {
    let d = problem.dim();
    let n = (problem.positive.len() + problem.unlabeled.len()) as f64;
    let mut mean = vec![0.0; d];
    for x in problem.positive.rows().chain(problem.unlabeled.rows()) {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for x in problem.positive.rows().chain(problem.unlabeled.rows()) {
        var.iter_mut().zip(x.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn standardize(m: &FeatureMatrix, mean: &[f64], scale: &[f64]) -> FeatureMatrix {
    let mut out = m.clone();
    for row in out.data.chunks_exact_mut(m.dim) {
        for ((v, mu), s) in row.iter_mut().zip(mean).zip(scale) {
            *v = (*v - mu) / s;
        }
    }
    out
}

/// PU scores of the unlabeled pixels of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PuScoreMap {
    pub image_id: String,
    pub scores: BTreeMap<Pixel, f64>,
}

/// Scores every pixel of `unlabeled` with `head`.
pub fn score_unlabeled(head: &PuHead, features: &FeatureStack, unlabeled: &BTreeSet<Pixel>) -> Result<PuScoreMap> {
    head.check_dim(features.dim())?;
    let (h, w) = features.shape();
    if let Some(p) = unlabeled.iter().find(|&&(r, c)| r >= h || c >= w) {
        return Err(Error::Shape(format!("pixel {p:?} outside {h}x{w} feature stack")));
    }
    let matrix = FeatureMatrix::gather(features, unlabeled);
    let scores = unlabeled
        .iter()
        .zip(matrix.rows())
        .map(|(&p, x)| (p, head.score(x)))
        .collect();
    Ok(PuScoreMap {
        image_id: features.image_id.clone(),
        scores,
    })
}

/// Score of a single pixel.
pub fn score_pixel(head: &PuHead, features: &FeatureStack, (r, c): Pixel) -> f64 {
    let x: Vec<f64> = features.at(r, c).iter().map(|&v| f64::from(v)).collect();
    head.score(&x)
}

/// The `floor(alpha/100 · n)` lowest-scoring pixels; ties are broken by
/// ascending `(row, col)`.
pub fn select_pu_negatives(scores: &PuScoreMap, alpha: f64) -> Result<BTreeSet<Pixel>> {
    validate_alpha(alpha)?;
    if scores.scores.is_empty() {
        return Err(Error::InvalidData(format!("no PU scores for `{}`", scores.image_id)));
    }
    let n = scores.scores.len();
    let k = (alpha * n as f64 / 100.0).floor() as usize;
    // Adding 0.0 maps -0.0 to 0.0 so the two tie under `total_cmp`.
    let mut ranked: Vec<(Pixel, f64)> = scores.scores.iter().map(|(&p, &s)| (p, s + 0.0)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(p, _)| p).collect())
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 100.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 100), got {alpha}")));
    }
    Ok(())
}

/// Whether one head is trained per image or one for all images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PuMode {
    Individual,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuStageConfig {
    pub mode: PuMode,
    pub alpha: f64,
    pub train: PuTrainConfig,
    /// Also use confident pseudo-positives of unlabeled images as positives.
    pub include_pseudo_positives: bool,
    /// How labeled images define their positive pixels.
    pub target: TargetKind,
    pub workers: usize,
}

impl Default for PuStageConfig {
    fn default() -> Self {
        Self {
            mode: PuMode::Individual,
            alpha: DEFAULT_ALPHA,
            train: PuTrainConfig::default(),
            include_pseudo_positives: false,
            target: TargetKind::Mask,
            workers: 1,
        }
    }
}

/// One record of the PU stage report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuReport {
    pub image_id: String,
    pub prior: f64,
    pub n_p: usize,
    pub n_u: usize,
    pub final_risk: f64,
    pub clamp_activations: usize,
    pub n_pu_negatives: usize,
}

#[derive(Debug, Clone)]
pub struct PuStageOutput {
    pub labels: BTreeMap<String, PseudoLabelSet>,
    pub heads: Vec<PuHead>,
    pub reports: Vec<PuReport>,
}

/// Foreground pixels of a labeled sample: mask ones, or heatmap values of
/// at least one half.
fn positive_pixels(sample: &ImageSample, target: TargetKind) -> Result<Vec<Pixel>> {
    let dense = dense_target(sample, target)?;
    Ok(dense
        .indexed_iter()
        .filter(|(_, &v)| v >= 0.5)
        .map(|(p, _)| p)
        .collect())
}

/// Runs PU selection on every unlabeled image of `split` and returns the
/// pseudo-label sets with `pu_negatives` filled in. Positive and negative
/// sets are left untouched.
pub fn run_pu_stage(
    model: &SegModel,
    split: &DatasetSplit,
    pls: &BTreeMap<String, PseudoLabelSet>,
    config: &PuStageConfig,
) -> Result<PuStageOutput> {
    validate_alpha(config.alpha)?;
    for s in &split.unlabeled {
        if !pls.contains_key(&s.id) {
            return Err(Error::InvalidData(format!("no pseudo-labels for unlabeled image `{}`", s.id)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    pool.install(|| {
        let mut positive = FeatureMatrix::new(model.feature_dim(), Vec::new())?;
        let labeled: Vec<FeatureMatrix> = split
            .labeled
            .par_iter()
            .map(|s| {
                let pixels = positive_pixels(s, config.target)?;
                Ok(FeatureMatrix::gather(&model.extract_features(s), &pixels))
            })
            .collect::<Result<_>>()?;
        labeled.iter().for_each(|m| positive.extend(m));

        struct Prepared {
            features: FeatureStack,
            unlabeled: BTreeSet<Pixel>,
        }
        let prepared: Vec<Prepared> = split
            .unlabeled
            .par_iter()
            .map(|s| {
                let features = model.extract_features(s);
                let unlabeled = unlabeled_indices(s.shape(), &pls[&s.id])?;
                Ok(Prepared { features, unlabeled })
            })
            .collect::<Result<_>>()?;
        if config.include_pseudo_positives {
            for (s, p) in split.unlabeled.iter().zip(&prepared) {
                positive.extend(&FeatureMatrix::gather(&p.features, &pls[&s.id].positives));
            }
        }
        if positive.is_empty() {
            return Err(Error::InvalidData("labeled images contain no foreground pixels".into()));
        }
        let n_p = positive.len();

        let mut labels = pls.clone();
        let mut heads = Vec::new();
        let mut reports = Vec::new();
        match config.mode {
            PuMode::Individual => {
                let results: Vec<Option<(PuHead, PuTrainLog, BTreeSet<Pixel>)>> = split
                    .unlabeled
                    .par_iter()
                    .zip(&prepared)
                    .map(|(s, p)| {
                        if p.unlabeled.is_empty() {
                            log::warn!("`{}` has no ambiguous pixels; skipping PU selection", s.id);
                            return Ok(None);
                        }
                        let problem = PuProblem::new(positive.clone(), FeatureMatrix::gather(&p.features, &p.unlabeled))?;
                        let train = PuTrainConfig {
                            seed: derive_seed(config.train.seed, &format!("pu/{}", s.id)),
                            ..config.train
                        };
                        let (mut head, log) = train_pu_head(&problem, &train)?;
                        head.image_id = s.id.clone();
                        let scores = score_unlabeled(&head, &p.features, &p.unlabeled)?;
                        let selected = select_pu_negatives(&scores, config.alpha)?;
                        Ok(Some((head, log, selected)))
                    })
                    .collect::<Result<_>>()?;
                for ((s, p), result) in split.unlabeled.iter().zip(&prepared).zip(results) {
                    let n_u = p.unlabeled.len();
                    let set = labels.get_mut(&s.id).expect("checked above");
                    match result {
                        Some((head, log, selected)) => {
                            let n_sel = selected.len();
                            set.add_pu_negatives(selected)?;
                            reports.push(PuReport {
                                image_id: s.id.clone(),
                                prior: estimate_prior(n_p, n_u)?,
                                n_p,
                                n_u,
                                final_risk: log.final_risk,
                                clamp_activations: log.clamp_activations,
                                n_pu_negatives: n_sel,
                            });
                            heads.push(head);
                        }
                        None => reports.push(PuReport {
                            image_id: s.id.clone(),
                            prior: f64::NAN,
                            n_p,
                            n_u: 0,
                            final_risk: f64::NAN,
                            clamp_activations: 0,
                            n_pu_negatives: 0,
                        }),
                    }
                }
            }
            PuMode::Batch => {
                let mut pooled = FeatureMatrix::new(model.feature_dim(), Vec::new())?;
                for p in &prepared {
                    pooled.extend(&FeatureMatrix::gather(&p.features, &p.unlabeled));
                }
                let problem = PuProblem::new(positive.clone(), pooled)?;
                let train = PuTrainConfig {
                    seed: derive_seed(config.train.seed, "pu/batch"),
                    ..config.train
                };
                let (mut head, log) = train_pu_head(&problem, &train)?;
                head.image_id = BATCH_HEAD_ID.to_string();
                for (s, p) in split.unlabeled.iter().zip(&prepared) {
                    let n_u = p.unlabeled.len();
                    let mut n_sel = 0;
                    if n_u == 0 {
                        log::warn!("`{}` has no ambiguous pixels; skipping PU selection", s.id);
                    } else {
                        let scores = score_unlabeled(&head, &p.features, &p.unlabeled)?;
                        let selected = select_pu_negatives(&scores, config.alpha)?;
                        n_sel = selected.len();
                        labels.get_mut(&s.id).expect("checked above").add_pu_negatives(selected)?;
                    }
                    reports.push(PuReport {
                        image_id: s.id.clone(),
                        prior: problem.prior(),
                        n_p,
                        n_u,
                        final_risk: log.final_risk,
                        clamp_activations: log.clamp_activations,
                        n_pu_negatives: n_sel,
                    });
                }
                heads.push(head);
            }
        }
        Ok(PuStageOutput { labels, heads, reports })
    })
}

/// Fraction of `pu_negatives` that are background in `mask`; `None` when
/// nothing was selected.
pub fn negative_precision(set: &PseudoLabelSet, mask: &ndarray::Array2<u8>) -> Option<f64> {
    if set.pu_negatives.is_empty() {
        return None;
    }
    let correct = set.pu_negatives.iter().filter(|&&(r, c)| mask[[r, c]] == 0).count();
    Some(correct as f64 / set.pu_negatives.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn matrix(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn prior_formula() {
        assert_eq!(estimate_prior(100, 300).unwrap(), 0.25);
        assert_eq!(estimate_prior(1, 1).unwrap(), 0.5);
        assert!(matches!(estimate_prior(0, 5), Err(Error::Prior { n_p: 0, n_u: 5 })));
        assert!(estimate_prior(5, 0).is_err());
    }

    #[test]
    fn zero_head_risk_is_one_half() {
        let pos = matrix(&[&[1.0, 2.0]]);
        let unl = matrix(&[&[0.0, 1.0], &[3.0, -1.0], &[2.0, 2.0]]);
        let p = PuProblem::new(pos, unl).unwrap();
        assert_eq!(p.prior(), 0.25);
        let head = PuHead::zeros(2, "x");
        let r = pu_risk_terms(&head, &p, Surrogate::Sigmoid).unwrap();
        assert_eq!((r.positive_risk, r.unlabeled_negative_risk, r.positive_negative_risk), (0.5, 0.5, 0.5));
        assert_eq!(r.value(), 0.5);
    }

    #[test]
    fn perfect_separation_has_zero_risk() {
        let pos = matrix(&[&[1.0], &[1.0]]);
        let unl = matrix(&[&[-1.0], &[-1.0], &[-1.0]]);
        let p = PuProblem::new(pos, unl).unwrap();
        let head = PuHead {
            weights: vec![1e300],
            bias: 0.0,
            image_id: String::new(),
        };
        assert_eq!(pu_risk(&head, &p, Surrogate::ZeroOne).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = PuProblem::new(matrix(&[&[1.0, 0.0]]), matrix(&[&[0.0, 1.0]])).unwrap();
        assert!(pu_risk(&PuHead::zeros(3, ""), &p, Surrogate::Sigmoid).is_err());
        assert!(PuProblem::new(matrix(&[&[1.0]]), matrix(&[&[0.0, 1.0]])).is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let p = PuProblem::new(matrix(&[&[1.0]]), matrix(&[&[0.0]])).unwrap();
        let cfg = PuTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(train_pu_head(&p, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn separable_toy_problem_ranks_perfectly() {
        // Positives near +1; unlabeled = true negatives near -1 plus 25%
        // planted positives near +1.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut jitter = || rng.gen_range(-0.2..0.2);
        let pos: Vec<Vec<f64>> = (0..40).map(|_| vec![1.0 + jitter(), jitter()]).collect();
        let mut unl: Vec<Vec<f64>> = (0..60).map(|_| vec![-1.0 + jitter(), jitter()]).collect();
        let planted: Vec<Vec<f64>> = (0..20).map(|_| vec![1.0 + jitter(), jitter()]).collect();
        unl.extend(planted.clone());
        let p = PuProblem::new(FeatureMatrix::from_rows(&pos).unwrap(), FeatureMatrix::from_rows(&unl).unwrap()).unwrap();
        let cfg = PuTrainConfig {
            epochs: 500,
            ..Default::default()
        };
        let (head, log) = train_pu_head(&p, &cfg).unwrap();
        assert!(log.final_risk <= log.initial_risk || log.clamp_activations > 0);
        let min_pos = pos.iter().chain(&planted).map(|x| head.score(x)).fold(f64::INFINITY, f64::min);
        let max_neg = unl[..60].iter().map(|x| head.score(x)).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_pos > max_neg, "AUC < 1: {min_pos} <= {max_neg}");
    }

    fn score_map(values: &[f64]) -> PuScoreMap {
        PuScoreMap {
            image_id: "x".into(),
            scores: values.iter().enumerate().map(|(i, &s)| ((0, i), s)).collect(),
        }
    }

    #[test]
    fn lower_alpha_selection() {
        let m = score_map(&[0.5, 0.0, 0.9, 0.1, 0.3, 0.2, 0.4, 0.6, 0.7, 0.8]);
        assert_eq!(select_pu_negatives(&m, 20.0).unwrap(), BTreeSet::from([(0, 1), (0, 3)]));
        let m = score_map(&[0.3, 0.2, -0.5, 0.9, 0.1, 0.0, 0.4]);
        assert_eq!(select_pu_negatives(&m, 20.0).unwrap(), BTreeSet::from([(0, 2)]));
        let m = score_map(&[0.3, 0.2]);
        assert!(select_pu_negatives(&m, 20.0).unwrap().is_empty());
        assert!(select_pu_negatives(&score_map(&[]), 20.0).is_err());
        assert!(select_pu_negatives(&m, 100.0).is_err());
        assert_eq!(DEFAULT_ALPHA, 20.0);
    }

    #[test]
    fn ties_break_by_index() {
        let m = score_map(&[1.0, 0.0, 0.0, 0.0, 2.0]);
        // floor(0.4 * 5) = 2 of the three tied zeros: the first two indices.
        assert_eq!(select_pu_negatives(&m, 40.0).unwrap(), BTreeSet::from([(0, 1), (0, 2)]));
    }

    #[test]
    fn signed_zeros_tie() {
        let m = score_map(&[0.0, -0.0, 1.0]);
        assert_eq!(select_pu_negatives(&m, 50.0).unwrap(), BTreeSet::from([(0, 0)]));
    }

    #[test]
    fn scoring_paths_agree() {
        use ndarray::Array3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = FeatureStack {
            image_id: "s".into(),
            vectors: Array3::from_shape_fn((6, 5, 3), |_| rng.gen_range(-2.0..2.0)),
        };
        let head = PuHead {
            weights: vec![0.3, -1.2, 0.7],
            bias: 0.1,
            image_id: "s".into(),
        };
        let pixels: BTreeSet<Pixel> = [(0, 0), (2, 3), (5, 4)].into();
        let bulk = score_unlabeled(&head, &stack, &pixels).unwrap();
        assert_eq!(bulk.scores.len(), 3);
        for (&p, &s) in &bulk.scores {
            assert!((s - score_pixel(&head, &stack, p)).abs() < 1e-9);
        }
        let zero = score_unlabeled(&PuHead::zeros(3, "s"), &stack, &pixels).unwrap();
        assert!(zero.scores.values().all(|&s| s == 0.0));
        assert!(score_unlabeled(&head, &stack, &[(6, 0)].into()).is_err());
    }

    #[test]
    fn subsampling_caps_and_keeps_prior() {
        let pos = FeatureMatrix::new(1, (0..50).map(f64::from).collect()).unwrap();
        let unl = FeatureMatrix::new(1, (0..150).map(f64::from).collect()).unwrap();
        let p = PuProblem::new(pos, unl).unwrap();
        let s = p.subsampled(30, 1);
        assert_eq!((s.positive().len(), s.unlabeled().len()), (30, 30));
        assert_eq!(s.prior(), 0.25);
        assert_eq!(s.unlabeled(), p.subsampled(30, 1).unlabeled());
    }

    proptest! {
        #[test]
        fn clamp_keeps_risk_above_positive_part(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let mut rows = |n: usize| FeatureMatrix::new(d, (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let p = PuProblem::new(rows(7), rows(11)).unwrap();
            let head = PuHead { weights: (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect(), bias: rng.gen_range(-2.0..2.0), image_id: String::new() };
            for s in [Surrogate::Sigmoid, Surrogate::ZeroOne] {
                let r = pu_risk_terms(&head, &p, s).unwrap();
                prop_assert!(r.value() >= r.prior * r.positive_risk);
                prop_assert!(r.value() - r.prior * r.positive_risk >= 0.0);
            }
        }

        #[test]
        fn selection_invariant_under_positive_scaling(values in proptest::collection::vec(-5.0f64..5.0, 1..50), c in 0.01f64..100.0, alpha in 1.0f64..99.0) {
            let m = score_map(&values);
            let scaled = score_map(&values.iter().map(|v| v * c).collect::<Vec<_>>());
            prop_assert_eq!(select_pu_negatives(&m, alpha).unwrap(), select_pu_negatives(&scaled, alpha).unwrap());
        }
    }
}
