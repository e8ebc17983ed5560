//! Dice for segmentation; ridge tracing and centerline coverage for
//! heatmap outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, ImageSample, Pixel};
use crate::error::{Error, Result};
use crate::net::{ConfidenceMap, SegModel};

pub const DEFAULT_TOLERANCES: [u32; 3] = [3, 6, 9];
pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

/// What the network predicts and how it is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    HeatmapTracing,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(Self::Segmentation),
            "heatmap_tracing" => Ok(Self::HeatmapTracing),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// `2|P∩G| / (|P|+|G|)`, or 1 when both masks are empty.
pub fn dice(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        np += usize::from(p);
        ng += usize::from(g);
        inter += usize::from(p && g);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// 1 where `conf >= threshold`.
pub fn binarize(conf: &ConfidenceMap, threshold: f64) -> Array2<u8> {
    conf.values.mapv(|v| u8::from(f64::from(v) >= threshold))
}

/// Traced centerline polylines of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub source_id: String,
    pub branches: Vec<Vec<Pixel>>,
}

impl TraceResult {
    pub fn points(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.branches.iter().flatten().copied()
    }
}

fn neighbors((r, c): Pixel, (h, w): (usize, usize)) -> impl Iterator<Item = Pixel> {
    (-1i64..=1)
        .flat_map(|dr| (-1i64..=1).map(move |dc| (dr, dc)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dr, dc)| {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
        })
}

/// Greedy ridge following. Seeds are local maxima above `seed_threshold`,
/// visited in descending order; each seed grows in up to two directions,
/// always stepping to the brightest unvisited neighbor above
/// `step_threshold`. Leaving a pixel marks its whole 8-neighborhood as
/// visited. Branches of fewer than two points are dropped.
pub fn trace_vessels(heatmap: &Array2<f32>, seed_threshold: f64, step_threshold: f64) -> Result<TraceResult> {
    if !(0.0 < step_threshold && step_threshold < seed_threshold && seed_threshold < 1.0) {
        return Err(Error::Config(format!(
            "tracing thresholds need 0 < step ({step_threshold}) < seed ({seed_threshold}) < 1"
        )));
    }
    let dim = heatmap.dim();
    let value = |p: Pixel| f64::from(heatmap[p]);
    let mut seeds: Vec<Pixel> = heatmap
        .indexed_iter()
        .filter(|&(p, &v)| f64::from(v) > seed_threshold && neighbors(p, dim).all(|q| heatmap[q] <= v))
        .map(|(p, _)| p)
        .collect();
    seeds.sort_by(|&a, &b| value(b).total_cmp(&value(a)).then(a.cmp(&b)));

    let mut visited = Array2::from_elem(dim, false);
    let best = |from: Pixel, visited: &Array2<bool>, exclude: Option<Pixel>| -> Option<Pixel> {
        neighbors(from, dim)
            .filter(|&q| !visited[q] && value(q) > step_threshold)
            .filter(|&q| exclude.is_none_or(|e| crate::data::chebyshev(e, q) > 1))
            .max_by(|&a, &b| value(a).total_cmp(&value(b)).then(b.cmp(&a)))
    };
    let grow = |from: Pixel, first: Pixel, visited: &mut Array2<bool>| -> Vec<Pixel> {
        let mut path = vec![first];
        for q in neighbors(from, dim) {
            visited[q] = true;
        }
        let mut cur = first;
        while let Some(next) = best(cur, visited, None) {
            for q in neighbors(cur, dim) {
                visited[q] = true;
            }
            path.push(next);
            cur = next;
        }
        path
    };

    let mut branches = Vec::new();
    for seed in seeds {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        let Some(d1) = best(seed, &visited, None) else {
            continue;
        };
        let d2 = best(seed, &visited, Some(d1));
        let forward = grow(seed, d1, &mut visited);
        let mut branch: Vec<Pixel> = match d2 {
            Some(d2) => grow(seed, d2, &mut visited).into_iter().rev().collect(),
            None => Vec::new(),
        };
        branch.push(seed);
        branch.extend(forward);
        branches.push(branch);
    }
    Ok(TraceResult {
        source_id: String::new(),
        branches,
    })
}

/// Coverage of annotated branches by a trace at several tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Tolerance in pixels → mean branch coverage.
    pub per_tolerance: BTreeMap<u32, f64>,
    pub average: f64,
}

impl CoverageReport {
    fn from_per_tolerance(per_tolerance: BTreeMap<u32, f64>) -> Self {
        let average = per_tolerance.values().sum::<f64>() / per_tolerance.len() as f64;
        Self { per_tolerance, average }
    }

    /// Per-tolerance mean of several reports sharing the same tolerances.
    pub fn mean(reports: &[CoverageReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::InvalidData("no coverage reports to average".into()))?;
        let mut per = BTreeMap::new();
        for &t in first.per_tolerance.keys() {
            let values = reports
                .iter()
                .map(|r| {
                    r.per_tolerance
                        .get(&t)
                        .copied()
                        .ok_or_else(|| Error::InvalidData(format!("tolerance {t} missing from a report")))
                })
                .collect::<Result<Vec<_>>>()?;
            per.insert(t, values.iter().sum::<f64>() / values.len() as f64);
        }
        Ok(Self::from_per_tolerance(per))
    }

    /// Coverage never decreases as the tolerance grows.
    pub fn is_monotone(&self) -> bool {
        self.per_tolerance.values().zip(self.per_tolerance.values().skip(1)).all(|(a, b)| a <= b)
    }
}

/// For every tolerance `t`: mean over annotated branches of the fraction of
/// branch points whose Euclidean distance to the nearest traced point is at
/// most `t`. An empty trace covers nothing.
pub fn coverage(trace: &TraceResult, gt_branches: &[Vec<Pixel>], tolerances: &[u32]) -> Result<CoverageReport> {
    if tolerances.is_empty() || tolerances.contains(&0) {
        return Err(Error::Config("coverage tolerances must be positive and non-empty".into()));
    }
    let branches: Vec<&Vec<Pixel>> = gt_branches.iter().filter(|b| !b.is_empty()).collect();
    if branches.is_empty() {
        return Err(Error::InvalidData("no annotated centerline branches".into()));
    }
    let traced: Vec<Pixel> = trace.points().collect();
    let nearest = |&(r, c): &Pixel| -> f64 {
        traced
            .iter()
            .map(|&(tr, tc)| {
                let (dr, dc) = (r as f64 - tr as f64, c as f64 - tc as f64);
                dr * dr + dc * dc
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let distances: Vec<Vec<f64>> = branches.iter().map(|b| b.iter().map(nearest).collect()).collect();
    let per_tolerance = tolerances
        .iter()
        .map(|&t| {
            let t_f = f64::from(t);
            let mean = distances
                .iter()
                .map(|d| d.iter().filter(|&&x| x <= t_f).count() as f64 / d.len() as f64)
                .sum::<f64>()
                / distances.len() as f64;
            (t, mean)
        })
        .collect();
    Ok(CoverageReport::from_per_tolerance(per_tolerance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub binarize_threshold: f64,
    pub seed_threshold: f64,
    pub step_threshold: f64,
    pub tolerances: Vec<u32>,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            binarize_threshold: DEFAULT_BINARIZE_THRESHOLD,
            seed_threshold: 0.5,
            step_threshold: 0.15,
            tolerances: DEFAULT_TOLERANCES.to_vec(),
            workers: 1,
        }
    }
}

/// Metrics of one test image; exactly one of the two is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub task: Task,
    pub per_image: Vec<ImageMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageReport>,
}

impl RunMetrics {
    /// Mean Dice or average coverage, depending on the task.
    pub fn score(&self) -> f64 {
        match self.task {
            Task::Segmentation => self.mean_dice.unwrap_or(f64::NAN),
            Task::HeatmapTracing => self.coverage.as_ref().map_or(f64::NAN, |c| c.average),
        }
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.per_image.iter().map(|m| m.image_id.clone()).collect()
    }

    /// One JSON record per image followed by one summary record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.per_image {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "task": self.task,
            "mean_dice": self.mean_dice,
            "coverage": self.coverage,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut per_image = Vec::new();
        let mut summary = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            if v.get("summary").is_some() {
                summary = Some(v);
            } else {
                per_image.push(serde_json::from_value(v)?);
            }
        }
        let summary = summary.ok_or_else(|| Error::InvalidData("metrics file has no summary record".into()))?;
        Ok(Self {
            task: serde_json::from_value(summary["task"].clone())?,
            per_image,
            mean_dice: serde_json::from_value(summary["mean_dice"].clone())?,
            coverage: serde_json::from_value(summary["coverage"].clone())?,
        })
    }

    /// Plain-text table with one row per image and a mean row.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        match self.task {
            Task::Segmentation => {
                let _ = writeln!(out, "{:<24} {:>8}", "image", "dice");
                for m in &self.per_image {
                    let _ = writeln!(out, "{:<24} {:>8.4}", m.image_id, m.dice.unwrap_or(f64::NAN));
                }
                let _ = writeln!(out, "{:<24} {:>8.4}", "mean", self.score());
            }
            Task::HeatmapTracing => {
                let tols: Vec<u32> = self
                    .coverage
                    .as_ref()
                    .map(|c| c.per_tolerance.keys().copied().collect())
                    .unwrap_or_default();
                let _ = write!(out, "{:<24}", "image");
                for t in &tols {
                    let _ = write!(out, " {:>8}", format!("t={t}"));
                }
                let _ = writeln!(out, " {:>8}", "avg");
                let mut row = |name: &str, c: Option<&CoverageReport>| {
                    let _ = write!(out, "{name:<24}");
                    for t in &tols {
                        let v = c.and_then(|c| c.per_tolerance.get(t)).copied().unwrap_or(f64::NAN);
                        let _ = write!(out, " {v:>8.4}");
                    }
                    let _ = writeln!(out, " {:>8.4}", c.map_or(f64::NAN, |c| c.average));
                };
                for m in &self.per_image {
                    row(&m.image_id, m.coverage.as_ref());
                }
                row("mean", self.coverage.as_ref());
            }
        }
        out
    }
}

fn evaluate_image(model: &SegModel, sample: &ImageSample, task: Task, config: &EvalConfig) -> Result<(ImageMetrics, ConfidenceMap, Option<TraceResult>)> {
    let conf = model.predict(sample);
    match task {
        Task::Segmentation => {
            let gt = sample.mask.as_ref().ok_or_else(|| Error::MissingAnnotation(sample.id.clone()))?;
            let d = dice(&binarize(&conf, config.binarize_threshold), gt)?;
            Ok((
                ImageMetrics {
                    image_id: sample.id.clone(),
                    dice: Some(d),
                    coverage: None,
                },
                conf,
                None,
            ))
        }
        Task::HeatmapTracing => {
            if sample.centerline.is_none() {
                return Err(Error::MissingAnnotation(sample.id.clone()));
            }
            let mut trace = trace_vessels(&conf.values, config.seed_threshold, config.step_threshold)?;
            trace.source_id = sample.id.clone();
            let cov = coverage(&trace, &sample.centerline_branches(), &config.tolerances)?;
            Ok((
                ImageMetrics {
                    image_id: sample.id.clone(),
                    dice: None,
                    coverage: Some(cov),
                },
                conf,
                Some(trace),
            ))
        }
    }
}

/// Evaluates `model` on the test partition of `split`. When `plot_dir` is
/// given, confidence maps and overlays are written there as PNG.
pub fn evaluate_run(model: &SegModel, split: &DatasetSplit, task: Task, config: &EvalConfig, plot_dir: Option<&Path>) -> Result<RunMetrics> {
    if split.test.is_empty() {
        return Err(Error::InvalidData("test partition is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        split
            .test
            .par_iter()
            .map(|s| evaluate_image(model, s, task, config))
            .collect::<Result<Vec<_>>>()
    })?;
    if let Some(dir) = plot_dir {
        fs::create_dir_all(dir)?;
        for ((_, conf, trace), sample) in results.iter().zip(&split.test) {
            write_plots(dir, sample, conf, trace.as_ref(), config.binarize_threshold)?;
        }
    }
    let per_image: Vec<ImageMetrics> = results.into_iter().map(|(m, _, _)| m).collect();
    let (mean_dice, coverage) = match task {
        Task::Segmentation => {
            let sum: f64 = per_image.iter().filter_map(|m| m.dice).sum();
            (Some(sum / per_image.len() as f64), None)
        }
        Task::HeatmapTracing => {
            let reports: Vec<CoverageReport> = per_image.iter().filter_map(|m| m.coverage.clone()).collect();
            (None, Some(CoverageReport::mean(&reports)?))
        }
    };
    Ok(RunMetrics {
        task,
        per_image,
        mean_dice,
        coverage,
    })
}

fn write_plots(dir: &Path, sample: &ImageSample, conf: &ConfidenceMap, trace: Option<&TraceResult>, threshold: f64) -> Result<()> {
    crate::data::write_gray_png(&dir.join(format!("{}_conf.png", sample.id)), &conf.values)?;
    let (h, w) = sample.shape();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for ((r, c), &v) in sample.pixels.indexed_iter() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        rgb.put_pixel(c as u32, r as u32, image::Rgb([g, g, g]));
    }
    match trace {
        Some(t) => {
            for (r, c) in t.points() {
                rgb.put_pixel(c as u32, r as u32, image::Rgb([255, 40, 40]));
            }
        }
        None => {
            for ((r, c), &m) in binarize(conf, threshold).indexed_iter() {
                if m == 1 {
                    let px = rgb.get_pixel_mut(c as u32, r as u32);
                    px.0 = [255, px.0[1] / 2, px.0[2] / 2];
                }
            }
        }
    }
    rgb.save(dir.join(format!("{}_overlay.png", sample.id)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_heatmap;
    use proptest::prelude::*;

    fn heat(points: &[Pixel], shape: (usize, usize), sigma: f64) -> Array2<f32> {
        build_heatmap(points, shape, sigma).unwrap().values.mapv(|v| v as f32)
    }

    #[test]
    fn dice_cases() {
        let g = Array2::from_shape_fn((4, 4), |(r, _)| u8::from(r < 2));
        assert_eq!(dice(&g, &g).unwrap(), 1.0);
        let disjoint = g.mapv(|v| 1 - v);
        assert_eq!(dice(&disjoint, &g).unwrap(), 0.0);
        let half = Array2::from_shape_fn((4, 4), |(r, _)| u8::from(r < 1));
        assert!((dice(&half, &g).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let empty = Array2::<u8>::zeros((4, 4));
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(matches!(dice(&empty, &Array2::zeros((3, 4))), Err(Error::Shape(_))));
    }

    #[test]
    fn binarize_boundary_and_idempotence() {
        let c = ConfidenceMap {
            image_id: "b".into(),
            values: ndarray::array![[0.49, 0.51], [0.5, 0.0]],
        };
        let m = binarize(&c, 0.5);
        assert_eq!(m, ndarray::array![[0, 1], [1, 0]]);
        let again = binarize(
            &ConfidenceMap {
                image_id: "b".into(),
                values: m.mapv(f32::from),
            },
            0.5,
        );
        assert_eq!(again, m);
        let zero = ConfidenceMap {
            image_id: "z".into(),
            values: Array2::zeros((3, 3)),
        };
        assert!(binarize(&zero, 0.5).iter().all(|&v| v == 0));
    }

    #[test]
    fn trace_straight_line() {
        let line: Vec<Pixel> = (5..35).map(|c| (20, c)).collect();
        let t = trace_vessels(&heat(&line, (40, 40), 2.0), 0.5, 0.1).unwrap();
        assert_eq!(t.branches.len(), 1);
        assert!(t.points().all(|(r, _)| r.abs_diff(20) <= 1));
        // Every annotated point is on the trace.
        assert!(line.iter().all(|p| t.points().any(|q| q == *p)));
    }

    #[test]
    fn trace_branch_structure() {
        let line: Vec<Pixel> = (4..30).map(|c| (r_of(c), c)).collect();
        fn r_of(c: usize) -> usize {
            6 + c / 3
        }
        let t = trace_vessels(&heat(&line, (30, 36), 2.0), 0.5, 0.1).unwrap();
        for b in &t.branches {
            assert!(b.len() >= 2);
            for w in b.windows(2) {
                assert_eq!(crate::data::chebyshev(w[0], w[1]), 1);
            }
            let unique: std::collections::BTreeSet<_> = b.iter().collect();
            assert_eq!(unique.len(), b.len());
        }
    }

    #[test]
    fn trace_empty_and_parallel_lines() {
        assert!(trace_vessels(&Array2::zeros((10, 10)), 0.5, 0.1).unwrap().branches.is_empty());
        let mut pts: Vec<Pixel> = (5..35).map(|c| (10, c)).collect();
        pts.extend((5..35).map(|c| (30, c)));
        let t = trace_vessels(&heat(&pts, (40, 40), 2.0), 0.5, 0.1).unwrap();
        assert_eq!(t.branches.len(), 2);
        assert!(trace_vessels(&Array2::zeros((4, 4)), 0.1, 0.5).is_err());
    }

    #[test]
    fn noise_free_trace_stays_near_annotation() {
        let sigma = 2.0;
        let cfg = EvalConfig::default();
        let samples = crate::data::generate_synthetic(3, 3, (48, 48), crate::data::NoiseProfile::Clean).unwrap();
        for s in samples {
            let cl = s.centerline.clone().unwrap();
            let t = trace_vessels(&heat(&cl, s.shape(), sigma), cfg.seed_threshold, cfg.step_threshold).unwrap();
            assert!(!t.branches.is_empty());
            for (r, c) in t.points() {
                let d = cl
                    .iter()
                    .map(|&(a, b)| ((r as f64 - a as f64).powi(2) + (c as f64 - b as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!(d <= 2.0 * sigma, "{} point ({r},{c}) is {d} px away", s.id);
            }
        }
    }

    #[test]
    fn coverage_cases() {
        let gt: Vec<Pixel> = (5..25).map(|c| (10, c)).collect();
        let exact = TraceResult {
            source_id: String::new(),
            branches: vec![gt.clone()],
        };
        let r = coverage(&exact, &[gt.clone()], &DEFAULT_TOLERANCES).unwrap();
        assert!(r.per_tolerance.values().all(|&v| v == 1.0));
        assert_eq!(r.average, 1.0);

        let shifted = TraceResult {
            source_id: String::new(),
            branches: vec![(5..25).map(|c| (14, c)).collect()],
        };
        let r = coverage(&shifted, &[gt.clone()], &DEFAULT_TOLERANCES).unwrap();
        assert_eq!(r.per_tolerance, BTreeMap::from([(3, 0.0), (6, 1.0), (9, 1.0)]));
        assert!((r.average - 2.0 / 3.0).abs() < 1e-12);

        let none = TraceResult {
            source_id: String::new(),
            branches: vec![],
        };
        assert_eq!(coverage(&none, &[gt.clone()], &DEFAULT_TOLERANCES).unwrap().average, 0.0);
        assert!(coverage(&exact, &[], &DEFAULT_TOLERANCES).is_err());
        assert!(coverage(&exact, &[gt], &[]).is_err());
    }

    #[test]
    fn metrics_jsonl_roundtrip() {
        let m = RunMetrics {
            task: Task::HeatmapTracing,
            per_image: vec![ImageMetrics {
                image_id: "a".into(),
                dice: None,
                coverage: Some(CoverageReport::from_per_tolerance(BTreeMap::from([(3, 0.5), (6, 0.75), (9, 1.0)]))),
            }],
            mean_dice: None,
            coverage: Some(CoverageReport::from_per_tolerance(BTreeMap::from([(3, 0.5), (6, 0.75), (9, 1.0)]))),
        };
        let back = RunMetrics::from_jsonl(&m.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(m.summary_table().contains("t=6"));
        assert_eq!(m.score(), 0.75);
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(a in proptest::collection::vec(0u8..2, 36), b in proptest::collection::vec(0u8..2, 36)) {
            let a = Array2::from_shape_vec((6, 6), a).unwrap();
            let b = Array2::from_shape_vec((6, 6), b).unwrap();
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }

        #[test]
        fn coverage_monotone_in_tolerance(trace in proptest::collection::vec((0usize..40, 0usize..40), 0..30), gt in proptest::collection::vec((0usize..40, 0usize..40), 1..30)) {
            let t = TraceResult { source_id: String::new(), branches: vec![trace] };
            let r = coverage(&t, &[gt], &[1, 3, 6, 9, 12]).unwrap();
            prop_assert!(r.is_monotone());
        }
    }
}
