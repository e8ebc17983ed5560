//! Method comparison tables: one row per method, one column per training
//! seed, plus the average.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{list, parse_pairs};
use super::{run_pipeline, PuSetting, RunConfig};
use crate::error::{Error, Result};
use crate::eval::RunMetrics;

pub const BASELINE: &str = "Baseline";

/// Row label of a run configuration.
pub fn method_label(setting: PuSetting) -> &'static str {
    match setting {
        PuSetting::Off => "Pseudo w/o pu",
        PuSetting::Batch => "Ours (batch)",
        PuSetting::Individual => "Ours",
    }
}

fn method_order(name: &str) -> usize {
    [BASELINE, "Pseudo w/o pu", "Ours (batch)", "Ours"]
        .iter()
        .position(|m| *m == name)
        .unwrap_or(usize::MAX)
}

/// Metrics of one method under one training seed.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: String,
    pub seed: u64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub values: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    /// `dice` or `coverage`.
    pub metric: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", self.metric);
        for s in &self.seeds {
            let _ = write!(out, " {:>9}", format!("seed {s}"));
        }
        let _ = writeln!(out, " {:>9}", "Avg.");
        for r in &self.rows {
            let _ = write!(out, "{:<16}", r.method);
            for v in &r.values {
                let _ = write!(out, " {v:>9.4}");
            }
            let _ = writeln!(out, " {:>9.4}", r.average);
        }
        out
    }
}

/// Arranges results into a table. All results must cover the same test
/// images, and every method must have a result for every seed.
pub fn build_comparison(results: &[MethodResult]) -> Result<ComparisonTable> {
    let first = results
        .first()
        .ok_or_else(|| Error::Comparison("no runs to compare".into()))?;
    let test_ids = first.metrics.test_ids();
    let task = first.metrics.task;
    let mut cells: BTreeMap<(usize, String), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in results {
        if r.metrics.test_ids() != test_ids {
            return Err(Error::Comparison(format!("`{}` (seed {}) was evaluated on a different test split", r.method, r.seed)));
        }
        if r.metrics.task != task {
            return Err(Error::Comparison("runs mix tasks".into()));
        }
        cells
            .entry((method_order(&r.method), r.method.clone()))
            .or_default()
            .insert(r.seed, r.metrics.score());
    }
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = results.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let rows = cells
        .into_iter()
        .map(|((_, method), by_seed)| {
            let values = seeds
                .iter()
                .map(|s| {
                    by_seed
                        .get(s)
                        .copied()
                        .ok_or_else(|| Error::Comparison(format!("`{method}` has no run for seed {s}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let average = values.iter().sum::<f64>() / values.len() as f64;
            Ok(ComparisonRow { method, values, average })
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonTable {
        metric: match task {
            crate::eval::Task::Segmentation => "dice".into(),
            crate::eval::Task::HeatmapTracing => "coverage".into(),
        },
        seeds,
        rows,
    })
}

/// Runs every configuration (reusing cached stages) and tabulates the
/// final-model metrics per method. The pre-trained model of each seed
/// supplies the Baseline row.
pub fn compare_methods(configs: &[RunConfig]) -> Result<ComparisonTable> {
    if configs.is_empty() {
        return Err(Error::Comparison("no configurations to compare".into()));
    }
    let mut results = Vec::new();
    let mut baseline_seeds = Vec::new();
    for cfg in configs {
        let outcome = run_pipeline(cfg)?;
        let metrics = outcome.metrics.expect("evaluate stage ran");
        if !baseline_seeds.contains(&cfg.seed) {
            baseline_seeds.push(cfg.seed);
            results.push(MethodResult {
                method: BASELINE.into(),
                seed: cfg.seed,
                metrics: outcome.baseline_metrics.expect("evaluate stage ran"),
            });
        }
        results.push(MethodResult {
            method: method_label(cfg.pu_mode).into(),
            seed: cfg.seed,
            metrics,
        });
    }
    build_comparison(&results)
}

/// `compare.seeds` and `compare.methods` from a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareSpec {
    pub seeds: Vec<u64>,
    pub methods: Vec<PuSetting>,
}

impl CompareSpec {
    /// Defaults to the seed of the base config and all three PU settings.
    pub fn parse(text: &str, base: &RunConfig) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let seeds = match pairs.get("compare.seeds") {
            Some(v) => list("compare.seeds", v)?,
            None => vec![base.seed],
        };
        let methods = match pairs.get("compare.methods") {
            Some(v) => v.split(',').map(|m| m.trim().parse()).collect::<Result<Vec<PuSetting>>>()?,
            None => vec![PuSetting::Off, PuSetting::Batch, PuSetting::Individual],
        };
        if let Some(k) = pairs.keys().find(|k| k.starts_with("compare.") && *k != "compare.seeds" && *k != "compare.methods") {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        if seeds.is_empty() || methods.is_empty() {
            return Err(Error::Config("compare.seeds and compare.methods must be non-empty".into()));
        }
        Ok(Self { seeds, methods })
    }

    /// One configuration per (seed, method), each with its own output
    /// directory and a shared cache.
    pub fn expand(&self, base: &RunConfig) -> Vec<RunConfig> {
        let cache = base.cache_dir.clone().unwrap_or_else(|| base.output_dir.join("cache"));
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &m in &self.methods {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.pu_mode = m;
                cfg.cache_dir = Some(cache.clone());
                cfg.output_dir = base.output_dir.join(format!("seed{seed}_{}", m.as_str()));
                out.push(cfg);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ImageMetrics, Task};

    fn metrics(ids: &[&str], dice: f64) -> RunMetrics {
        RunMetrics {
            task: Task::Segmentation,
            per_image: ids
                .iter()
                .map(|id| ImageMetrics {
                    image_id: id.to_string(),
                    dice: Some(dice),
                    coverage: None,
                })
                .collect(),
            mean_dice: Some(dice),
            coverage: None,
        }
    }

    fn result(method: &str, seed: u64, dice: f64) -> MethodResult {
        MethodResult {
            method: method.into(),
            seed,
            metrics: metrics(&["a", "b"], dice),
        }
    }

    #[test]
    fn rows_follow_method_order_with_average() {
        let t = build_comparison(&[
            result("Ours", 0, 0.8),
            result(BASELINE, 0, 0.7),
            result("Ours", 1, 0.9),
            result(BASELINE, 1, 0.6),
        ])
        .unwrap();
        assert_eq!(t.seeds, vec![0, 1]);
        assert_eq!(t.rows[0].method, BASELINE);
        assert!((t.row("Ours").unwrap().average - 0.85).abs() < 1e-12);
        assert!((t.row(BASELINE).unwrap().average - 0.65).abs() < 1e-12);
        assert!(t.to_text().contains("Avg."));
    }

    #[test]
    fn comparison_errors() {
        assert!(matches!(build_comparison(&[]), Err(Error::Comparison(_))));
        assert!(matches!(compare_methods(&[]), Err(Error::Comparison(_))));
        let mut other = result("Ours", 0, 0.5);
        other.metrics = metrics(&["a", "c"], 0.5);
        assert!(matches!(build_comparison(&[result(BASELINE, 0, 0.5), other]), Err(Error::Comparison(_))));
        assert!(build_comparison(&[result(BASELINE, 0, 0.5), result("Ours", 1, 0.5)]).is_err());
    }

    #[test]
    fn spec_expansion() {
        let base = RunConfig::parse("seed = 3\noutput_dir = /tmp/cmp").unwrap();
        let spec = CompareSpec::parse("compare.seeds = 1,2\ncompare.methods = off,individual", &base).unwrap();
        let cfgs = spec.expand(&base);
        assert_eq!(cfgs.len(), 4);
        assert!(cfgs.iter().all(|c| c.cache_dir.as_deref() == Some(std::path::Path::new("/tmp/cmp/cache"))));
        assert_eq!(CompareSpec::parse("", &base).unwrap().seeds, vec![3]);
        assert!(CompareSpec::parse("compare.bogus = 1", &base).is_err());
    }
}
