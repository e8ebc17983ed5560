//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Layout, NoiseProfile, TargetKind, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Task};
use crate::net::{TrainConfig, MINI_UNET};
use crate::pseudo::{validate_thresholds, HEATMAP_TH_N, HEATMAP_TH_P, SEG_TH_N, SEG_TH_P};
use crate::pu::{validate_alpha, PuMode, DEFAULT_ALPHA};
use crate::retrain::ModelInit;

/// PU stage setting; `Off` skips the stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PuSetting {
    Individual,
    Batch,
    Off,
}

impl PuSetting {
    pub fn mode(self) -> Option<PuMode> {
        match self {
            PuSetting::Individual => Some(PuMode::Individual),
            PuSetting::Batch => Some(PuMode::Batch),
            PuSetting::Off => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PuSetting::Individual => "individual",
            PuSetting::Batch => "batch",
            PuSetting::Off => "off",
        }
    }
}

impl std::str::FromStr for PuSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(Self::Individual),
            "batch" => Ok(Self::Batch),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("unknown pu_mode `{s}`"))),
        }
    }
}

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        seed: u64,
        height: usize,
        width: usize,
        noise: NoiseProfile,
    },
    Folder {
        root: PathBuf,
        layout: Layout,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub fold: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Number of synthetic test images; folder datasets use all remaining
    /// images.
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub th_p: f64,
    pub th_n: f64,
    pub alpha: f64,
    pub pu_mode: PuSetting,
    pub seed: u64,
    pub backbone: String,
    pub epochs_pretrain: usize,
    pub epochs_pu: usize,
    pub epochs_retrain: usize,
    pub lr: f64,
    pub pu_lr: f64,
    pub pu_max_samples: usize,
    pub include_pseudo_positives: bool,
    pub crop_size: usize,
    pub crops_per_step: usize,
    pub augment: bool,
    pub retrain_init: ModelInit,
    pub sigma: f64,
    pub binarize_threshold: f64,
    pub trace_seed_threshold: f64,
    pub trace_step_threshold: f64,
    pub tolerances: Vec<u32>,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
    pub plots: bool,
}

impl RunConfig {
    /// Defaults for `task`: 2000 epochs per stage, α = 20 and the task's
    /// confidence thresholds, on a small synthetic dataset.
    pub fn defaults(task: Task) -> Self {
        let (th_p, th_n) = match task {
            Task::Segmentation => (SEG_TH_P, SEG_TH_N),
            Task::HeatmapTracing => (HEATMAP_TH_P, HEATMAP_TH_N),
        };
        let eval = EvalConfig::default();
        Self {
            task,
            th_p,
            th_n,
            alpha: DEFAULT_ALPHA,
            pu_mode: PuSetting::Individual,
            seed: 0,
            backbone: MINI_UNET.to_string(),
            epochs_pretrain: 2000,
            epochs_pu: 2000,
            epochs_retrain: 2000,
            lr: 1e-3,
            pu_lr: 1e-2,
            pu_max_samples: 50_000,
            include_pseudo_positives: false,
            crop_size: 64,
            crops_per_step: 8,
            augment: true,
            retrain_init: ModelInit::FromScratch,
            sigma: DEFAULT_SIGMA,
            binarize_threshold: eval.binarize_threshold,
            trace_seed_threshold: eval.seed_threshold,
            trace_step_threshold: eval.step_threshold,
            tolerances: eval.tolerances,
            data: DataConfig {
                source: DataSource::Synthetic {
                    seed: 0,
                    height: 64,
                    width: 64,
                    noise: NoiseProfile::Mixed,
                },
                fold: 0,
                n_labeled: 2,
                n_unlabeled: 6,
                n_test: 10,
            },
            output_dir: PathBuf::from("runs/default"),
            cache_dir: None,
            workers: 1,
            plots: false,
        }
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// keys under `compare.` are left for [`super::CompareSpec`].
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let task = match pairs.get("task") {
            Some(v) => v.parse()?,
            None => Task::Segmentation,
        };
        let mut cfg = Self::defaults(task);
        let mut source = "synthetic".to_string();
        let (mut data_seed, mut size, mut noise) = (0u64, (64usize, 64usize), NoiseProfile::Mixed);
        let (mut root, mut layout) = (None, Layout::FundusFolder);
        for (key, value) in &pairs {
            let v = value.as_str();
            match key.as_str() {
                "task" => {}
                "th_p" => cfg.th_p = num(key, v)?,
                "th_n" => cfg.th_n = num(key, v)?,
                "alpha" => cfg.alpha = num(key, v)?,
                "pu_mode" => cfg.pu_mode = v.parse()?,
                "seed" => cfg.seed = num(key, v)?,
                "backbone" => cfg.backbone = v.to_string(),
                "epochs_pretrain" => cfg.epochs_pretrain = num(key, v)?,
                "epochs_pu" => cfg.epochs_pu = num(key, v)?,
                "epochs_retrain" => cfg.epochs_retrain = num(key, v)?,
                "lr" => cfg.lr = num(key, v)?,
                "pu_lr" => cfg.pu_lr = num(key, v)?,
                "pu_max_samples" => cfg.pu_max_samples = num(key, v)?,
                "include_pseudo_positives" => cfg.include_pseudo_positives = num(key, v)?,
                "crop_size" => cfg.crop_size = num(key, v)?,
                "crops_per_step" => cfg.crops_per_step = num(key, v)?,
                "augment" => cfg.augment = num(key, v)?,
                "retrain_init" => cfg.retrain_init = v.parse()?,
                "sigma" => cfg.sigma = num(key, v)?,
                "binarize_threshold" => cfg.binarize_threshold = num(key, v)?,
                "trace_seed_threshold" => cfg.trace_seed_threshold = num(key, v)?,
                "trace_step_threshold" => cfg.trace_step_threshold = num(key, v)?,
                "tolerances" => cfg.tolerances = list(key, v)?,
                "output_dir" => cfg.output_dir = PathBuf::from(v),
                "cache_dir" => cfg.cache_dir = Some(PathBuf::from(v)),
                "workers" => cfg.workers = num(key, v)?,
                "plots" => cfg.plots = num(key, v)?,
                "data.source" => source = v.to_string(),
                "data.root" => root = Some(PathBuf::from(v)),
                "data.layout" => layout = v.parse()?,
                "data.fold" => cfg.data.fold = num(key, v)?,
                "data.n_labeled" => cfg.data.n_labeled = num(key, v)?,
                "data.n_unlabeled" => cfg.data.n_unlabeled = num(key, v)?,
                "data.n_test" => cfg.data.n_test = num(key, v)?,
                "data.seed" => data_seed = num(key, v)?,
                "data.size" => size = parse_size(v)?,
                "data.noise" => noise = v.parse()?,
                k if k.starts_with("compare.") => {}
                k => return Err(Error::Config(format!("unknown configuration key `{k}`"))),
            }
        }
        cfg.data.source = match source.as_str() {
            "synthetic" => DataSource::Synthetic {
                seed: data_seed,
                height: size.0,
                width: size.1,
                noise,
            },
            "folder" => DataSource::Folder {
                root: root.ok_or_else(|| Error::Config("data.source = folder needs data.root".into()))?,
                layout,
            },
            other => return Err(Error::Config(format!("unknown data.source `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        validate_thresholds(self.th_p, self.th_n)?;
        validate_alpha(self.alpha)?;
        if self.backbone != MINI_UNET {
            return Err(Error::Config(format!("unknown backbone `{}`", self.backbone)));
        }
        if self.epochs_pretrain == 0 || self.epochs_pu == 0 || self.epochs_retrain == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.pu_lr > 0.0) || self.pu_max_samples == 0 {
            return Err(Error::Config("learning rates and pu_max_samples must be positive".into()));
        }
        if self.crop_size == 0 || self.crops_per_step == 0 || self.workers == 0 {
            return Err(Error::Config("crop_size, crops_per_step and workers must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config("binarize_threshold must lie in (0, 1)".into()));
        }
        if !(0.0 < self.trace_step_threshold && self.trace_step_threshold < self.trace_seed_threshold && self.trace_seed_threshold < 1.0) {
            return Err(Error::Config("need 0 < trace_step_threshold < trace_seed_threshold < 1".into()));
        }
        if self.tolerances.is_empty() || self.tolerances.contains(&0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.data.n_labeled == 0 {
            return Err(Error::Config("data.n_labeled must be at least 1".into()));
        }
        if let DataSource::Synthetic { height, width, .. } = self.data.source {
            if height < 32 || width < 32 {
                return Err(Error::Config("synthetic images must be at least 32x32".into()));
            }
            if self.data.n_test == 0 {
                return Err(Error::Config("data.n_test must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn target(&self) -> TargetKind {
        match self.task {
            Task::Segmentation => TargetKind::Mask,
            Task::HeatmapTracing => TargetKind::Heatmap { sigma: self.sigma },
        }
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: self.lr,
            crop_size: self.crop_size,
            crops_per_step: self.crops_per_step,
            augment: self.augment,
            seed,
            target: self.target(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            binarize_threshold: self.binarize_threshold,
            seed_threshold: self.trace_seed_threshold,
            step_threshold: self.trace_step_threshold,
            tolerances: self.tolerances.clone(),
            workers: self.workers,
        }
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let task = match self.task {
            Task::Segmentation => "segmentation",
            Task::HeatmapTracing => "heatmap_tracing",
        };
        let init = match self.retrain_init {
            ModelInit::FromScratch => "from_scratch",
            ModelInit::WarmStart => "warm_start",
        };
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("task", task.into());
        kv("th_p", self.th_p.to_string());
        kv("th_n", self.th_n.to_string());
        kv("alpha", self.alpha.to_string());
        kv("pu_mode", self.pu_mode.as_str().into());
        kv("seed", self.seed.to_string());
        kv("backbone", self.backbone.clone());
        kv("epochs_pretrain", self.epochs_pretrain.to_string());
        kv("epochs_pu", self.epochs_pu.to_string());
        kv("epochs_retrain", self.epochs_retrain.to_string());
        kv("lr", self.lr.to_string());
        kv("pu_lr", self.pu_lr.to_string());
        kv("pu_max_samples", self.pu_max_samples.to_string());
        kv("include_pseudo_positives", self.include_pseudo_positives.to_string());
        kv("crop_size", self.crop_size.to_string());
        kv("crops_per_step", self.crops_per_step.to_string());
        kv("augment", self.augment.to_string());
        kv("retrain_init", init.into());
        kv("sigma", self.sigma.to_string());
        kv("binarize_threshold", self.binarize_threshold.to_string());
        kv("trace_seed_threshold", self.trace_seed_threshold.to_string());
        kv("trace_step_threshold", self.trace_step_threshold.to_string());
        kv("tolerances", join(&self.tolerances));
        match &self.data.source {
            DataSource::Synthetic { seed, height, width, noise } => {
                kv("data.source", "synthetic".into());
                kv("data.seed", seed.to_string());
                kv("data.size", format!("{height}x{width}"));
                kv("data.noise", noise_name(*noise).into());
            }
            DataSource::Folder { root, layout } => {
                kv("data.source", "folder".into());
                kv("data.root", root.display().to_string());
                kv(
                    "data.layout",
                    match layout {
                        Layout::FundusFolder => "fundus_folder",
                        Layout::FlatFolder => "flat_folder",
                    }
                    .into(),
                );
            }
        }
        kv("data.fold", self.data.fold.to_string());
        kv("data.n_labeled", self.data.n_labeled.to_string());
        kv("data.n_unlabeled", self.data.n_unlabeled.to_string());
        kv("data.n_test", self.data.n_test.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        if let Some(c) = &self.cache_dir {
            kv("cache_dir", c.display().to_string());
        }
        kv("workers", self.workers.to_string());
        kv("plots", self.plots.to_string());
        out
    }
}

pub(crate) fn noise_name(n: NoiseProfile) -> &'static str {
    match n {
        NoiseProfile::Clean => "clean",
        NoiseProfile::Speckle => "speckle",
        NoiseProfile::ArtifactBands => "artifact_bands",
        NoiseProfile::Mixed => "mixed",
    }
}

pub(crate) fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if pairs.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(pairs)
}

pub(crate) fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

pub(crate) fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_size(v: &str) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((h, w)) => Ok((num("data.size", h.trim())?, num("data.size", w.trim())?)),
        None => {
            let s = num("data.size", v)?;
            Ok((s, s))
        }
    }
}
