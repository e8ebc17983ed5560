//! Stage orchestration with on-disk caching, run manifests and method
//! comparison.
//!
//! Each stage writes its artifacts to `<cache>/<stage>-<fingerprint>/`,
//! where the fingerprint covers every setting the stage depends on,
//! including those of upstream stages. A stage whose directory is complete
//! is loaded instead of recomputed, so methods that share a prefix of the
//! pipeline (for example all four compared methods share pre-training)
//! train it once.

mod compare;
mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use compare::{build_comparison, compare_methods, method_label, CompareSpec, ComparisonRow, ComparisonTable, MethodResult};
pub use config::{DataConfig, DataSource, PuSetting, RunConfig};

use crate::data::{generate_synthetic, load_dataset, DatasetSplit};
use crate::error::Result;
use crate::eval::{evaluate_run, RunMetrics};
use crate::net::{train_supervised, SegModel, TrainLog};
use crate::pseudo::{select_by_confidence, PseudoLabelSet};
use crate::pu::{run_pu_stage, PuReport, PuStageConfig, PuTrainConfig};
use crate::retrain::retrain;
use crate::seed::derive_seed;

pub const CACHE_ENV: &str = "PUSEG_CACHE_DIR";
pub const VERSION: &str = concat!("puseg ", env!("CARGO_PKG_VERSION"));

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Pseudolabel,
    PuSelect,
    Retrain,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Pseudolabel => "pseudolabel",
            Stage::PuSelect => "pu_select",
            Stage::Retrain => "retrain",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub directory: PathBuf,
    pub cached: bool,
    pub started_unix: f64,
    pub finished_unix: f64,
}

/// Record of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: String,
    pub stages: Vec<StageRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub pseudo_label_dirs: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
    /// Share of PU-selected negatives that are background in the
    /// ground truth, when unlabeled images carry masks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pu_negative_precision: Option<f64>,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    fn new(config: &RunConfig) -> Self {
        Self {
            version: VERSION.to_string(),
            config: config.to_text(),
            stages: Vec::new(),
            checkpoints: Vec::new(),
            pseudo_label_dirs: Vec::new(),
            metrics: Vec::new(),
            pu_negative_precision: None,
            completed: false,
            error: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// Metrics of the final (re-trained) model.
    pub metrics: Option<RunMetrics>,
    /// Metrics of the pre-trained model.
    pub baseline_metrics: Option<RunMetrics>,
    /// Fraction of PU-selected negatives that are background in the
    /// ground-truth masks, pooled over unlabeled images.
    pub pu_precision: Option<f64>,
    pub pu_reports: Vec<PuReport>,
}

/// Builds the labeled/unlabeled/test split described by `config.data`.
pub fn load_split(config: &DataConfig) -> Result<DatasetSplit> {
    match &config.source {
        DataSource::Synthetic {
            seed,
            height,
            width,
            noise,
        } => {
            let n = config.n_labeled + config.n_unlabeled + config.n_test;
            let mut samples = generate_synthetic(*seed, n, (*height, *width), *noise)?;
            if n > 0 {
                samples.rotate_left((config.fold * (config.n_labeled + config.n_unlabeled)) % n);
            }
            DatasetSplit::partition(samples, config.n_labeled, config.n_unlabeled, config.fold)
        }
        DataSource::Folder { root, layout } => load_dataset(root, *layout, config.fold, config.n_labeled, config.n_unlabeled),
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn fingerprint_hash(text: &str) -> String {
    format!("{:016x}", derive_seed(0, text))
}

/// Cache root: `$PUSEG_CACHE_DIR`, then `cache_dir`, then
/// `<output_dir>/cache`.
pub fn cache_root(config: &RunConfig) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => config
            .cache_dir
            .clone()
            .unwrap_or_else(|| config.output_dir.join("cache")),
    }
}

const DONE: &str = "done";

struct StageDir {
    path: PathBuf,
    fingerprint: String,
}

impl StageDir {
    fn new(root: &Path, stage: Stage, fingerprint: String) -> Self {
        let path = root.join(format!("{}-{}", stage.name(), fingerprint_hash(&fingerprint)));
        Self { path, fingerprint }
    }

    /// Complete when the fingerprint matches and every listed artifact is
    /// still present.
    fn is_complete(&self, artifacts: &[PathBuf]) -> bool {
        let same = fs::read_to_string(self.path.join("stage.cfg")).is_ok_and(|t| t == self.fingerprint);
        same && self.path.join(DONE).is_file() && artifacts.iter().all(|p| p.exists())
    }

    fn begin(&self) -> Result<()> {
        let _ = fs::remove_file(self.path.join(DONE));
        fs::create_dir_all(&self.path)?;
        fs::write(self.path.join("stage.cfg"), &self.fingerprint)?;
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        fs::write(self.path.join(DONE), "")?;
        Ok(())
    }
}

fn data_fingerprint(config: &RunConfig) -> String {
    let d = &config.data;
    let source = match &d.source {
        DataSource::Synthetic {
            seed,
            height,
            width,
            noise,
        } => format!("synthetic seed={seed} size={height}x{width} noise={}", config::noise_name(*noise)),
        DataSource::Folder { root, layout } => format!("folder root={} layout={layout:?}", root.display()),
    };
    format!(
        "data: {source} fold={} n_labeled={} n_unlabeled={} n_test={}\n",
        d.fold, d.n_labeled, d.n_unlabeled, d.n_test
    )
}

fn pretrain_fingerprint(config: &RunConfig) -> String {
    format!(
        "{}pretrain: task={:?} target={:?} backbone={} epochs={} lr={} crop={} crops_per_step={} augment={} seed={}\n",
        data_fingerprint(config),
        config.task,
        config.target(),
        config.backbone,
        config.epochs_pretrain,
        config.lr,
        config.crop_size,
        config.crops_per_step,
        config.augment,
        config.seed
    )
}

fn pseudolabel_fingerprint(config: &RunConfig) -> String {
    format!("{}pseudolabel: th_p={} th_n={}\n", pretrain_fingerprint(config), config.th_p, config.th_n)
}

fn pu_fingerprint(config: &RunConfig) -> String {
    format!(
        "{}pu: mode={} alpha={} epochs={} lr={} max_samples={} include_pseudo_positives={}\n",
        pseudolabel_fingerprint(config),
        config.pu_mode.as_str(),
        config.alpha,
        config.epochs_pu,
        config.pu_lr,
        config.pu_max_samples,
        config.include_pseudo_positives
    )
}

fn retrain_fingerprint(config: &RunConfig) -> String {
    let upstream = match config.pu_mode {
        PuSetting::Off => pseudolabel_fingerprint(config),
        _ => pu_fingerprint(config),
    };
    format!(
        "{upstream}retrain: init={:?} epochs={} lr={} crop={} crops_per_step={} augment={}\n",
        config.retrain_init, config.epochs_retrain, config.lr, config.crop_size, config.crops_per_step, config.augment
    )
}

fn save_labels(dir: &Path, labels: &BTreeMap<String, PseudoLabelSet>) -> Result<()> {
    for (id, set) in labels {
        set.save(&dir.join(format!("{id}.pls")))?;
    }
    Ok(())
}

fn load_labels(dir: &Path, split: &DatasetSplit) -> Result<BTreeMap<String, PseudoLabelSet>> {
    split
        .unlabeled
        .iter()
        .map(|s| Ok((s.id.clone(), PseudoLabelSet::load(&dir.join(format!("{}.pls", s.id)))?)))
        .collect()
}

fn label_paths(dir: &Path, split: &DatasetSplit) -> Vec<PathBuf> {
    split.unlabeled.iter().map(|s| dir.join(format!("{}.pls", s.id))).collect()
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    fs::write(path, serde_json::to_string(log)? + "\n")?;
    Ok(())
}

struct Runner<'a> {
    config: &'a RunConfig,
    cache: PathBuf,
    manifest: RunManifest,
}

impl Runner<'_> {
    fn record<T>(&mut self, stage: Stage, dir: &Path, cached: bool, started: f64, value: T) -> T {
        self.manifest.stages.push(StageRecord {
            stage,
            directory: dir.to_path_buf(),
            cached,
            started_unix: started,
            finished_unix: now(),
        });
        value
    }

    fn pretrain(&mut self, split: &DatasetSplit) -> Result<SegModel> {
        let dir = StageDir::new(&self.cache, Stage::Pretrain, pretrain_fingerprint(self.config));
        let ckpt = dir.path.join("model.ckpt");
        self.manifest.checkpoints.push(ckpt.clone());
        let started = now();
        if dir.is_complete(std::slice::from_ref(&ckpt)) {
            log::info!("pretrain: reusing {}", dir.path.display());
            let model = SegModel::load(&ckpt)?;
            return Ok(self.record(Stage::Pretrain, &dir.path, true, started, model));
        }
        dir.begin()?;
        let cfg = self
            .config
            .train_config(self.config.epochs_pretrain, derive_seed(self.config.seed, "pretrain"));
        let (model, log) = train_supervised(&split.labeled, &cfg)?;
        model.save(&ckpt)?;
        write_log(&dir.path.join("train_log.json"), &log)?;
        dir.finish()?;
        Ok(self.record(Stage::Pretrain, &dir.path, false, started, model))
    }

    fn pseudolabel(&mut self, model: &SegModel, split: &DatasetSplit) -> Result<BTreeMap<String, PseudoLabelSet>> {
        let dir = StageDir::new(&self.cache, Stage::Pseudolabel, pseudolabel_fingerprint(self.config));
        self.manifest.pseudo_label_dirs.push(dir.path.clone());
        let started = now();
        if dir.is_complete(&label_paths(&dir.path, split)) {
            let labels = load_labels(&dir.path, split)?;
            return Ok(self.record(Stage::Pseudolabel, &dir.path, true, started, labels));
        }
        dir.begin()?;
        let labels = split
            .unlabeled
            .iter()
            .map(|s| Ok((s.id.clone(), select_by_confidence(&model.predict(s), self.config.th_p, self.config.th_n)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        save_labels(&dir.path, &labels)?;
        dir.finish()?;
        Ok(self.record(Stage::Pseudolabel, &dir.path, false, started, labels))
    }

    fn pu_select(
        &mut self,
        model: &SegModel,
        split: &DatasetSplit,
        labels: &BTreeMap<String, PseudoLabelSet>,
    ) -> Result<(BTreeMap<String, PseudoLabelSet>, Vec<PuReport>)> {
        let Some(mode) = self.config.pu_mode.mode() else {
            return Ok((labels.clone(), Vec::new()));
        };
        let dir = StageDir::new(&self.cache, Stage::PuSelect, pu_fingerprint(self.config));
        self.manifest.pseudo_label_dirs.push(dir.path.clone());
        let report_path = dir.path.join("pu_report.jsonl");
        let started = now();
        let mut artifacts = label_paths(&dir.path, split);
        artifacts.push(report_path.clone());
        if dir.is_complete(&artifacts) {
            let out = load_labels(&dir.path, split)?;
            let reports = fs::read_to_string(&report_path)?
                .lines()
                .map(|l| Ok(serde_json::from_str(l)?))
                .collect::<Result<Vec<PuReport>>>()?;
            return Ok(self.record(Stage::PuSelect, &dir.path, true, started, (out, reports)));
        }
        dir.begin()?;
        let stage = PuStageConfig {
            mode,
            alpha: self.config.alpha,
            train: PuTrainConfig {
                epochs: self.config.epochs_pu,
                learning_rate: self.config.pu_lr,
                max_samples: self.config.pu_max_samples,
                seed: derive_seed(self.config.seed, "pu"),
            },
            include_pseudo_positives: self.config.include_pseudo_positives,
            target: self.config.target(),
            workers: self.config.workers,
        };
        let output = run_pu_stage(model, split, labels, &stage)?;
        save_labels(&dir.path, &output.labels)?;
        let mut report = String::new();
        for r in &output.reports {
            report.push_str(&serde_json::to_string(r)?);
            report.push('\n');
        }
        fs::write(&report_path, report)?;
        fs::write(dir.path.join("heads.json"), serde_json::to_string(&output.heads)? + "\n")?;
        dir.finish()?;
        Ok(self.record(Stage::PuSelect, &dir.path, false, started, (output.labels, output.reports)))
    }

    fn retrain(&mut self, pretrained: &SegModel, split: &DatasetSplit, labels: &BTreeMap<String, PseudoLabelSet>) -> Result<SegModel> {
        let dir = StageDir::new(&self.cache, Stage::Retrain, retrain_fingerprint(self.config));
        let ckpt = dir.path.join("model.ckpt");
        self.manifest.checkpoints.push(ckpt.clone());
        let started = now();
        if dir.is_complete(std::slice::from_ref(&ckpt)) {
            let model = SegModel::load(&ckpt)?;
            return Ok(self.record(Stage::Retrain, &dir.path, true, started, model));
        }
        dir.begin()?;
        let cfg = self
            .config
            .train_config(self.config.epochs_retrain, derive_seed(self.config.seed, "retrain"));
        let (model, log) = retrain(self.config.retrain_init, pretrained, &split.labeled, &split.unlabeled, labels, &cfg)?;
        model.save(&ckpt)?;
        write_log(&dir.path.join("train_log.json"), &log)?;
        dir.finish()?;
        Ok(self.record(Stage::Retrain, &dir.path, false, started, model))
    }

    fn evaluate(&mut self, pretrained: &SegModel, model: &SegModel, split: &DatasetSplit) -> Result<(RunMetrics, RunMetrics)> {
        let out = &self.config.output_dir;
        let started = now();
        let eval = self.config.eval_config();
        let plots = self.config.plots.then(|| out.join("plots"));
        let baseline = evaluate_run(pretrained, split, self.config.task, &eval, None)?;
        let metrics = evaluate_run(model, split, self.config.task, &eval, plots.as_deref())?;
        let metrics_path = out.join("metrics.jsonl");
        let baseline_path = out.join("baseline_metrics.jsonl");
        metrics.write_jsonl(&metrics_path)?;
        baseline.write_jsonl(&baseline_path)?;
        let summary = format!(
            "final model\n{}\npre-trained model\n{}",
            metrics.summary_table(),
            baseline.summary_table()
        );
        fs::write(out.join("summary.txt"), summary)?;
        self.manifest.metrics.extend([metrics_path, baseline_path]);
        Ok(self.record(Stage::Evaluate, out, false, started, (metrics, baseline)))
    }
}

/// Runs the pipeline through `until` (inclusive), reusing complete cached
/// stages. The manifest is written to `<output_dir>/manifest.json` whether
/// or not a stage fails.
pub fn run_until(config: &RunConfig, until: Stage) -> Result<RunOutcome> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join("config.txt"), config.to_text())?;
    let mut runner = Runner {
        config,
        cache: cache_root(config),
        manifest: RunManifest::new(config),
    };
    let manifest_path = config.output_dir.join("manifest.json");
    let result = execute(&mut runner, until);
    match &result {
        Ok(_) => runner.manifest.completed = true,
        Err(e) => runner.manifest.error = Some(e.to_string()),
    }
    runner.manifest.write(&manifest_path)?;
    let mut outcome = result?;
    outcome.manifest = runner.manifest;
    Ok(outcome)
}

fn execute(runner: &mut Runner<'_>, until: Stage) -> Result<RunOutcome> {
    let mut outcome = RunOutcome {
        manifest: RunManifest::new(runner.config),
        metrics: None,
        baseline_metrics: None,
        pu_precision: None,
        pu_reports: Vec::new(),
    };
    let split = load_split(&runner.config.data).map_err(|e| e.in_stage("data"))?;
    let split_ids = serde_json::json!({
        "labeled": split.labeled.iter().map(|s| &s.id).collect::<Vec<_>>(),
        "unlabeled": split.unlabeled.iter().map(|s| &s.id).collect::<Vec<_>>(),
        "test": split.test_ids(),
    });
    fs::write(runner.config.output_dir.join("split.json"), serde_json::to_string_pretty(&split_ids)? + "\n")?;

    let pretrained = runner.pretrain(&split).map_err(|e| e.in_stage(Stage::Pretrain.name()))?;
    if until == Stage::Pretrain {
        return Ok(outcome);
    }
    let labels = runner
        .pseudolabel(&pretrained, &split)
        .map_err(|e| e.in_stage(Stage::Pseudolabel.name()))?;
    if until == Stage::Pseudolabel {
        return Ok(outcome);
    }
    let (labels, reports) = runner
        .pu_select(&pretrained, &split, &labels)
        .map_err(|e| e.in_stage(Stage::PuSelect.name()))?;
    outcome.pu_precision = pooled_precision(&split, &labels);
    runner.manifest.pu_negative_precision = outcome.pu_precision;
    outcome.pu_reports = reports;
    if until == Stage::PuSelect {
        return Ok(outcome);
    }
    let model = runner
        .retrain(&pretrained, &split, &labels)
        .map_err(|e| e.in_stage(Stage::Retrain.name()))?;
    if until == Stage::Retrain {
        return Ok(outcome);
    }
    let (metrics, baseline) = runner
        .evaluate(&pretrained, &model, &split)
        .map_err(|e| e.in_stage(Stage::Evaluate.name()))?;
    outcome.metrics = Some(metrics);
    outcome.baseline_metrics = Some(baseline);
    Ok(outcome)
}

fn pooled_precision(split: &DatasetSplit, labels: &BTreeMap<String, PseudoLabelSet>) -> Option<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for s in &split.unlabeled {
        let (Some(mask), Some(set)) = (&s.mask, labels.get(&s.id)) else {
            continue;
        };
        correct += set.pu_negatives.iter().filter(|&&p| mask[p] == 0).count();
        total += set.pu_negatives.len();
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// All stages: pre-train, pseudo-label, PU selection, re-train, evaluate.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutcome> {
    run_until(config, Stage::Evaluate)
}
