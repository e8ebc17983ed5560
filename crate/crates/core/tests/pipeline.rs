use std::path::Path;

use puseg::pipeline::{run_pipeline, run_until, CompareSpec, PuSetting, RunConfig, RunManifest, Stage};

fn config(out: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "task = segmentation
epochs_pretrain = 20
epochs_pu = 30
epochs_retrain = 20
lr = 0.01
crop_size = 16
crops_per_step = 2
data.seed = 5
data.size = 32
data.n_labeled = 1
data.n_unlabeled = 2
data.n_test = 2
output_dir = {}
cache_dir = {}
{extra}",
        out.display(),
        out.join("cache").display()
    );
    RunConfig::parse(&text).unwrap()
}

#[test]
fn second_run_reuses_every_cached_stage() {
    std::env::remove_var(puseg::pipeline::CACHE_ENV);
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let first = run_pipeline(&cfg).unwrap();
    assert!(first.manifest.completed);
    assert!(first.manifest.stages.iter().all(|s| !s.cached));
    let second = run_pipeline(&cfg).unwrap();
    let cached: Vec<_> = second.manifest.stages.iter().filter(|s| s.cached).map(|s| s.stage).collect();
    assert_eq!(cached, vec![Stage::Pretrain, Stage::Pseudolabel, Stage::PuSelect, Stage::Retrain]);
    assert_eq!(first.metrics, second.metrics);

    for name in ["config.txt", "split.json", "metrics.jsonl", "baseline_metrics.jsonl", "summary.txt", "manifest.json"] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
    let manifest = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert!(manifest.completed);
    assert!(manifest.checkpoints.iter().all(|p| p.is_file()));
    assert_eq!(manifest.pu_negative_precision, second.pu_precision);
}

#[test]
fn changing_a_downstream_setting_keeps_upstream_cache() {
    std::env::remove_var(puseg::pipeline::CACHE_ENV);
    let dir = tempfile::tempdir().unwrap();
    run_until(&config(dir.path(), ""), Stage::PuSelect).unwrap();
    let other = run_until(&config(dir.path(), "alpha = 40\n"), Stage::PuSelect).unwrap();
    let cached: Vec<_> = other.manifest.stages.iter().map(|s| (s.stage, s.cached)).collect();
    assert_eq!(
        cached,
        vec![(Stage::Pretrain, true), (Stage::Pseudolabel, true), (Stage::PuSelect, false)]
    );
    assert!(other.metrics.is_none());
}

#[test]
fn failing_stage_is_recorded_in_manifest() {
    std::env::remove_var(puseg::pipeline::CACHE_ENV);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "");
    cfg.data = RunConfig::parse(&format!("data.source = folder\ndata.root = {}\n", dir.path().join("missing").display()))
        .unwrap()
        .data;
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().contains("data"), "{err}");
    let manifest = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert!(!manifest.completed);
    assert!(manifest.error.is_some());
}

#[test]
fn compare_spec_expands_seeds_and_methods() {
    let dir = tempfile::tempdir().unwrap();
    let base = config(dir.path(), "");
    let spec = CompareSpec::parse("compare.seeds = 4, 9\ncompare.methods = off, individual\n", &base).unwrap();
    let runs = spec.expand(&base);
    assert_eq!(runs.len(), 4);
    assert_eq!((runs[0].seed, runs[0].pu_mode), (4, PuSetting::Off));
    assert_eq!((runs[3].seed, runs[3].pu_mode), (9, PuSetting::Individual));
    assert!(runs.iter().all(|r| r.cache_dir == base.cache_dir));
    assert_ne!(runs[0].output_dir, runs[1].output_dir);
    assert!(CompareSpec::parse("compare.bogus = 1\n", &base).is_err());
}

#[test]
fn config_text_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "pu_mode = batch\nretrain_init = warm_start\ninclude_pseudo_positives = true\n");
    let again = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(again.to_text(), cfg.to_text());
    assert!(RunConfig::parse("th_p = 0.1\nth_n = 0.5\n").and_then(|c| c.validate()).is_err());
    assert!(RunConfig::parse("no_such_key = 1\n").is_err());
}
