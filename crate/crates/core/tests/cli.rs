use std::path::Path;
use std::process::Command;

fn puseg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_puseg"))
        .args(args)
        .env_remove("PUSEG_CACHE_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    let text = format!(
        "task = segmentation
epochs_pretrain = 10
epochs_pu = 10
epochs_retrain = 10
crop_size = 16
crops_per_step = 2
data.size = 32
data.n_labeled = 1
data.n_unlabeled = 2
data.n_test = 2
output_dir = {}
compare.seeds = 0
{extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_gen_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = puseg(&["synth-gen", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = std::fs::read_dir(dir.path().join("out/dataset")).unwrap().count();
    assert!(files > 0);
}

#[test]
fn run_then_pretrain_reuses_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = puseg(&["run", "--config", &cfg, "--seed", "3", "--workers", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("manifest:"), "{stdout}");
    assert!(dir.path().join("out/metrics.jsonl").is_file());
    assert!(std::fs::read_to_string(dir.path().join("out/config.txt")).unwrap().contains("seed = 3"));

    let again = puseg(&["pretrain", "--config", &cfg, "--seed", "3"]);
    assert!(again.status.success());
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"cached\": true"), "{manifest}");
}

#[test]
fn compare_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "compare.methods = off, individual\n");
    let out = puseg(&["compare", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("out/comparison.txt")).unwrap();
    for row in ["Baseline", "Pseudo w/o pu", "Ours", "Avg."] {
        assert!(table.contains(row), "{table}");
    }
    assert!(dir.path().join("out/comparison.json").is_file());
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "th_p = 0.1\nth_n = 0.5\n");
    let out = puseg(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("th_n"));
    let missing = puseg(&["run", "--config", "/nonexistent.cfg"]);
    assert_eq!(missing.status.code(), Some(2));
}
