use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use puseg::data::{generate_synthetic, write_dataset};
use puseg::pipeline::{compare_methods, run_until, CompareSpec, DataSource, RunConfig, Stage};
use puseg::Error;

/// Semi-supervised segmentation with PU-learned pseudo-labels.
#[derive(Parser)]
#[command(name = "puseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset to `<output_dir>/dataset`.
    SynthGen(Common),
    /// Supervised pre-training.
    Pretrain(Common),
    /// Pre-training, then confidence pseudo-labels.
    Pseudolabel(Common),
    /// Up to and including PU negative selection.
    PuSelect(Common),
    /// Up to and including re-training.
    Retrain(Common),
    /// All stages including evaluation.
    Evaluate(Common),
    /// All stages including evaluation.
    Run(Common),
    /// Run several methods and seeds and print a comparison table.
    Compare(Common),
}

fn load(common: &Common) -> Result<(RunConfig, String), Error> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = &common.output_dir {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn execute(command: Command) -> Result<(), Error> {
    let (stage, common) = match command {
        Command::SynthGen(c) => {
            let (cfg, _) = load(&c)?;
            let DataSource::Synthetic { seed, height, width, noise } = cfg.data.source else {
                return Err(Error::Config("synth-gen needs data.source = synthetic".into()));
            };
            let n = cfg.data.n_labeled + cfg.data.n_unlabeled + cfg.data.n_test;
            let samples = generate_synthetic(seed, n, (height, width), noise)?;
            let root = cfg.output_dir.join("dataset");
            write_dataset(&root, &samples).map_err(|e| e.in_stage("synth-gen"))?;
            println!("wrote {n} images to {}", root.display());
            return Ok(());
        }
        Command::Compare(c) => {
            let (cfg, text) = load(&c)?;
            let spec = CompareSpec::parse(&text, &cfg)?;
            let table = compare_methods(&spec.expand(&cfg))?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(cfg.output_dir.join("comparison.txt"), table.to_text())?;
            std::fs::write(cfg.output_dir.join("comparison.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            print!("{}", table.to_text());
            return Ok(());
        }
        Command::Pretrain(c) => (Stage::Pretrain, c),
        Command::Pseudolabel(c) => (Stage::Pseudolabel, c),
        Command::PuSelect(c) => (Stage::PuSelect, c),
        Command::Retrain(c) => (Stage::Retrain, c),
        Command::Evaluate(c) | Command::Run(c) => (Stage::Evaluate, c),
    };
    let (cfg, _) = load(&common)?;
    let outcome = run_until(&cfg, stage)?;
    if let Some(m) = &outcome.metrics {
        print!("{}", m.summary_table());
    }
    if let Some(p) = outcome.pu_precision {
        println!("pu negative precision: {p:.4}");
    }
    println!("manifest: {}", cfg.output_dir.join("manifest.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
