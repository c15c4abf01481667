use std::path::PathBuf;

use anyhow::{anyhow, Result};
use clap::Args;
use serde::Serialize;
use vtpose::config::ExperimentConfig;
use vtpose::dataset::{carve_validation, Dataset, Split};
use vtpose::evaluation::EvalSet;
use vtpose::fusionnet::Ablation;
use vtpose::training::{train_new, TrainOutput};

use crate::common::{load_config, out_dir, write_resolved, CONFIG_FILE};

#[derive(Args)]
pub struct TrainArgs {
    /// TOML config. Defaults to the config saved with the dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// full, non-siamese, no-global, tactile-only or vision-only.
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    ablation: Ablation,
    /// Number of tactile points fed to the network.
    #[arg(long)]
    tactile_budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("unknown ablation {s:?}; expected one of {:?}", Ablation::ALL.map(|a| a.name())))
}

#[derive(Serialize)]
struct TrainRun {
    command: &'static str,
    ablation: &'static str,
    dataset: PathBuf,
    train_samples: usize,
    validation_samples: usize,
    skipped_no_detection: usize,
}

fn resolve(args: &TrainArgs) -> Result<ExperimentConfig> {
    let saved = args.dataset.join(CONFIG_FILE);
    let mut cfg = match &args.config {
        Some(p) => load_config(Some(p))?,
        None if saved.exists() => ExperimentConfig::load(&saved)?,
        None => ExperimentConfig::default(),
    };
    cfg.network = cfg.network.with_ablation(args.ablation);
    if let Some(b) = args.tactile_budget {
        cfg.network.tactile_point_budget = Some(b);
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    Ok(cfg)
}

pub fn run(args: TrainArgs) -> Result<()> {
    let cfg = resolve(&args)?;
    cfg.network.validate()?;
    cfg.train.validate()?;
    let ds = Dataset::open(&args.dataset)?;
    let entries = ds.entries(Split::Train);
    if entries.is_empty() {
        return Err(anyhow!("{} has no training samples", args.dataset.display()));
    }
    let (fit, val) = carve_validation(&entries, cfg.train.validation_trajectories);
    let fit = EvalSet::from_records(&ds.read_all(&fit)?, &ds.manifest.camera);
    let val = EvalSet::from_records(&ds.read_all(&val)?, &ds.manifest.camera);
    let out = out_dir(args.out.clone(), "train");
    let run = TrainRun {
        command: "train",
        ablation: args.ablation.name(),
        dataset: args.dataset.clone(),
        train_samples: fit.samples.len(),
        validation_samples: val.samples.len(),
        skipped_no_detection: fit.no_detection.len() + val.no_detection.len(),
    };
    write_resolved(&out, Some(&cfg), &run)?;
    println!(
        "training {} on {} samples, validating on {} ({} without detection skipped)",
        run.ablation, run.train_samples, run.validation_samples, run.skipped_no_detection
    );
    let outcome = train_new(cfg.network.clone(), &fit.samples, &val.samples, &cfg.train, &TrainOutput { dir: Some(out.clone()) })?;
    let (first, last) = (&outcome.curve[0], outcome.curve.last().expect("curve has epoch 0"));
    println!(
        "loss {:.5} -> {:.5} (L^p {:.5} -> {:.5}); best epoch {}; checkpoints in {}",
        first.mean_l,
        last.mean_l,
        first.mean_lp,
        last.mean_lp,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}
