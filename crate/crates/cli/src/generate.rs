use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::Serialize;
use vtpose::dataset::{build_manifest, collect_objects, write_dataset, Split};
use vtpose::simworld::OBJECT_COUNT;

use crate::common::{load_config, out_dir, usage, write_resolved};

#[derive(Args)]
pub struct GenerateArgs {
    /// TOML config; flags override its `[sim]` values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated object ids (1-11) or `all`.
    #[arg(long, default_value = "all")]
    objects: String,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    /// Generation seed; also seeds the train/test split.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GenerateRun {
    command: &'static str,
    objects: Vec<u16>,
    split_seed: u64,
    out: PathBuf,
}

pub fn parse_objects(text: &str) -> Result<Vec<u16>> {
    if text.trim() == "all" {
        return Ok((1..=OBJECT_COUNT).collect());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let id: u16 = part.trim().parse().map_err(|_| usage(format!("bad object id {part:?} in --objects")))?;
        if out.contains(&id) {
            return Err(usage(format!("object {id} listed twice")));
        }
        out.push(id);
    }
    Ok(out)
}

pub fn run(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(t) = args.trajectories {
        cfg.sim.trajectories = t;
    }
    if let Some(i) = args.instances {
        cfg.sim.instances = i;
    }
    if let Some(s) = args.seed {
        cfg.sim.seed = s;
    }
    let objects = parse_objects(&args.objects)?;
    let out = out_dir(args.out, "generate");
    let text = cfg.to_toml()?;
    let records = collect_objects(&objects, &cfg.sim)?;
    let manifest = build_manifest(&records, &cfg.sim, &text, cfg.sim.seed)?;
    write_dataset(&records, &manifest, &out)?;
    write_resolved(&out, Some(&cfg), &GenerateRun { command: "generate", objects: objects.clone(), split_seed: cfg.sim.seed, out: out.clone() })?;
    println!(
        "{} samples for {} objects ({} train, {} test) written to {}",
        records.len(),
        objects.len(),
        manifest.split(Split::Train).len(),
        manifest.split(Split::Test).len(),
        out.display()
    );
    Ok(())
}
