use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use vtpose::config::ExperimentConfig;
use vtpose::dataset::{Dataset, Split};
use vtpose::evaluation::{
    ablation_table, baseline_csv, baseline_table, bucket_rows, error_bar_svg, erased_copies, evaluate, object_rows, results_csv,
    summary_csv, EvalReport, EvalSet, ErrorStats, OraclePredictor, PlotSeries, Predictor, Stat, SummaryRow, BUCKET_LABELS,
};
use vtpose::fusionnet::{Network, NetworkConfig};
use vtpose::simworld::build_object;

use crate::common::{out_dir, usage, write_file, write_resolved, CONFIG_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    /// Per-object errors.
    Objects,
    /// Errors in the three occlusion buckets.
    Occlusion,
    /// Overall errors per checkpoint, one checkpoint per tactile budget.
    Sweep,
    /// Overall errors per checkpoint as an ablation table.
    Ablation,
    /// Per-object comparison of the first checkpoint against the second.
    Baseline,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint file, optionally as `label=path`. Repeat for multi-run analyses.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<String>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Analysis::Objects)]
    analysis: Analysis,
    /// Network config for every checkpoint. Defaults to the config.toml
    /// written beside each checkpoint by `train`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate erased copies of the test split instead, with erased
    /// fractions drawn uniformly from MIN:MAX.
    #[arg(long, value_parser = parse_range, value_name = "MIN:MAX")]
    erasure: Option<(f64, f64)>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Add a predictor that returns the ground truth; its report must show zero error.
    #[arg(long)]
    self_test: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected MIN:MAX")?;
    let (a, b): (f64, f64) = (a.parse().map_err(|_| "bad MIN")?, b.parse().map_err(|_| "bad MAX")?);
    if !(0.0..=1.0).contains(&a) || !(a..=1.0).contains(&b) {
        return Err("need 0 <= MIN <= MAX <= 1".into());
    }
    Ok((a, b))
}

#[derive(Serialize)]
struct EvalEntry {
    label: String,
    checkpoint: PathBuf,
    network: NetworkConfig,
}

#[derive(Serialize)]
struct EvalRunFile {
    command: &'static str,
    analysis: Analysis,
    dataset: PathBuf,
    seed: u64,
    self_test: bool,
    erasure: Option<[f64; 2]>,
    test_samples: usize,
    runs: Vec<EvalEntry>,
}

fn split_label(arg: &str) -> (Option<&str>, &Path) {
    match arg.split_once('=') {
        Some((l, p)) if !l.is_empty() => (Some(l), Path::new(p)),
        _ => (None, Path::new(arg)),
    }
}

fn default_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

fn network_config(explicit: Option<&ExperimentConfig>, checkpoint: &Path) -> Result<NetworkConfig> {
    if let Some(c) = explicit {
        return Ok(c.network.clone());
    }
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    if !beside.exists() {
        return Err(anyhow!("no {CONFIG_FILE} beside {}; pass --config", checkpoint.display()));
    }
    Ok(ExperimentConfig::load(&beside)?.network)
}

fn stat_series(name: &str, values: Vec<Stat>) -> PlotSeries {
    PlotSeries { name: name.into(), values }
}

/// Writes a position and an angular error plot over `groups`.
fn write_plots(dir: &Path, stem: &str, title: &str, groups: &[String], series: &[(String, Vec<ErrorStats>)]) -> Result<()> {
    let pos: Vec<PlotSeries> = series.iter().map(|(n, v)| stat_series(n, v.iter().map(|s| s.position_cm).collect())).collect();
    let ang: Vec<PlotSeries> = series.iter().map(|(n, v)| stat_series(n, v.iter().map(|s| s.angular_deg).collect())).collect();
    write_file(dir, &format!("{stem}_position.svg"), &error_bar_svg(title, "position error (cm)", groups, &pos))?;
    write_file(dir, &format!("{stem}_angular.svg"), &error_bar_svg(title, "angular error (deg)", groups, &ang))
}

pub fn run(args: EvalArgs) -> Result<()> {
    let explicit = args.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let mut predictors: Vec<(String, Box<dyn Predictor>)> = Vec::new();
    let mut entries = Vec::new();
    for arg in &args.checkpoints {
        let (label, path) = split_label(arg);
        let mut label = label.map(str::to_string).unwrap_or_else(|| default_label(path));
        if predictors.iter().any(|(l, _)| *l == label) {
            label = format!("{label}#{}", predictors.len());
        }
        let network = network_config(explicit.as_ref(), path)?;
        let net = Network::load(network.clone(), path).with_context(|| format!("loading {}", path.display()))?;
        entries.push(EvalEntry { label: label.clone(), checkpoint: path.to_path_buf(), network });
        predictors.push((label, Box::new(net)));
    }
    if args.self_test {
        predictors.push(("oracle".into(), Box::new(OraclePredictor::default())));
    }
    if predictors.is_empty() {
        return Err(usage("nothing to evaluate: give --checkpoint or --self-test"));
    }
    if args.analysis == Analysis::Baseline && predictors.len() != 2 {
        return Err(usage("baseline analysis needs exactly two predictors (ours first, then the baseline)"));
    }

    let ds = Dataset::open(&args.dataset)?;
    let test = ds.entries(Split::Test);
    if test.is_empty() {
        return Err(anyhow!("{} has no test samples", args.dataset.display()));
    }
    let mut records = ds.read_all(&test)?;
    if let Some(range) = args.erasure {
        let mpc = ds.manifest.model_point_count;
        let models: BTreeMap<u16, _> =
            records.iter().filter_map(|r| build_object(r.object_id, mpc).map(|o| (r.object_id, o.model_cloud))).collect();
        records = erased_copies(&records, range, args.seed, &models, &ds.manifest.camera, ds.manifest.visibility_epsilon);
    }
    let set = EvalSet::from_records(&records, &ds.manifest.camera);

    let out = out_dir(args.out.clone(), "eval");
    write_resolved(
        &out,
        None,
        &EvalRunFile {
            command: "eval",
            analysis: args.analysis,
            dataset: args.dataset.clone(),
            seed: args.seed,
            self_test: args.self_test,
            erasure: args.erasure.map(|(a, b)| [a, b]),
            test_samples: test.len(),
            runs: entries,
        },
    )?;

    let mut all_results = Vec::new();
    let mut reports = Vec::new();
    let mut no_detection = String::from("config_id,sample_id\n");
    for (label, p) in &predictors {
        let run = evaluate(p.as_ref(), &set, label, args.seed)?;
        let report = EvalReport::from_run(&run);
        println!(
            "{label}: {} evaluated + {} without detection = {} (test split {}); position {} cm, angular {} deg",
            report.evaluated,
            report.no_detection,
            report.total(),
            test.len(),
            report.overall.position_cm.fmt_pm(3),
            report.overall.angular_deg.fmt_pm(2)
        );
        for id in &run.no_detection {
            no_detection.push_str(&format!("{label},{id}\n"));
        }
        all_results.extend(run.results);
        reports.push(report);
    }
    write_file(&out, "results.csv", &results_csv(&all_results))?;
    write_file(&out, "no_detection.csv", &no_detection)?;

    let name = args.analysis.to_possible_value().expect("no skipped variants").get_name().to_string();
    let overall_rows = || -> Vec<SummaryRow> {
        reports.iter().map(|r| SummaryRow { config_id: r.config_id.clone(), group: "all".into(), stats: r.overall }).collect()
    };
    let labels: Vec<String> = reports.iter().map(|r| r.config_id.clone()).collect();
    match args.analysis {
        Analysis::Objects | Analysis::Baseline => {
            let rows: Vec<SummaryRow> = reports.iter().flat_map(object_rows).collect();
            write_file(&out, "summary.csv", &summary_csv(&name, &rows))?;
            let objects: Vec<u16> = reports[0].per_object.keys().copied().collect();
            let mut groups: Vec<String> = objects.iter().map(|o| format!("object_{o:02}")).collect();
            groups.push("all".into());
            let series: Vec<(String, Vec<ErrorStats>)> = reports
                .iter()
                .map(|r| {
                    let mut v: Vec<ErrorStats> =
                        objects.iter().map(|o| r.per_object.get(o).copied().unwrap_or_else(|| ErrorStats::of(std::iter::empty()))).collect();
                    v.push(r.overall);
                    (r.config_id.clone(), v)
                })
                .collect();
            write_plots(&out, &name, "Per-object error", &groups, &series)?;
            if args.analysis == Analysis::Baseline {
                let table = baseline_table(&reports[0], &reports[1]);
                write_file(&out, "baseline.csv", &baseline_csv(&table))?;
                let (_, _, _, gain) = table.last().expect("overall row");
                println!("relative position-error reduction of {} over {}: {:.1}%", labels[0], labels[1], gain * 100.0);
            }
        }
        Analysis::Occlusion => {
            let rows: Vec<SummaryRow> = reports.iter().flat_map(bucket_rows).collect();
            write_file(&out, "summary.csv", &summary_csv(&name, &rows))?;
            let groups: Vec<String> = BUCKET_LABELS.iter().map(|s| s.to_string()).collect();
            let series: Vec<(String, Vec<ErrorStats>)> = reports.iter().map(|r| (r.config_id.clone(), r.buckets.to_vec())).collect();
            write_plots(&out, &name, "Error by occlusion level", &groups, &series)?;
            for r in &reports {
                for (b, label) in BUCKET_LABELS.iter().enumerate() {
                    println!("  {} {label}: {} samples, position {} cm", r.config_id, r.buckets[b].position_cm.count, r.buckets[b].position_cm.fmt_pm(3));
                }
            }
        }
        Analysis::Sweep | Analysis::Ablation => {
            write_file(&out, "summary.csv", &summary_csv(&name, &overall_rows()))?;
            let stats: Vec<ErrorStats> = reports.iter().map(|r| r.overall).collect();
            let title = if args.analysis == Analysis::Sweep { "Error by tactile point budget" } else { "Ablations" };
            write_plots(&out, &name, title, &labels, &[("overall".into(), stats.clone())])?;
            if args.analysis == Analysis::Ablation {
                let rows: Vec<(String, ErrorStats)> = labels.iter().cloned().zip(stats).collect();
                write_file(&out, "ablation.md", &ablation_table(&rows))?;
            }
        }
    }
    println!("reports written to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_labels() {
        assert_eq!(parse_range("0.75:0.95").unwrap(), (0.75, 0.95));
        assert!(parse_range("0.9:0.8").is_err());
        assert!(parse_range("0.9").is_err());
        assert_eq!(split_label("ours=runs/a/best.vtf"), (Some("ours"), Path::new("runs/a/best.vtf")));
        assert_eq!(default_label(Path::new("runs/full/best.vtf")), "full");
    }
}
