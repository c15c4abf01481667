//! End to end through the public API: generate to disk, reopen, train a
//! small network, evaluate and re-read the per-sample CSV.

use vtpose::config::ExperimentConfig;
use vtpose::dataset::{build_manifest, carve_validation, collect_objects, occlusion_bucket, write_dataset, Dataset, Split};
use vtpose::evaluation::{evaluate, parse_results_csv, results_csv, EvalReport, EvalSet, ErrorStats, OraclePredictor};
use vtpose::fusionnet::{Ablation, Network, NetworkConfig};
use vtpose::simworld::SimConfig;
use vtpose::training::{train_new, TrainConfig, TrainOutput};

fn small_network() -> NetworkConfig {
    NetworkConfig {
        n_points: 24,
        color_hidden: 4,
        color_embed_dim: 8,
        geom_hidden: 8,
        geom_embed_dim: 8,
        global_dim: 8,
        head_hidden: 16,
        ..NetworkConfig::default()
    }
}

#[test]
fn generate_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        sim: SimConfig { trajectories: 5, instances: 2, ..SimConfig::default() },
        network: small_network(),
        train: TrainConfig { epochs: 6, learning_rate: 3e-3, batch_size: 4, validation_trajectories: 1, ..TrainConfig::default() },
    };
    let text = cfg.to_toml().unwrap();

    let records = collect_objects(&[2, 7], &cfg.sim).unwrap();
    let manifest = build_manifest(&records, &cfg.sim, &text, cfg.sim.seed).unwrap();
    write_dataset(&records, &manifest, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest.samples.len(), 20);
    assert_eq!(ds.entries(Split::Test).len(), 4);

    let train_entries = ds.entries(Split::Train);
    let (fit, val) = carve_validation(&train_entries, cfg.train.validation_trajectories);
    assert_eq!((fit.len(), val.len()), (12, 4));
    let fit = EvalSet::from_records(&ds.read_all(&fit).unwrap(), &ds.manifest.camera);
    let val = EvalSet::from_records(&ds.read_all(&val).unwrap(), &ds.manifest.camera);

    let out = dir.path().join("run");
    let outcome = train_new(cfg.network.clone(), &fit.samples, &val.samples, &cfg.train, &TrainOutput { dir: Some(out.clone()) }).unwrap();
    assert_eq!(outcome.curve.len(), 7);
    assert!(outcome.curve.iter().all(|e| e.validation_l.is_some()));
    let best = Network::load(cfg.network.clone(), &out.join("best.vtf")).unwrap();
    assert_eq!(best.params.len(), outcome.best.params.len());

    let test_records = ds.read_all(&ds.entries(Split::Test)).unwrap();
    let test = EvalSet::from_records(&test_records, &ds.manifest.camera);
    let run = evaluate(&best, &test, "small", 3).unwrap();
    let report = EvalReport::from_run(&run);
    assert_eq!(report.total(), 4);
    assert_eq!(report.buckets.iter().map(|b| b.position_cm.count).sum::<usize>(), report.evaluated);

    // The report is a pure function of the per-sample CSV.
    let back = parse_results_csv(&results_csv(&run.results)).unwrap();
    let again = ErrorStats::of(&back);
    assert!((again.position_cm.mean - report.overall.position_cm.mean).abs() < 1e-9);
    assert!((again.angular_deg.mean - report.overall.angular_deg.mean).abs() < 1e-9);
    for r in &back {
        assert_eq!(occlusion_bucket(r.occlusion), occlusion_bucket(test_records.iter().find(|t| t.id == r.sample_id).unwrap().occlusion));
    }

    // Same seed, same evaluation.
    let rerun = evaluate(&best, &test, "small", 3).unwrap();
    assert_eq!(rerun.results, run.results);

    let oracle = EvalReport::from_run(&evaluate(&OraclePredictor::default(), &test, "oracle", 0).unwrap());
    assert_eq!(oracle.overall.position_cm.mean, 0.0);
    assert_eq!(oracle.overall.angular_deg.mean, 0.0);
}

#[test]
fn vision_only_checkpoint_does_not_load_as_full() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::new(small_network().with_ablation(Ablation::VisionOnly), 1).unwrap();
    let path = dir.path().join("v.vtf");
    net.save(&path).unwrap();
    let err = Network::load(small_network(), &path).unwrap_err().to_string();
    assert!(err.contains("head.tac") || err.contains("tactile."), "{err}");
}
