use std::fs;
use std::path::Path;

use ntkcpl::dataset::{FeatureSet, Format};
use ntkcpl::harness::{self, ExperimentConfig, MetricsRecord};
use ntkcpl::strategies::{FeatureSource, StrategyName, StrategySpec};
use ntkcpl::synthetic::{gaussian_mixture, MixtureConfig};

fn data() -> (FeatureSet, FeatureSet) {
    gaussian_mixture(&MixtureConfig {
        num_classes: 3,
        dim: 6,
        train_size: 150,
        test_size: 60,
        separation: 2.0,
        sigma: 0.3,
        seed: 7,
    })
    .unwrap()
}

fn config(name: StrategyName) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new("train.bin".into(), "test.bin".into(), StrategySpec::new(name));
    cfg.initial_budget = 5;
    cfg.schedule = vec![5, 5];
    cfg.max_clusters = 10;
    cfg.candidate_size = 60;
    cfg.train.epochs = 10;
    cfg.seeds = vec![0, 1];
    cfg
}

fn csv_without_wallclock(records: &[MetricsRecord], dir: &Path) -> String {
    let mut stripped = records.to_vec();
    for r in &mut stripped {
        r.wallclock_select_seconds = 0.0;
    }
    let path = dir.join("m.csv");
    harness::write_metrics_csv(&stripped, &path).unwrap();
    fs::read_to_string(path).unwrap()
}

#[test]
fn every_strategy_runs_three_rounds_per_seed() {
    let (train, test) = data();
    let names = [
        StrategyName::Random,
        StrategyName::Entropy,
        StrategyName::Coreset,
        StrategyName::Badge,
        StrategyName::Lookahead,
        StrategyName::Ntkcpl,
    ];
    for name in names {
        let runs = harness::run_on(&config(name), &train, &test).unwrap();
        let records: Vec<&MetricsRecord> = runs.iter().flat_map(|r| &r.records).collect();
        assert_eq!(records.len(), 6, "{name:?}");
        for run in &runs {
            let labels: Vec<usize> = run.records.iter().map(|r| r.total_labels).collect();
            assert_eq!(labels, vec![5, 10, 15], "{name:?}");
            let ids: std::collections::BTreeSet<u64> = run.selections.iter().map(|s| s.sample_id).collect();
            assert_eq!(ids.len(), 15, "{name:?}: a sample was queried twice");
            assert!(run.records.iter().all(|r| (0.0..=1.0).contains(&r.test_accuracy)));
        }
    }
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let (train, test) = data();
    let dir = tempfile::tempdir().unwrap();
    for spec in [
        StrategySpec::new(StrategyName::Ntkcpl).with_source(FeatureSource::ActiveLearning),
        StrategySpec::new(StrategyName::Badge),
    ] {
        let mut cfg = config(spec.name);
        cfg.strategy = spec;
        let run = |cfg: &ExperimentConfig| -> Vec<MetricsRecord> {
            harness::run_on(cfg, &train, &test).unwrap().into_iter().flat_map(|r| r.records).collect()
        };
        let a = csv_without_wallclock(&run(&cfg), dir.path());
        let b = csv_without_wallclock(&run(&cfg), dir.path());
        assert_eq!(a, b);
        cfg.seeds = vec![2, 3];
        assert_ne!(a, csv_without_wallclock(&run(&cfg), dir.path()));
    }
}

#[test]
fn experiment_from_a_config_file_writes_every_output() {
    let (train, test) = data();
    let dir = tempfile::tempdir().unwrap();
    train.save(&dir.path().join("train.bin"), Format::Binary).unwrap();
    test.save(&dir.path().join("test.csv"), Format::Csv).unwrap();
    let text = r#"{
        "train_path": "train.bin",
        "test_path": "test.csv",
        "strategy": {"name": "ntkcpl", "feature_source": "active_learning", "ntk": {"width": 64}},
        "schedule": [5, 5],
        "initial_budget": 5,
        "max_clusters": 10,
        "candidate_size": 60,
        "train": {"epochs": 10},
        "seeds": [4],
        "output_dir": "out"
    }"#;
    let path = dir.path().join("config.json");
    fs::write(&path, text).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    let records = harness::run_experiment(&cfg).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.strategy == "ntkcpl(al)"));

    let out = dir.path().join("out");
    for name in [
        "metrics.csv",
        "summary.json",
        "plot_ntkcpl_al.csv",
        "effective_budget_ratio.csv",
        "selections_seed4.csv",
        "diagnostics/seed4_round0.json",
        "diagnostics/seed4_round0_cpl.csv",
        "diagnostics/seed4_round0_purity.csv",
    ] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let selections = fs::read_to_string(out.join("selections_seed4.csv")).unwrap();
    assert_eq!(selections.lines().count(), 1 + 15);
    assert_eq!(harness::read_metrics_csv(&out.join("metrics.csv")).unwrap(), records);
    // the last round leaves pool samples, so it is diagnosed too
    assert!(out.join("diagnostics/seed4_round2.json").is_file());
}

#[test]
fn budgets_beyond_the_candidates_are_truncated() {
    let (train, test) = data();
    let mut cfg = config(StrategyName::Entropy);
    cfg.candidate_size = 3;
    cfg.initial_budget = 2;
    cfg.schedule = vec![5];
    cfg.seeds = vec![0];
    let runs = harness::run_on(&cfg, &train, &test).unwrap();
    let labels: Vec<usize> = runs[0].records.iter().map(|r| r.total_labels).collect();
    assert_eq!(labels, vec![2, 5]);

    // random draws from the whole pool, so only the pool size limits it
    let mut cfg = config(StrategyName::Random);
    cfg.candidate_size = 3;
    cfg.initial_budget = 2;
    cfg.schedule = vec![500];
    cfg.seeds = vec![0];
    let runs = harness::run_on(&cfg, &train, &test).unwrap();
    let labels: Vec<usize> = runs[0].records.iter().map(|r| r.total_labels).collect();
    assert_eq!(labels, vec![2, 150]);
}

#[test]
fn invalid_configs_are_rejected() {
    let (train, test) = data();
    let mut cfg = config(StrategyName::Random);
    cfg.schedule = vec![];
    assert!(matches!(harness::run_on(&cfg, &train, &test), Err(ntkcpl::Error::Config(_))));
    let mut cfg = config(StrategyName::Random);
    cfg.max_clusters = 1;
    assert!(matches!(harness::run_on(&cfg, &train, &test), Err(ntkcpl::Error::Config(_))));
    assert!(matches!(
        ExperimentConfig::from_json(r#"{"bogus": 1}"#),
        Err(ntkcpl::Error::Config(_))
    ));
}
