mod common;

use common::{naive_regression, random_gram, zero_f0_system};
use ndarray::Array2;
use ntkcpl::analysis::{decompose_error, label_map_g, proposition_deviation, verify_proposition};
use ntkcpl::harness::{self, summarize, ExperimentConfig};
use ntkcpl::ntk::one_hot;
use ntkcpl::seeded_rng;
use ntkcpl::strategies::{StrategyName, StrategySpec};
use ntkcpl::synthetic::{gaussian_mixture, MixtureConfig};
use ntkcpl::Error;
use proptest::prelude::*;
use rand::Rng;

struct Instance {
    gram: Array2<f64>,
    ridge: f64,
    labeled: Vec<usize>,
    query: Vec<usize>,
    y_true: Vec<usize>,
    y_cpl: Vec<usize>,
    dominance: Vec<usize>,
    classes: usize,
}

/// Random kernel, labeled set and pseudo-labels where every labeled sample
/// sits in a cluster its class dominates.
fn instance(seed: u64) -> Instance {
    let mut rng = seeded_rng(seed);
    let m = rng.random_range(6..30);
    let l = rng.random_range(1..m - 1);
    let classes = rng.random_range(2..5);
    let n_clu = classes + rng.random_range(0..6);
    let gram = random_gram(m, rng.random_range(2..m + 4), &mut rng);
    let ridge = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(1e-3..1.0) } + 1e-6;
    let mut dominance: Vec<usize> = (0..classes).collect();
    dominance.extend((classes..n_clu).map(|_| rng.random_range(0..classes)));
    let y_true: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
    let y_cpl: Vec<usize> = y_true
        .iter()
        .map(|&y| {
            let options: Vec<usize> = (0..n_clu).filter(|&k| dominance[k] == y).collect();
            options[rng.random_range(0..options.len())]
        })
        .collect();
    Instance {
        gram,
        ridge,
        labeled: (m - l..m).collect(),
        query: (0..m - l).collect(),
        y_true,
        y_cpl,
        dominance,
        classes,
    }
}

fn pick(v: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Both sides of the identity computed from scratch.
fn oracle_deviation(inst: &Instance) -> f64 {
    let yl = pick(&inst.y_true, &inst.labeled);
    let cl = pick(&inst.y_cpl, &inst.labeled);
    let f_y = naive_regression(inst.gram.view(), inst.ridge, &inst.labeled, one_hot(&yl, inst.classes).view(), &inst.query);
    let f_c = naive_regression(
        inst.gram.view(),
        inst.ridge,
        &inst.labeled,
        one_hot(&cl, inst.dominance.len()).view(),
        &inst.query,
    );
    let mut mapped = Array2::<f64>::zeros(f_y.dim());
    for (k, &j) in inst.dominance.iter().enumerate() {
        for r in 0..mapped.nrows() {
            mapped[[r, j]] += f_c[[r, k]];
        }
    }
    (&f_y - &mapped).iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn system(inst: &Instance) -> ntkcpl::ntk::KernelSystem {
    let mut sys = zero_f0_system(inst.gram.clone(), inst.dominance.len())
        .with_ridge(inst.ridge)
        .unwrap();
    sys.set_labeled(&inst.labeled).unwrap();
    sys
}

#[test]
fn proposition_holds_on_random_instances() {
    for seed in 0..150 {
        let inst = instance(seed);
        let sys = system(&inst);
        let got = verify_proposition(
            &sys,
            &pick(&inst.y_true, &inst.labeled),
            &pick(&inst.y_cpl, &inst.labeled),
            &inst.dominance,
            inst.classes,
            &inst.query,
        )
        .unwrap();
        assert!(got < 1e-8, "seed {seed}: {got}");
        assert!(oracle_deviation(&inst) < 1e-8, "seed {seed}");
    }
}

#[test]
fn dominance_violation_breaks_the_identity() {
    // two well-separated points, each alone in its own cluster; the second
    // labeled point's cluster claims the wrong class
    let gram = ndarray::array![[1.0, 0.0, 0.9], [0.0, 1.0, 0.1], [0.9, 0.1, 1.0]];
    let inst = Instance {
        gram,
        ridge: 0.0,
        labeled: vec![0, 1],
        query: vec![2],
        y_true: vec![0, 1, 0],
        y_cpl: vec![0, 1, 0],
        dominance: vec![0, 0],
        classes: 2,
    };
    let sys = system(&inst);
    let (yl, cl) = (pick(&inst.y_true, &inst.labeled), pick(&inst.y_cpl, &inst.labeled));
    let dev = proposition_deviation(&sys, &yl, &cl, &inst.dominance, 2, &inst.query).unwrap();
    assert!(dev > 1e-3, "{dev}");
    assert!((dev - oracle_deviation(&inst)).abs() < 1e-12);
    assert!(matches!(
        verify_proposition(&sys, &yl, &cl, &inst.dominance, 2, &inst.query),
        Err(Error::Precondition(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn decomposition_counts_exactly_one_agreement(
        seed in any::<u64>(),
        n in 1usize..60,
        classes in 1usize..5,
        extra in 0usize..5,
    ) {
        let mut rng = seeded_rng(seed);
        let n_clu = classes + extra;
        let dominance: Vec<usize> = (0..n_clu).map(|k| if k < classes { k } else { rng.random_range(0..classes) }).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_clu)).collect();
        let y_true: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let y_cpl: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_clu)).collect();
        let d = decompose_error(&preds, &y_true, &y_cpl, &dominance).unwrap();
        let exactly_one = (0..n)
            .filter(|&i| (dominance[preds[i]] == y_true[i]) != (preds[i] == y_cpl[i]))
            .count();
        prop_assert_eq!(d.nff_count + d.fnf_count, exactly_one);
        for scaled in [d.error_cpl * n as f64, (d.p_nff + d.p_fnf) * n as f64] {
            prop_assert_eq!(scaled.round() as usize, exactly_one);
            prop_assert!((scaled - scaled.round()).abs() < 1e-9);
        }
        for v in [d.p_nff, d.p_fnf, d.error_cpl, d.impurity_share, d.overclustering_share] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn label_map_preserves_row_sums(seed in any::<u64>(), rows in 1usize..10, classes in 1usize..5, extra in 0usize..5) {
        let mut rng = seeded_rng(seed);
        let n_clu = classes + extra;
        let f = common::randn((rows, n_clu), &mut rng);
        let dominance: Vec<usize> = (0..n_clu).map(|_| rng.random_range(0..classes)).collect();
        let g = label_map_g(f.view(), &dominance, classes).unwrap();
        for (a, b) in f.sum_axis(ndarray::Axis(1)).iter().zip(g.sum_axis(ndarray::Axis(1)).iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

fn small_benchmark(name: StrategyName) -> (ExperimentConfig, ntkcpl::dataset::FeatureSet, ntkcpl::dataset::FeatureSet) {
    let (train, test) = gaussian_mixture(&MixtureConfig {
        num_classes: 4,
        dim: 8,
        train_size: 400,
        test_size: 200,
        separation: 4.0,
        sigma: 0.1,
        seed: 3,
    })
    .unwrap();
    let mut cfg = ExperimentConfig::new("unused".into(), "unused".into(), StrategySpec::new(name));
    cfg.initial_budget = 10;
    cfg.schedule = vec![10; 4];
    cfg.max_clusters = 16;
    cfg.candidate_size = 200;
    cfg.train.epochs = 30;
    cfg.seeds = vec![0, 1];
    (cfg, train, test)
}

#[test]
fn coverage_estimate_tracks_truth_on_separable_data() {
    // one pseudo-label cluster per class; splitting a compact class into
    // several clusters lowers the estimate (see the over-clustering share)
    let (mut cfg, train, test) = small_benchmark(StrategyName::Ntkcpl);
    cfg.initial_budget = 4;
    cfg.max_clusters = 4;
    cfg.schedule = vec![10, 12, 12, 12];
    let runs = harness::run_on(&cfg, &train, &test).unwrap();
    for run in &runs {
        let at_50 = run.records.iter().find(|r| r.total_labels == 50).unwrap();
        let (est, truth) = (at_50.estimated_coverage.unwrap(), at_50.true_coverage.unwrap());
        assert!((est - truth).abs() < 0.1, "seed {}: est {est} vs true {truth}", run.seed);
        for d in &run.diagnostics {
            let n = d.decomposition.num_samples as f64;
            let count = (d.decomposition.error_cpl * n).round();
            assert_eq!(count as usize, d.decomposition.nff_count + d.decomposition.fnf_count);
        }
    }
}

#[test]
fn summary_is_recomputable_from_the_metrics_csv() {
    let mut records = Vec::new();
    for name in [StrategyName::Random, StrategyName::Entropy] {
        let (mut cfg, train, test) = small_benchmark(name);
        cfg.diagnostics = false;
        cfg.schedule = vec![10; 2];
        records.extend(harness::run_on(&cfg, &train, &test).unwrap().into_iter().flat_map(|r| r.records));
    }
    let dir = tempfile::tempdir().unwrap();
    let summary = harness::emit_report(&records, dir.path()).unwrap();
    let reread = harness::read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();

    // hand-rolled mean / population std per (strategy, budget)
    for (name, curve) in &summary.strategies {
        for p in curve {
            let accs: Vec<f64> = reread
                .iter()
                .filter(|r| &r.strategy == name && r.total_labels == p.labels)
                .map(|r| r.test_accuracy)
                .collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / accs.len() as f64;
            assert!((p.mean - mean).abs() < 1e-12);
            assert!((p.std - var.sqrt()).abs() < 1e-12);
        }
    }
    assert_eq!(summarize(&reread), summary);
    let ratio = summary.effective_budget_ratio["entropy"];
    let (c, b) = (&summary.strategies["entropy"], &summary.strategies["random"]);
    let wins = c.iter().zip(b).filter(|(c, b)| c.mean > b.mean + b.std).count();
    assert_eq!(ratio, wins as f64 / c.len() as f64);
    assert_eq!(summary.effective_budget_ratio["random"], 0.0);
}
