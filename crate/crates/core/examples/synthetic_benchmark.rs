//! Runs several strategies on the Gaussian-mixture benchmark and prints the
//! mean accuracy curves.
//!
//! ```text
//! cargo run --release --example synthetic_benchmark -- [sigma] [seeds] [max_clusters]
//! ```

use std::time::Instant;

use ntkcpl::harness::{self, ExperimentConfig};
use ntkcpl::model::{self, InitScheme, TrainConfig};
use ntkcpl::strategies::{FeatureSource, StrategyName, StrategySpec};
use ntkcpl::synthetic::{gaussian_mixture, MixtureConfig};

fn main() -> ntkcpl::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).map_or(0.27, |s| s.parse().expect("sigma"));
    let seeds: u64 = args.get(2).map_or(5, |s| s.parse().expect("seeds"));
    let max_clusters: usize = args.get(3).map_or(16, |s| s.parse().expect("max clusters"));
    let normalize = std::env::var("NTK_NORMALIZE").is_ok();
    let width: usize = std::env::var("NTK_WIDTH").map_or(256, |s| s.parse().expect("width"));
    let mix = MixtureConfig { sigma, ..Default::default() };
    let (train, test) = gaussian_mixture(&mix)?;

    // full-data linear probe as a difficulty reference
    let cfg = TrainConfig { hidden_width: 64, ..Default::default() };
    let init = model::init_mlp(train.dim(), 64, 8, InitScheme::Standard, false, &mut ntkcpl::seeded_rng(0))?;
    let clf = model::train_classifier(&init, train.features(), train.labels().unwrap(), &cfg)?;
    println!("sigma {sigma}: full-pool classifier accuracy {:.4}", harness::accuracy(&clf, &test)?);

    let specs = [
        StrategySpec::new(StrategyName::Random),
        StrategySpec::new(StrategyName::Entropy),
        StrategySpec::new(StrategyName::Ntkcpl).with_source(FeatureSource::ActiveLearning),
    ];
    let mut records = Vec::new();
    for mut spec in specs {
        spec.ntk.normalize_inputs = normalize;
        spec.ntk.width = width;
        let mut cfg = ExperimentConfig::new("train".into(), "test".into(), spec);
        cfg.seeds = (0..seeds).collect();
        cfg.candidate_size = 500;
        cfg.max_clusters = max_clusters;
        let t = Instant::now();
        let runs = harness::run_on(&cfg, &train, &test)?;
        println!("{}: {:.1}s", cfg.strategy.label(), t.elapsed().as_secs_f64());
        records.extend(runs.into_iter().flat_map(|r| r.records));
    }
    let summary = harness::summarize(&records);
    for (name, curve) in &summary.strategies {
        let line: Vec<String> = curve.iter().map(|p| format!("{:.3}", p.mean)).collect();
        println!("{name:>12}: {}", line.join(" "));
    }
    for (name, r) in &summary.effective_budget_ratio {
        println!("ratio {name}: {r:.2}");
    }
    for r in records.iter().filter(|r| r.strategy == "ntkcpl(al)") {
        if let (Some(e), Some(t)) = (r.estimated_coverage, r.true_coverage) {
            print!("{:+.2} ", e - t);
        }
    }
    println!();
    let ntk: Vec<_> = records.iter().filter(|r| r.strategy == "ntkcpl(al)").collect();
    for round in 0..10 {
        let rs: Vec<_> = ntk.iter().filter(|r| r.round == round && r.p_nff.is_some()).collect();
        let n = rs.len() as f64;
        let avg = |f: &dyn Fn(&&&harness::MetricsRecord) -> f64| rs.iter().map(f).sum::<f64>() / n;
        println!(
            "round {round}: est {:.3} true {:.3} nff {:.3} fnf {:.3}",
            avg(&|r| r.estimated_coverage.unwrap()),
            avg(&|r| r.true_coverage.unwrap()),
            avg(&|r| r.p_nff.unwrap()),
            avg(&|r| r.p_fnf.unwrap())
        );
    }
    Ok(())
}
