//! Experiment orchestration: config, the seeded active-learning loop, and
//! report files.
//!
//! Each seed runs independently: an initial round labels the candidate
//! nearest each of `initial_budget` k-means centroids (self features), then
//! every scheduled round selects with the configured strategy, queries the
//! oracle, retrains the classifier from scratch, and evaluates it on the test
//! set. After every round the next candidate subset is drawn and diagnostics
//! (pseudo-labels, coverage, error decomposition) are computed on it with the
//! same random stream the next selection uses.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, CurvePoint, DiagnosticReport};
use crate::clustering::{self, ClusterCountRule, Cpl};
use crate::dataset::{self, ALState, FeatureSet, Format};
use crate::model::{self, InitScheme, MlpParams, TrainConfig};
use crate::strategies::{self, FeatureSource, SelectionContext, SelectionRow, StrategyName, StrategySpec};
use crate::{Error, Result};

fn default_candidate_size() -> usize {
    10_000
}

fn default_true() -> bool {
    true
}

fn default_max_iter() -> usize {
    clustering::DEFAULT_MAX_ITER
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatName {
    Binary,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    /// Defaults to the file extension (`.csv` or binary).
    #[serde(default)]
    pub format: Option<FormatName>,
    pub strategy: StrategySpec,
    /// Query size of every round after the initial one.
    pub schedule: Vec<usize>,
    pub initial_budget: usize,
    pub max_clusters: usize,
    #[serde(default = "default_candidate_size")]
    pub candidate_size: usize,
    #[serde(default)]
    pub cluster_rule: ClusterCountRule,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Compute coverage and error diagnostics every round.
    #[serde(default = "default_true")]
    pub diagnostics: bool,
    #[serde(default = "default_max_iter")]
    pub kmeans_max_iter: usize,
}

impl ExperimentConfig {
    /// Config with the given data paths, strategy, and defaults elsewhere.
    pub fn new(train_path: PathBuf, test_path: PathBuf, strategy: StrategySpec) -> Self {
        ExperimentConfig {
            train_path,
            test_path,
            format: None,
            strategy,
            schedule: vec![8; 9],
            initial_budget: 8,
            max_clusters: 100,
            candidate_size: default_candidate_size(),
            cluster_rule: ClusterCountRule::default(),
            train: TrainConfig::default(),
            seeds: vec![0],
            output_dir: None,
            diagnostics: true,
            kmeans_max_iter: default_max_iter(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        // relative data paths are resolved against the config's directory
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.train_path, &mut cfg.test_path] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
            if let Some(out) = cfg.output_dir.as_mut() {
                if out.is_relative() {
                    *out = dir.join(&*out);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() || self.schedule.contains(&0) {
            return Err(Error::Config("schedule must be nonempty with every entry >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.initial_budget == 0 {
            return Err(Error::Config("initial_budget must be at least 1".into()));
        }
        if self.max_clusters < self.initial_budget {
            return Err(Error::Config(format!(
                "max_clusters {} is below initial_budget {}",
                self.max_clusters, self.initial_budget
            )));
        }
        if self.candidate_size == 0 {
            return Err(Error::Config("candidate_size must be at least 1".into()));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.strategy.validate()
    }

    fn format_for(&self, path: &Path) -> Format {
        match self.format {
            Some(FormatName::Binary) => Format::Binary,
            Some(FormatName::Csv) => Format::Csv,
            None => Format::from_path(path),
        }
    }
}

/// One evaluation point of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub round: usize,
    pub total_labels: usize,
    pub strategy: String,
    pub test_accuracy: f64,
    pub estimated_coverage: Option<f64>,
    pub true_coverage: Option<f64>,
    pub p_nff: Option<f64>,
    pub p_fnf: Option<f64>,
    pub wallclock_select_seconds: f64,
}

/// Everything one seed produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub selections: Vec<SelectionRow>,
    pub diagnostics: Vec<DiagnosticReport>,
    pub pseudo_labels: Vec<RoundCpl>,
}

/// Pseudo-labels behind one diagnostic report, keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundCpl {
    pub round: usize,
    pub sample_ids: Vec<u64>,
    pub truth: Vec<usize>,
    pub cpl: Cpl,
}

/// Labels the candidate nearest to each of `b0` k-means centroids.
pub fn initial_selection(
    features: ArrayView2<'_, f64>,
    candidate: &[usize],
    b0: usize,
    rng: &mut impl rand::Rng,
    max_iter: usize,
) -> Result<Vec<usize>> {
    let b0 = b0.min(candidate.len());
    let x = features.select(Axis(0), candidate);
    let km = clustering::kmeans(x.view(), b0, rng, max_iter)?;
    let mut taken = vec![false; candidate.len()];
    let mut out = Vec::with_capacity(b0);
    for centroid in km.centroids.outer_iter() {
        let mut best: Option<(usize, f64)> = None;
        for (k, row) in x.outer_iter().enumerate() {
            if taken[k] {
                continue;
            }
            let d: f64 = row.iter().zip(centroid.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        let (k, _) = best.expect("b0 <= candidates");
        taken[k] = true;
        out.push(candidate[k]);
    }
    Ok(out)
}

fn train_round(features: &FeatureSet, state: &ALState, cfg: &TrainConfig, seed: u64) -> Result<MlpParams> {
    let idx = state.labeled_indices();
    let x = features.select_rows(&idx);
    let init = model::init_mlp(
        features.dim(),
        cfg.hidden_width,
        features.num_classes(),
        InitScheme::Standard,
        false,
        &mut crate::seeded_rng(seed),
    )?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    model::train_classifier(&init, x.view(), &state.labeled_labels(), &cfg)
}

pub fn accuracy(classifier: &MlpParams, test: &FeatureSet) -> Result<f64> {
    let truth = test
        .labels()
        .ok_or_else(|| Error::Precondition("the test set carries no labels".into()))?;
    let preds = classifier.predict(test.features())?;
    Ok(preds.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

fn mix(seed: u64, stream: u64, round: usize) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 32)).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z ^ (z >> 32)
}

fn context<'a>(
    state: &'a ALState,
    features: ArrayView2<'a, f64>,
    num_classes: usize,
    classifier: &'a MlpParams,
    cpl: Option<&'a Cpl>,
    round: usize,
) -> SelectionContext<'a> {
    SelectionContext {
        state,
        features,
        num_classes,
        classifier: Some(classifier),
        cpl: cpl.map(|c| (&c.labels[..], c.num_clusters)),
        round,
    }
}

/// Pseudo-labels for a round. Selection and diagnostics of the same round
/// draw from the same stream, so they see identical clusters.
fn round_cpl(cfg: &ExperimentConfig, ctx: &SelectionContext<'_>, source: FeatureSource, n_clu: usize, seed: u64) -> Result<Cpl> {
    let mut rng = crate::seeded_rng(mix(seed, 3, ctx.round));
    strategies::pseudo_labels(ctx, source, cfg.initial_budget, n_clu, &mut rng, cfg.kmeans_max_iter)
}

fn cpl_source(spec: &StrategySpec) -> FeatureSource {
    if spec.name == StrategyName::Ntkcpl {
        spec.feature_source
    } else {
        FeatureSource::ActiveLearning
    }
}

/// Runs one seed of `cfg` on in-memory data.
pub fn run_seed(cfg: &ExperimentConfig, train: &FeatureSet, test: &FeatureSet, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let truth = train
        .labels()
        .ok_or_else(|| Error::Precondition("the training pool carries no oracle labels".into()))?;
    if test.dim() != train.dim() {
        return Err(Error::Shape(format!("test dim {} differs from train dim {}", test.dim(), train.dim())));
    }
    let mut spec = cfg.strategy.clone();
    spec.seed = mix(spec.seed, seed, 0);
    let label = spec.label();
    let features = train.features();
    let num_classes = train.num_classes();
    let mut state = ALState::new(train.len(), cfg.schedule.clone(), cfg.initial_budget);
    let mut cand_rng = crate::seeded_rng(mix(seed, 1, 0));
    let mut out = RunOutput {
        seed,
        records: Vec::new(),
        selections: Vec::new(),
        diagnostics: Vec::new(),
        pseudo_labels: Vec::new(),
    };
    let n_clu_for = |state: &ALState, round: usize, prev: usize| {
        let b = cfg.schedule.get(round.wrapping_sub(1)).copied().unwrap_or(0);
        clustering::cluster_count(
            cfg.cluster_rule,
            state.labeled().len(),
            b,
            cfg.initial_budget,
            cfg.max_clusters,
            round,
            prev,
        )
    };

    dataset::sample_candidate_subset(&mut state, cfg.candidate_size, &mut cand_rng)?;
    if cfg.initial_budget > state.candidate().len() {
        log::warn!("initial budget {} truncated to {} candidates", cfg.initial_budget, state.candidate().len());
    }
    let t0 = Instant::now();
    let mut km_rng = crate::seeded_rng(mix(seed, 2, 0));
    let mut picked = initial_selection(features, state.candidate(), cfg.initial_budget, &mut km_rng, cfg.kmeans_max_iter)?;
    let mut select_seconds = t0.elapsed().as_secs_f64();
    let mut classifier: Option<MlpParams> = None;
    let mut clusters = cfg.initial_budget;

    for round in 0..=cfg.schedule.len() {
        if let Some(clf) = classifier.as_ref() {
            let wanted = cfg.schedule[round - 1];
            if state.unlabeled().is_empty() {
                log::warn!("round {round}: the unlabeled pool is exhausted");
                break;
            }
            if state.candidate().is_empty() {
                dataset::sample_candidate_subset(&mut state, cfg.candidate_size, &mut cand_rng)?;
            }
            let available = if spec.name == StrategyName::Random {
                state.unlabeled().len()
            } else {
                state.candidate().len()
            };
            let b = wanted.min(available);
            if b < wanted {
                log::warn!("round {round}: budget {wanted} truncated to {b}");
            }
            let t = Instant::now();
            let cpl = if spec.name == StrategyName::Ntkcpl {
                clusters = n_clu_for(&state, round, clusters);
                let ctx = context(&state, features, num_classes, clf, None, round);
                Some(round_cpl(cfg, &ctx, spec.feature_source, clusters, seed)?)
            } else {
                None
            };
            let ctx = context(&state, features, num_classes, clf, cpl.as_ref(), round);
            picked = strategies::select(&spec, &ctx, b)?;
            select_seconds = t.elapsed().as_secs_f64();
        }
        dataset::query_oracle(&mut state, train, &picked)?;
        for (step, &i) in picked.iter().enumerate() {
            out.selections.push(SelectionRow {
                round,
                step,
                sample_id: train.ids()[i],
                strategy: label.clone(),
            });
        }
        state.round = round;
        let clf = train_round(train, &state, &cfg.train, mix(seed, 4, round))?;
        let mut record = MetricsRecord {
            seed,
            round,
            total_labels: state.labeled().len(),
            strategy: label.clone(),
            test_accuracy: accuracy(&clf, test)?,
            estimated_coverage: None,
            true_coverage: None,
            p_nff: None,
            p_fnf: None,
            wallclock_select_seconds: select_seconds,
        };
        if !state.unlabeled().is_empty() {
            // candidates (and pseudo-labels) for the next round
            dataset::sample_candidate_subset(&mut state, cfg.candidate_size, &mut cand_rng)?;
            if cfg.diagnostics {
                let next = round + 1;
                let n_clu = n_clu_for(&state, next, clusters);
                let ctx = context(&state, features, num_classes, &clf, None, next);
                let cpl = round_cpl(cfg, &ctx, cpl_source(&spec), n_clu, seed)?;
                let pool = strategies::build_kernel_pool(
                    features,
                    &state,
                    cpl.num_clusters,
                    &spec.ntk,
                    strategies::round_seed(&spec, next),
                )?;
                let pos_truth: Vec<usize> = pool.positions.iter().map(|&i| truth[i]).collect();
                let preds = clf.predict(features.select(Axis(0), state.candidate()).view())?;
                let report = analysis::diagnose(round, &pool, &cpl, &pos_truth, num_classes, &preds)?;
                record.estimated_coverage = Some(report.estimated_coverage);
                record.true_coverage = report.true_coverage;
                record.p_nff = Some(report.decomposition.p_nff);
                record.p_fnf = Some(report.decomposition.p_fnf);
                out.diagnostics.push(report);
                out.pseudo_labels.push(RoundCpl {
                    round,
                    sample_ids: pool.positions.iter().map(|&i| train.ids()[i]).collect(),
                    truth: pos_truth,
                    cpl,
                });
            }
        }
        log::info!(
            "seed {seed} round {round}: {} labels, accuracy {:.4}",
            record.total_labels,
            record.test_accuracy
        );
        out.records.push(record);
        classifier = Some(clf);
    }
    Ok(out)
}

/// Runs every seed (in parallel, results in seed order) on in-memory data.
pub fn run_on(cfg: &ExperimentConfig, train: &FeatureSet, test: &FeatureSet) -> Result<Vec<RunOutput>> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&seed| run_seed(cfg, train, test, seed)).collect()
}

/// Loads the configured data, runs every seed, and writes outputs when an
/// output directory is configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let train = FeatureSet::load(&cfg.train_path, cfg.format_for(&cfg.train_path))?;
    let test = FeatureSet::load(&cfg.test_path, cfg.format_for(&cfg.test_path))?;
    let runs = run_on(cfg, &train, &test)?;
    if let Some(dir) = &cfg.output_dir {
        write_run_outputs(&runs, dir)?;
    }
    let records: Vec<MetricsRecord> = runs.into_iter().flat_map(|r| r.records).collect();
    if let Some(dir) = &cfg.output_dir {
        emit_report(&records, dir)?;
    }
    Ok(records)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Per-seed selection CSVs plus per-round diagnostic JSON, pseudo-label and
/// purity files.
pub fn write_run_outputs(runs: &[RunOutput], dir: &Path) -> Result<()> {
    let diag_dir = dir.join("diagnostics");
    create_dir(&diag_dir)?;
    for run in runs {
        strategies::write_selections(&dir.join(format!("selections_seed{}.csv", run.seed)), &run.selections)?;
        for report in &run.diagnostics {
            report.save_json(&diag_dir.join(format!("seed{}_round{}.json", run.seed, report.round)))?;
        }
        for rc in &run.pseudo_labels {
            let stem = format!("seed{}_round{}", run.seed, rc.round);
            rc.cpl.write_csv(&diag_dir.join(format!("{stem}_cpl.csv")), &rc.sample_ids)?;
            rc.cpl.write_purity_csv(&diag_dir.join(format!("{stem}_purity.csv")), Some(&rc.truth))?;
        }
    }
    Ok(())
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Accuracy curve per strategy label: `(labels, mean, std)` over seeds.
pub fn curves(records: &[MetricsRecord]) -> BTreeMap<String, Vec<CurvePoint>> {
    let mut grouped: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in records {
        grouped
            .entry(r.strategy.clone())
            .or_default()
            .entry(r.total_labels)
            .or_default()
            .push(r.test_accuracy);
    }
    grouped
        .into_iter()
        .map(|(name, by_budget)| {
            let points = by_budget
                .into_iter()
                .map(|(labels, accs)| {
                    let (mean, std) = mean_std(&accs);
                    CurvePoint { labels, mean, std }
                })
                .collect();
            (name, points)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategies: BTreeMap<String, Vec<CurvePoint>>,
    /// Effective budget ratio against `random`, when it was run.
    pub effective_budget_ratio: BTreeMap<String, f64>,
}

pub fn summarize(records: &[MetricsRecord]) -> Summary {
    let strategies = curves(records);
    let mut effective_budget_ratio = BTreeMap::new();
    if let Some(base) = strategies.get("random") {
        for (name, curve) in &strategies {
            match analysis::effective_budget_ratio(curve, base) {
                Ok(r) => {
                    effective_budget_ratio.insert(name.clone(), r);
                }
                Err(e) => log::warn!("no effective budget ratio for {name}: {e}"),
            }
        }
    }
    Summary {
        strategies,
        effective_budget_ratio,
    }
}

/// File-name-safe form of a strategy label: `ntkcpl(al)` → `ntkcpl_al`.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .filter(|&c| c != ')')
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes `metrics.csv`, `summary.json`, `plot_<strategy>.csv` and
/// `effective_budget_ratio.csv` into `dir`.
pub fn emit_report(records: &[MetricsRecord], dir: &Path) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Precondition("no records to report".into()));
    }
    create_dir(dir)?;
    write_metrics_csv(records, &dir.join("metrics.csv"))?;
    let summary = summarize(records);
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for (name, curve) in &summary.strategies {
        let path = dir.join(format!("plot_{}.csv", file_stem(name)));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["budget", "mean", "std"]).map_err(|e| Error::Format(e.to_string()))?;
        for p in curve {
            w.write_record([p.labels.to_string(), p.mean.to_string(), p.std.to_string()])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("effective_budget_ratio.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["strategy", "effective_budget_ratio"]).map_err(|e| Error::Format(e.to_string()))?;
    for (name, r) in &summary.effective_budget_ratio {
        w.write_record([name.clone(), r.to_string()]).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
