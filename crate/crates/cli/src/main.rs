use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ntkcpl::analysis;
use ntkcpl::clustering::{self, ClusterCountRule};
use ntkcpl::dataset::{self, ALState, FeatureSet, Format};
use ntkcpl::harness::{self, ExperimentConfig};
use ntkcpl::model::{self, InitScheme, TrainConfig};
use ntkcpl::strategies::{self, FeatureSource, NtkOptions, SelectionContext, SelectionRow, StrategyName, StrategySpec};
use ntkcpl::synthetic::{self, MixtureConfig};
use ntkcpl::Error;

#[derive(Parser)]
#[command(name = "ntkcpl", version, about = "Active learning by NTK risk estimation over clustering pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FileFormat {
    Binary,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    #[value(name = "self")]
    SelfSupervised,
    Al,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a feature file between CSV and the binary format.
    Ingest {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum)]
        from: Option<FileFormat>,
        #[arg(long, value_enum)]
        to: Option<FileFormat>,
    },
    /// Write a Gaussian-mixture train/test pair.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 2000)]
        train_size: usize,
        #[arg(long, default_value_t = 2000)]
        test_size: usize,
        #[arg(long, default_value_t = 1.0)]
        separation: f64,
        #[arg(long, default_value_t = 0.27)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "binary")]
        format: FileFormat,
    },
    /// Execute an experiment config (JSON).
    Run {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// One-shot selection from a labeled list; prints selected sample ids as CSV.
    Select {
        #[arg(long)]
        features: PathBuf,
        /// CSV with columns `sample_id,label`.
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long, value_enum, default_value = "self")]
        source: Source,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value_t = 10_000)]
        candidate_size: usize,
        #[arg(long, default_value_t = 100)]
        max_clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error decomposition and coverage for a labeled list; prints JSON.
    Diagnose {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        candidate_size: usize,
        #[arg(long, default_value_t = 100)]
        max_clusters: usize,
        #[arg(long, value_enum, default_value = "al")]
        source: Source,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate metrics CSVs into summary, plot and ratio files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn format_of(path: &Path, explicit: Option<FileFormat>) -> Format {
    match explicit {
        Some(FileFormat::Binary) => Format::Binary,
        Some(FileFormat::Csv) => Format::Csv,
        None => Format::from_path(path),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Validation { .. } | Error::Shape(_) | Error::EmptyPool => 3,
        Error::NumericalRank(_) => 4,
        Error::Precondition(_) | Error::Constraint { .. } => 1,
    }
}

/// `(pool index, label)` pairs from a `sample_id,label` CSV.
fn read_labeled(path: &Path, features: &FeatureSet) -> ntkcpl::Result<Vec<(usize, usize)>> {
    let index: HashMap<u64, usize> = features.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (row, rec) in r.deserialize::<(u64, usize)>().enumerate() {
        let (id, y) = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let &i = index.get(&id).ok_or_else(|| Error::Validation {
            row,
            message: format!("sample id {id} is not in the feature file"),
        })?;
        if features.labels().is_some() && y >= features.num_classes() {
            return Err(Error::Validation {
                row,
                message: format!("label {y} outside the feature file's classes"),
            });
        }
        out.push((i, y));
    }
    Ok(out)
}

/// Labeled state, a classifier trained on it, and the class count (taken
/// from the labeled list when the feature file carries no labels).
fn one_shot(
    features: &FeatureSet,
    labeled_path: &Path,
    candidate_size: usize,
    seed: u64,
) -> ntkcpl::Result<(ALState, model::MlpParams, usize)> {
    let labeled = read_labeled(labeled_path, features)?;
    let num_classes = features
        .num_classes()
        .max(labeled.iter().map(|&(_, y)| y + 1).max().unwrap_or(0));
    let mut state = ALState::with_labeled(features.len(), &labeled)?;
    dataset::sample_candidate_subset(&mut state, candidate_size, &mut ntkcpl::seeded_rng(seed))?;
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let init = model::init_mlp(
        features.dim(),
        cfg.hidden_width,
        num_classes,
        InitScheme::Standard,
        false,
        &mut ntkcpl::seeded_rng(seed),
    )?;
    let x = features.select_rows(&state.labeled_indices());
    let clf = model::train_classifier(&init, x.view(), &state.labeled_labels(), &cfg)?;
    Ok((state, clf, num_classes))
}

fn feature_source(s: Source) -> FeatureSource {
    match s {
        Source::SelfSupervised => FeatureSource::SelfSupervised,
        Source::Al => FeatureSource::ActiveLearning,
    }
}

fn run(cli: Cli) -> ntkcpl::Result<()> {
    match cli.command {
        Command::Ingest { input, output, from, to } => {
            let fs = FeatureSet::load(&input, format_of(&input, from))?;
            fs.save(&output, format_of(&output, to))?;
            eprintln!("wrote {} rows x {} features to {}", fs.len(), fs.dim(), output.display());
        }
        Command::Synth {
            out_dir,
            classes,
            dim,
            train_size,
            test_size,
            separation,
            sigma,
            seed,
            format,
        } => {
            let cfg = MixtureConfig {
                num_classes: classes,
                dim,
                train_size,
                test_size,
                separation,
                sigma,
                seed,
            };
            let (train, test) = synthetic::gaussian_mixture(&cfg)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io { path: out_dir.clone(), source: e })?;
            let (ext, fmt) = match format {
                FileFormat::Binary => ("bin", Format::Binary),
                FileFormat::Csv => ("csv", Format::Csv),
            };
            train.save(&out_dir.join(format!("train.{ext}")), fmt)?;
            test.save(&out_dir.join(format!("test.{ext}")), fmt)?;
        }
        Command::Run { config, output_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if output_dir.is_some() {
                cfg.output_dir = output_dir;
            }
            let records = harness::run_experiment(&cfg)?;
            for r in records.iter().filter(|r| r.round == cfg.schedule.len()) {
                println!("seed {} final accuracy {:.4} at {} labels", r.seed, r.test_accuracy, r.total_labels);
            }
        }
        Command::Select {
            features,
            labeled,
            strategy,
            source,
            budget,
            candidate_size,
            max_clusters,
            seed,
            out,
        } => {
            let fs = FeatureSet::load(&features, Format::from_path(&features))?;
            let name: StrategyName = strategy.parse()?;
            let mut spec = StrategySpec::new(name).with_source(feature_source(source));
            spec.seed = seed;
            spec.ntk = NtkOptions::default();
            let (state, clf, num_classes) = one_shot(&fs, &labeled, candidate_size, seed)?;
            let ctx = SelectionContext {
                state: &state,
                features: fs.features(),
                num_classes,
                classifier: Some(&clf),
                cpl: None,
                round: 1,
            };
            let cpl = if name == StrategyName::Ntkcpl {
                let n_clu = clustering::cluster_schedule(state.labeled().len(), state.labeled().len(), max_clusters, 1);
                let mut rng = ntkcpl::seeded_rng(seed ^ 0x5eed);
                let c0 = n_clu.min(state.labeled().len());
                Some(strategies::pseudo_labels(&ctx, spec.feature_source, c0, n_clu, &mut rng, clustering::DEFAULT_MAX_ITER)?)
            } else {
                None
            };
            let ctx = SelectionContext {
                cpl: cpl.as_ref().map(|c| (&c.labels[..], c.num_clusters)),
                ..ctx
            };
            let picked = strategies::select(&spec, &ctx, budget)?;
            let rows: Vec<SelectionRow> = picked
                .iter()
                .enumerate()
                .map(|(step, &i)| SelectionRow {
                    round: 1,
                    step,
                    sample_id: fs.ids()[i],
                    strategy: spec.label(),
                })
                .collect();
            match out {
                Some(path) => strategies::write_selections(&path, &rows)?,
                None => {
                    println!("round,step,sample_id,strategy");
                    for r in rows {
                        println!("{},{},{},{}", r.round, r.step, r.sample_id, r.strategy);
                    }
                }
            }
        }
        Command::Diagnose {
            features,
            labeled,
            candidate_size,
            max_clusters,
            source,
            seed,
            out,
        } => {
            let fs = FeatureSet::load(&features, Format::from_path(&features))?;
            let truth = fs
                .labels()
                .ok_or_else(|| Error::Precondition("diagnostics need oracle labels in the feature file".into()))?
                .to_vec();
            let (state, clf, num_classes) = one_shot(&fs, &labeled, candidate_size, seed)?;
            let ctx = SelectionContext {
                state: &state,
                features: fs.features(),
                num_classes,
                classifier: Some(&clf),
                cpl: None,
                round: 1,
            };
            let n_clu = clustering::cluster_count(
                ClusterCountRule::HalfTotalLabels,
                state.labeled().len(),
                0,
                state.labeled().len(),
                max_clusters.max(1),
                1,
                0,
            );
            let mut rng = ntkcpl::seeded_rng(seed ^ 0x5eed);
            let c0 = n_clu.min(state.labeled().len());
            let cpl = strategies::pseudo_labels(&ctx, feature_source(source), c0, n_clu, &mut rng, clustering::DEFAULT_MAX_ITER)?;
            let pool = strategies::build_kernel_pool(fs.features(), &state, cpl.num_clusters, &NtkOptions::default(), seed)?;
            let pos_truth: Vec<usize> = pool.positions.iter().map(|&i| truth[i]).collect();
            let preds = clf.predict(fs.select_rows(state.candidate()).view())?;
            let report = analysis::diagnose(0, &pool, &cpl, &pos_truth, fs.num_classes(), &preds)?;
            match out {
                Some(path) => report.save_json(&path)?,
                None => println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?),
            }
        }
        Command::Report { metrics, out_dir } => {
            let mut records = Vec::new();
            for path in &metrics {
                records.extend(harness::read_metrics_csv(path)?);
            }
            let summary = harness::emit_report(&records, &out_dir)?;
            for (name, ratio) in &summary.effective_budget_ratio {
                println!("{name}: effective budget ratio {ratio:.3}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
