//! Query strategies.
//!
//! Every strategy returns `b` distinct unlabeled pool indices. Scoring
//! strategies work over the state's candidate subset; ties always go to the
//! lower pool index. The kernel-based strategies build a [`KernelPool`] whose
//! positions are the candidates (ascending) followed by the labeled samples
//! in query order.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{self, Cpl};
use crate::dataset::ALState;
use crate::model::{self, InitScheme, MlpParams};
use crate::ntk::{self, GreedyWorkspace, Horizon, KernelSystem, RiskTarget};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Random,
    Entropy,
    Coreset,
    Badge,
    Lookahead,
    Ntkcpl,
}

impl StrategyName {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Random => "random",
            StrategyName::Entropy => "entropy",
            StrategyName::Coreset => "coreset",
            StrategyName::Badge => "badge",
            StrategyName::Lookahead => "lookahead",
            StrategyName::Ntkcpl => "ntkcpl",
        }
    }

    pub fn uses_feature_source(self) -> bool {
        matches!(self, StrategyName::Coreset | StrategyName::Ntkcpl)
    }
}

impl std::str::FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => StrategyName::Random,
            "entropy" => StrategyName::Entropy,
            "coreset" => StrategyName::Coreset,
            "badge" => StrategyName::Badge,
            "lookahead" => StrategyName::Lookahead,
            "ntkcpl" => StrategyName::Ntkcpl,
            other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
        })
    }
}

/// Which features feed the kernel / distance computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// The ingested (self-supervised) features.
    #[default]
    SelfSupervised,
    /// Penultimate activations of the previous round's classifier.
    ActiveLearning,
}

/// Options for the tangent-kernel strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NtkOptions {
    /// Ridge added to the labeled block; `None` uses `1e-4·trace/M`.
    pub ridge: Option<f64>,
    /// Training time; `None` means the converged predictor.
    pub time: Option<f64>,
    pub zero_output_init: bool,
    /// Hidden width of the freshly initialized network whose kernel is used.
    pub width: usize,
    pub scheme: InitScheme,
    /// Scale every kernel input row to unit length.
    pub normalize_inputs: bool,
}

impl Default for NtkOptions {
    fn default() -> Self {
        NtkOptions {
            ridge: None,
            time: None,
            zero_output_init: true,
            width: 256,
            scheme: InitScheme::NtkParameterization,
            normalize_inputs: false,
        }
    }
}

impl NtkOptions {
    pub fn horizon(&self) -> Horizon {
        self.time.map_or(Horizon::Infinite, Horizon::Finite)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("ntk width must be at least 1".into()));
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("ntk ridge must be finite and >= 0, got {r}")));
            }
        }
        if let Some(t) = self.time {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("ntk time must be finite and >= 0, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub name: StrategyName,
    #[serde(default)]
    pub feature_source: FeatureSource,
    #[serde(default)]
    pub ntk: NtkOptions,
    #[serde(default)]
    pub seed: u64,
    /// Display label override.
    #[serde(default)]
    pub label: Option<String>,
}

impl StrategySpec {
    pub fn new(name: StrategyName) -> Self {
        StrategySpec {
            name,
            feature_source: FeatureSource::SelfSupervised,
            ntk: NtkOptions::default(),
            seed: 0,
            label: None,
        }
    }

    pub fn with_source(mut self, source: FeatureSource) -> Self {
        self.feature_source = source;
        self
    }

    /// Name used in reports, e.g. `ntkcpl(al)`.
    pub fn label(&self) -> String {
        if let Some(label) = &self.label {
            return label.clone();
        }
        if self.name.uses_feature_source() {
            let src = match self.feature_source {
                FeatureSource::SelfSupervised => "self",
                FeatureSource::ActiveLearning => "al",
            };
            format!("{}({src})", self.name.as_str())
        } else {
            self.name.as_str().to_string()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ntk.validate()
    }
}

fn check_budget(b: usize, available: usize, what: &str) -> Result<()> {
    if b > available {
        return Err(Error::Precondition(format!("budget {b} exceeds the {available} {what}")));
    }
    Ok(())
}

/// Uniform sample of `b` unlabeled indices without replacement.
pub fn select_random(state: &ALState, b: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    check_budget(b, state.unlabeled().len(), "unlabeled samples")?;
    let pool: Vec<usize> = state.unlabeled().iter().copied().collect();
    Ok(pool.choose_multiple(rng, b).copied().collect())
}

pub fn entropy(probs: ndarray::ArrayView1<'_, f64>) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Positions of the `b` largest scores, ties to the lower position.
fn top_b(scores: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(b);
    order
}

/// Top-`b` candidates by softmax entropy.
pub fn select_entropy(state: &ALState, b: usize, classifier: &MlpParams, features: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let cand = state.candidate();
    check_budget(b, cand.len(), "candidates")?;
    let x = features.select(Axis(0), cand);
    let probs = model::softmax_rows(classifier.forward(x.view())?.view());
    let scores: Vec<f64> = probs.outer_iter().map(entropy).collect();
    Ok(top_b(&scores, b).into_iter().map(|k| cand[k]).collect())
}

fn euclid(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Greedy k-center over the candidates. With nothing labeled the first pick
/// is the candidate farthest from the candidates' centroid.
pub fn select_coreset(state: &ALState, b: usize, features: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let cand = state.candidate();
    check_budget(b, cand.len(), "candidates")?;
    let mut picked = Vec::with_capacity(b);
    if b == 0 {
        return Ok(picked);
    }
    let labeled = state.labeled_indices();
    let mut min_dist: Vec<f64> = cand
        .iter()
        .map(|&c| {
            labeled
                .iter()
                .map(|&l| euclid(features.row(c), features.row(l)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    if labeled.is_empty() {
        let centroid = features
            .select(Axis(0), cand)
            .mean_axis(Axis(0))
            .expect("candidates are nonempty");
        min_dist = cand.iter().map(|&c| euclid(features.row(c), centroid.view())).collect();
    }
    let mut taken = vec![false; cand.len()];
    for _ in 0..b {
        let mut best = None;
        for (k, &d) in min_dist.iter().enumerate() {
            if !taken[k] && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((k, d));
            }
        }
        let (k, _) = best.expect("budget checked");
        taken[k] = true;
        picked.push(cand[k]);
        let row = features.row(cand[k]);
        if picked.len() == 1 && labeled.is_empty() {
            min_dist = cand.iter().map(|&c| euclid(features.row(c), row)).collect();
        } else {
            for (d, &c) in min_dist.iter_mut().zip(cand) {
                *d = d.min(euclid(features.row(c), row));
            }
        }
    }
    Ok(picked)
}

/// k-means++ seeding over the candidates' gradient embeddings.
pub fn select_badge(
    state: &ALState,
    b: usize,
    classifier: &MlpParams,
    features: ArrayView2<'_, f64>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let cand = state.candidate();
    check_budget(b, cand.len(), "candidates")?;
    let x = features.select(Axis(0), cand);
    let emb = model::grad_embedding(classifier, x.view())?;
    Ok(clustering::kmeans_plus_plus(emb.view(), b, rng)
        .into_iter()
        .map(|k| cand[k])
        .collect())
}

/// Kernel system over candidates followed by labeled samples.
#[derive(Debug, Clone)]
pub struct KernelPool {
    /// Pool index of every system position.
    pub positions: Vec<usize>,
    pub num_candidates: usize,
    pub system: KernelSystem,
}

impl KernelPool {
    /// Positions of the candidates (always `0..num_candidates`).
    pub fn candidate_positions(&self) -> Vec<usize> {
        (0..self.num_candidates).collect()
    }

    /// Positions of the labeled samples, in query order.
    pub fn labeled_positions(&self) -> Vec<usize> {
        (self.num_candidates..self.positions.len()).collect()
    }
}

/// Gram of a freshly initialized MLP over candidate ∪ labeled rows of
/// `inputs`, with the labeled block inverted.
pub fn build_kernel_pool(
    inputs: ArrayView2<'_, f64>,
    state: &ALState,
    num_outputs: usize,
    opts: &NtkOptions,
    seed: u64,
) -> Result<KernelPool> {
    opts.validate()?;
    let mut positions = state.candidate().to_vec();
    let num_candidates = positions.len();
    positions.extend(state.labeled_indices());
    let mut x = inputs.select(Axis(0), &positions);
    if opts.normalize_inputs {
        for mut row in x.outer_iter_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
    }
    let net = model::init_mlp(
        x.ncols(),
        opts.width,
        num_outputs.max(1),
        opts.scheme,
        opts.zero_output_init,
        &mut crate::seeded_rng(seed),
    )?;
    let sys = ntk::compute_gram(&net, x.view(), 0)?;
    let ridge = opts.ridge.unwrap_or_else(|| ntk::default_ridge(sys.gram()));
    let mut system = sys.with_ridge(ridge)?.with_time(opts.horizon())?;
    let labeled: Vec<usize> = (num_candidates..positions.len()).collect();
    system.set_labeled(&labeled)?;
    Ok(KernelPool {
        positions,
        num_candidates,
        system,
    })
}

/// First `(position, score)` pair with the minimal score.
fn first_min<T: PartialOrd + Copy>(scores: &[(usize, T)]) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for &(i, s) in scores {
        if best.is_none_or(|(_, bs)| s < bs) {
            best = Some((i, s));
        }
    }
    best
}

/// Greedy risk minimization: `b` steps, each adding the candidate position
/// whose hypothetical addition under its pseudo-label minimizes the number of
/// candidate positions whose kernel prediction disagrees with the
/// pseudo-labels. Returns system positions in selection order.
///
/// `cpl` holds a pseudo-label for every system position (labeled ones
/// included); the labeled set of `pool.system` is used as the starting point.
pub fn select_ntkcpl(pool: &KernelPool, b: usize, cpl: &[usize], num_cpl: usize) -> Result<Vec<usize>> {
    let (selected, _) = ntkcpl_with_risks(pool, b, cpl, num_cpl)?;
    Ok(selected)
}

/// [`select_ntkcpl`] plus the mismatch count after every committed step.
pub fn ntkcpl_with_risks(pool: &KernelPool, b: usize, cpl: &[usize], num_cpl: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let sys = &pool.system;
    check_budget(b, pool.num_candidates, "candidates")?;
    if cpl.len() != sys.len() {
        return Err(Error::Shape(format!("{} pseudo-labels for {} positions", cpl.len(), sys.len())));
    }
    if let Some(&bad) = cpl.iter().find(|&&c| c >= num_cpl) {
        return Err(Error::Precondition(format!("pseudo-label {bad} outside [0, {num_cpl})")));
    }
    let risk_set = pool.candidate_positions();
    let mut open: Vec<usize> = risk_set.clone();
    let mut selected = Vec::with_capacity(b);
    let mut risks = Vec::with_capacity(b);
    match sys.time() {
        Horizon::Infinite => {
            let train: Vec<usize> = sys.labeled().iter().map(|&p| cpl[p]).collect();
            let mut ws = GreedyWorkspace::new(sys.clone(), ntk::one_hot(&train, num_cpl).view(), &risk_set)?;
            for _ in 0..b {
                let scores = open
                    .par_iter()
                    .map(|&p| ws.mismatches_with(p, cpl[p], cpl).map(|m| (p, m)))
                    .collect::<Result<Vec<_>>>()?;
                let (p, m) = first_min(&scores).expect("open candidates");
                ws.commit(p, cpl[p])?;
                open.retain(|&q| q != p);
                selected.push(p);
                risks.push(m);
            }
        }
        Horizon::Finite(_) => {
            let mut current = sys.clone();
            let target = RiskTarget {
                labels: cpl,
                num_classes: num_cpl,
                risk_set: &risk_set,
            };
            for _ in 0..b {
                let scores = open
                    .par_iter()
                    .map(|&p| ntk::pool_mismatches(&current, target, Some(p)).map(|m| (p, m)))
                    .collect::<Result<Vec<_>>>()?;
                let (p, m) = first_min(&scores).expect("open candidates");
                current.extend_labeled_mut(p)?;
                open.retain(|&q| q != p);
                selected.push(p);
                risks.push(m);
            }
        }
    }
    Ok((selected, risks))
}

/// Greedy output-change maximization: each step adds the candidate whose
/// hypothetical addition, labeled with its own current predicted class,
/// changes the candidates' kernel predictions most in total L1. Requires the
/// converged predictor. `labels` gives the class of every labeled position.
pub fn select_lookahead(pool: &KernelPool, b: usize, labels: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let sys = &pool.system;
    check_budget(b, pool.num_candidates, "candidates")?;
    if labels.len() != sys.labeled().len() {
        return Err(Error::Shape(format!("{} labels for {} labeled positions", labels.len(), sys.labeled().len())));
    }
    if sys.time() != Horizon::Infinite {
        return Err(Error::Precondition("lookahead scoring uses the converged predictor".into()));
    }
    let risk_set = pool.candidate_positions();
    let mut ws = GreedyWorkspace::new(sys.clone(), ntk::one_hot(labels, num_classes).view(), &risk_set)?;
    let mut open = risk_set.clone();
    let mut selected = Vec::with_capacity(b);
    for _ in 0..b {
        let preds = ws.predictions().to_owned();
        let scores = open
            .par_iter()
            .map(|&p| {
                let class = crate::argmax(preds.row(p).iter().copied());
                ws.output_change_with(p, class).map(|s| (p, -s))
            })
            .collect::<Result<Vec<_>>>()?;
        let (p, _) = first_min(&scores).expect("open candidates");
        ws.commit(p, crate::argmax(preds.row(p).iter().copied()))?;
        open.retain(|&q| q != p);
        selected.push(p);
    }
    Ok(selected)
}

/// Inputs available to a strategy in one round.
pub struct SelectionContext<'a> {
    pub state: &'a ALState,
    /// Ingested features of the whole pool.
    pub features: ArrayView2<'a, f64>,
    /// True class count.
    pub num_classes: usize,
    /// Classifier trained on the current labeled set.
    pub classifier: Option<&'a MlpParams>,
    /// Pseudo-labels for candidates then labeled samples, and their count
    /// (see [`pseudo_labels`]).
    pub cpl: Option<(&'a [usize], usize)>,
    pub round: usize,
}

impl SelectionContext<'_> {
    fn classifier(&self) -> Result<&MlpParams> {
        self.classifier
            .ok_or_else(|| Error::Precondition("this strategy needs a trained classifier".into()))
    }

    /// Rows that feed distance or kernel computations.
    pub fn inputs(&self, source: FeatureSource) -> Result<Array2<f64>> {
        match source {
            FeatureSource::SelfSupervised => Ok(self.features.to_owned()),
            FeatureSource::ActiveLearning => self.classifier()?.penultimate(self.features),
        }
    }
}

/// Seed of the per-round generator and kernel network of `spec`.
pub fn round_seed(spec: &StrategySpec, round: usize) -> u64 {
    spec.seed ^ (round as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Pseudo-labels for candidates followed by labeled samples, clustered on
/// the features named by `source`.
///
/// The constrained stage uses `min(c0, n_clu)` clusters. If the cannot-links
/// cannot be met with that many clusters, the number of distinct labeled
/// classes is tried next, and finally unconstrained k-means.
pub fn pseudo_labels(
    ctx: &SelectionContext<'_>,
    source: FeatureSource,
    c0: usize,
    n_clu: usize,
    rng: &mut impl Rng,
    max_iter: usize,
) -> Result<Cpl> {
    let classifier = ctx.classifier()?;
    let mut positions = ctx.state.candidate().to_vec();
    let m = positions.len();
    positions.extend(ctx.state.labeled_indices());
    let inputs = ctx.inputs(source)?;
    let x = inputs.select(Axis(0), &positions);
    let preds = classifier.predict(ctx.features.select(Axis(0), &positions).view())?;
    let labeled: Vec<(usize, usize)> = ctx
        .state
        .labeled_labels()
        .into_iter()
        .enumerate()
        .map(|(k, y)| (m + k, y))
        .collect();
    let n_clu = n_clu.min(positions.len());
    let distinct = labeled.iter().map(|&(_, y)| y).collect::<std::collections::BTreeSet<_>>().len();
    let mut attempts = vec![c0.min(n_clu).max(1)];
    if distinct.min(n_clu) > attempts[0] {
        attempts.push(distinct.min(n_clu));
    }
    for c in attempts {
        match clustering::generate_cpl(x.view(), &preds, classifier.num_classes(), c, n_clu, &labeled, rng, max_iter) {
            Err(Error::Constraint { point }) => {
                log::warn!("cannot-links unsatisfiable with {c} clusters (point {point})");
            }
            other => return other,
        }
    }
    log::warn!("falling back to unconstrained clustering for pseudo-labels");
    let base = clustering::kmeans(x.view(), c0.min(n_clu).max(1), rng, max_iter)?;
    let assignment = clustering::split_clusters(x.view(), base.assignment, base.k, &preds, n_clu, rng, max_iter)?;
    Cpl::from_assignment(assignment, n_clu, &preds, classifier.num_classes(), &labeled)
}

/// Runs `spec` for one round and returns pool indices in selection order.
pub fn select(spec: &StrategySpec, ctx: &SelectionContext<'_>, b: usize) -> Result<Vec<usize>> {
    spec.validate()?;
    let round_seed = round_seed(spec, ctx.round);
    let mut rng = crate::seeded_rng(round_seed);
    match spec.name {
        StrategyName::Random => select_random(ctx.state, b, &mut rng),
        StrategyName::Entropy => select_entropy(ctx.state, b, ctx.classifier()?, ctx.features),
        StrategyName::Coreset => {
            let inputs = ctx.inputs(spec.feature_source)?;
            select_coreset(ctx.state, b, inputs.view())
        }
        StrategyName::Badge => select_badge(ctx.state, b, ctx.classifier()?, ctx.features, &mut rng),
        StrategyName::Lookahead => {
            let pool = build_kernel_pool(ctx.features, ctx.state, ctx.num_classes, &spec.ntk, round_seed)?;
            let labels = ctx.state.labeled_labels();
            let picked = select_lookahead(&pool, b, &labels, ctx.num_classes)?;
            Ok(picked.into_iter().map(|p| pool.positions[p]).collect())
        }
        StrategyName::Ntkcpl => {
            let (cpl, num_cpl) = ctx
                .cpl
                .ok_or_else(|| Error::Precondition("ntkcpl needs pseudo-labels for this round".into()))?;
            let pool = build_kernel_pool(ctx.features, ctx.state, num_cpl, &spec.ntk, round_seed)?;
            let picked = select_ntkcpl(&pool, b, cpl, num_cpl)?;
            Ok(picked.into_iter().map(|p| pool.positions[p]).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub round: usize,
    pub step: usize,
    pub sample_id: u64,
    pub strategy: String,
}

pub fn write_selections(path: &Path, rows: &[SelectionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
