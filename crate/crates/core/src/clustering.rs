//! K-means, cannot-link constrained k-means, and clustering pseudo-labels.
//!
//! Both k-means variants seed with k-means++ and run Lloyd iterations until
//! the assignment stops changing. Empty clusters are reseeded with the point
//! farthest from its centroid (taken from a cluster of size >= 2). The
//! constrained variant assigns points greedily in index order to the nearest
//! centroid that does not break a cannot-link against an already-assigned
//! point, and keeps the previous assignment whenever the greedy pass would
//! cost more, so inertia never increases.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    pub k: usize,
    pub inertia: f64,
    /// Inertia after every centroid update, ending with `inertia`.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn inertia(x: ArrayView2<'_, f64>, assignment: &[usize], centroids: ArrayView2<'_, f64>) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(x.row(i), centroids.row(c)))
        .sum()
}

/// Per-cluster means. Empty clusters keep their previous centroid.
fn cluster_means(x: ArrayView2<'_, f64>, assignment: &[usize], previous: &Array2<f64>) -> Array2<f64> {
    let k = previous.nrows();
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        sums.row_mut(c).scaled_add(1.0, &x.row(i));
        counts[c] += 1;
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums.row_mut(c).assign(&previous.row(c));
        } else {
            sums.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
        }
    }
    sums
}

/// k-means++ seeding: first centre uniform, the rest by squared-distance
/// weighting. All-zero weights fall back to uniform over unchosen points.
pub fn kmeans_plus_plus(x: ArrayView2<'_, f64>, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut chosen = Vec::with_capacity(k);
    if k == 0 || n == 0 {
        return chosen;
    }
    let first = rng.random_range(0..n);
    chosen.push(first);
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    while chosen.len() < k.min(n) {
        let next = d2_sample(&d2, &chosen, rng);
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    chosen
}

/// Draws an index with probability proportional to `weights`; uniform over
/// indices not in `exclude` if the weights sum to zero.
pub(crate) fn d2_sample(weights: &[f64], exclude: &[usize], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        let mut target = rng.random::<f64>() * total;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = i;
                if target < w {
                    return i;
                }
                target -= w;
            }
        }
        return last_positive;
    }
    let open: Vec<usize> = (0..weights.len()).filter(|i| !exclude.contains(i)).collect();
    open[rng.random_range(0..open.len())]
}

fn nearest(x: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.outer_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Moves the farthest point (from a cluster with >= 2 members) into each
/// empty cluster and places that cluster's centroid on it.
fn repair_empty(x: ArrayView2<'_, f64>, assignment: &mut [usize], centroids: &mut Array2<f64>) {
    let k = centroids.nrows();
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, &c) in assignment.iter().enumerate() {
            if counts[c] < 2 {
                continue;
            }
            let d = sq_dist(x.row(i), centroids.row(c));
            if d > far_d {
                far = Some(i);
                far_d = d;
            }
        }
        let Some(i) = far else { return };
        assignment[i] = empty;
        centroids.row_mut(empty).assign(&x.row(i));
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Precondition(format!("k = {k} exceeds the {n} points")));
    }
    Ok(())
}

fn lloyd<A>(x: ArrayView2<'_, f64>, k: usize, rng: &mut impl Rng, max_iter: usize, guarded: bool, assign: A) -> Result<ClusterModel>
where
    A: Fn(&Array2<f64>) -> Result<Vec<usize>>,
{
    let seeds = kmeans_plus_plus(x, k, rng);
    let mut centroids = x.select(Axis(0), &seeds);
    let mut assignment = assign(&centroids)?;
    repair_empty(x, &mut assignment, &mut centroids);
    let mut history = Vec::new();
    for _ in 0..max_iter {
        centroids = cluster_means(x, &assignment, &centroids);
        let current = inertia(x, &assignment, centroids.view());
        history.push(current);
        let mut next = assign(&centroids)?;
        if guarded && inertia(x, &next, centroids.view()) > current {
            break;
        }
        repair_empty(x, &mut next, &mut centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    centroids = cluster_means(x, &assignment, &centroids);
    let final_inertia = inertia(x, &assignment, centroids.view());
    if history.last() != Some(&final_inertia) {
        history.push(final_inertia);
    }
    Ok(ClusterModel {
        assignment,
        centroids,
        k,
        inertia: final_inertia,
        inertia_history: history,
    })
}

pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, rng: &mut impl Rng, max_iter: usize) -> Result<ClusterModel> {
    check_k(x.nrows(), k)?;
    lloyd(x, k, rng, max_iter, false, |centroids| {
        Ok(x.outer_iter().map(|row| nearest(row, centroids)).collect())
    })
}

/// COP-k-means with cannot-link pairs of point indices.
pub fn constrained_kmeans(
    x: ArrayView2<'_, f64>,
    k: usize,
    cannot_link: &[(usize, usize)],
    rng: &mut impl Rng,
    max_iter: usize,
) -> Result<ClusterModel> {
    let n = x.nrows();
    check_k(n, k)?;
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in cannot_link {
        if a >= n || b >= n {
            return Err(Error::Precondition(format!("cannot-link ({a}, {b}) outside {n} points")));
        }
        if a == b {
            return Err(Error::Constraint { point: a });
        }
        links[a].push(b);
        links[b].push(a);
    }
    if cannot_link.is_empty() {
        return kmeans(x, k, rng, max_iter);
    }
    lloyd(x, k, rng, max_iter, true, |centroids| {
        let mut assignment: Vec<Option<usize>> = vec![None; n];
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(k);
        for i in 0..n {
            order.clear();
            order.extend(centroids.outer_iter().enumerate().map(|(c, row)| (sq_dist(x.row(i), row), c)));
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let pick = order
                .iter()
                .map(|&(_, c)| c)
                .find(|&c| links[i].iter().all(|&j| assignment[j] != Some(c)))
                .ok_or(Error::Constraint { point: i })?;
            assignment[i] = Some(pick);
        }
        Ok(assignment.into_iter().map(|a| a.expect("all assigned")).collect())
    })
}

/// Dominant class of `values` (ties to the lowest class) and its count.
fn dominant(values: impl IntoIterator<Item = usize>) -> Option<(usize, usize)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (class, n) in counts {
        if best.is_none_or(|(_, bn)| n > bn) {
            best = Some((class, n));
        }
    }
    best
}

/// Members whose predicted class differs from the cluster's dominant predicted
/// class (dominance ties go to the lowest class).
pub fn count_confusing(member_preds: &[usize]) -> Result<usize> {
    let (_, top) = dominant(member_preds.iter().copied())
        .ok_or_else(|| Error::Precondition("confusing-sample count of an empty cluster".into()))?;
    Ok(member_preds.len() - top)
}

/// Clustering pseudo-labels over a list of points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cpl {
    pub labels: Vec<usize>,
    pub num_clusters: usize,
    /// Dominant true class among each cluster's labeled members.
    pub dominant_true: Vec<Option<usize>>,
    /// Per-cluster counts of model-predicted classes.
    pub purity_stats: Vec<Vec<usize>>,
}

impl Cpl {
    pub fn from_assignment(
        labels: Vec<usize>,
        num_clusters: usize,
        model_preds: &[usize],
        num_pred_classes: usize,
        labeled: &[(usize, usize)],
    ) -> Result<Cpl> {
        if labels.len() != model_preds.len() {
            return Err(Error::Shape(format!(
                "{} cluster labels for {} predictions",
                labels.len(),
                model_preds.len()
            )));
        }
        let mut purity_stats = vec![vec![0usize; num_pred_classes]; num_clusters];
        for (&c, &p) in labels.iter().zip(model_preds) {
            if c >= num_clusters || p >= num_pred_classes {
                return Err(Error::Precondition(format!("cluster {c} / prediction {p} out of range")));
            }
            purity_stats[c][p] += 1;
        }
        let dominant_true = (0..num_clusters)
            .map(|c| dominant(labeled.iter().filter(|&&(i, _)| labels[i] == c).map(|&(_, y)| y)).map(|(y, _)| y))
            .collect();
        Ok(Cpl {
            labels,
            num_clusters,
            dominant_true,
            purity_stats,
        })
    }

    /// Dominant class per cluster: the labeled members' majority when present,
    /// otherwise the model-prediction majority.
    pub fn dominance(&self) -> Vec<usize> {
        self.dominant_true
            .iter()
            .zip(&self.purity_stats)
            .map(|(dom, stats)| {
                dom.unwrap_or_else(|| crate::argmax(stats.iter().map(|&n| n as f64)))
            })
            .collect()
    }
}

/// One row of the per-cluster purity report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterPurity {
    pub cluster: usize,
    pub size: usize,
    pub dominant_pred: usize,
    /// Fraction of members predicted as `dominant_pred`.
    pub pred_purity: f64,
    pub dominant_true: Option<usize>,
    /// Fraction of members whose true class is the majority true class;
    /// only filled when ground truth is supplied.
    pub true_purity: Option<f64>,
}

impl Cpl {
    pub fn purity(&self, truth: Option<&[usize]>) -> Result<Vec<ClusterPurity>> {
        if let Some(t) = truth {
            if t.len() != self.labels.len() {
                return Err(Error::Shape(format!("{} truth labels for {} points", t.len(), self.labels.len())));
            }
        }
        Ok((0..self.num_clusters)
            .map(|c| {
                let stats = &self.purity_stats[c];
                let size: usize = stats.iter().sum();
                let (dominant_pred, top) = dominant(
                    stats.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)),
                )
                .unwrap_or((0, 0));
                let true_purity = truth.map(|t| {
                    let members = self.labels.iter().zip(t).filter(|(&l, _)| l == c).map(|(_, &y)| y);
                    dominant(members).map_or(0.0, |(_, n)| n as f64 / size as f64)
                });
                ClusterPurity {
                    cluster: c,
                    size,
                    dominant_pred,
                    pred_purity: if size == 0 { 0.0 } else { top as f64 / size as f64 },
                    dominant_true: self.dominant_true[c],
                    true_purity,
                }
            })
            .collect())
    }

    /// Writes `sample_id,cpl_class`, one row per point.
    pub fn write_csv(&self, path: &Path, sample_ids: &[u64]) -> Result<()> {
        if sample_ids.len() != self.labels.len() {
            return Err(Error::Shape(format!("{} ids for {} points", sample_ids.len(), self.labels.len())));
        }
        let mut w = csv_writer(path)?;
        w.write_record(["sample_id", "cpl_class"]).map_err(csv_err)?;
        for (id, c) in sample_ids.iter().zip(&self.labels) {
            w.write_record([id.to_string(), c.to_string()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_purity_csv(&self, path: &Path, truth: Option<&[usize]>) -> Result<()> {
        let mut w = csv_writer(path)?;
        for row in self.purity(truth)? {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Splits clusters of `assignment` (ids `0..k`) until `target` clusters exist,
/// each time running 2-means on the members of the cluster with the most
/// confusing samples (ties to the lowest id; clusters of one point skipped).
pub fn split_clusters(
    x: ArrayView2<'_, f64>,
    mut assignment: Vec<usize>,
    k: usize,
    model_preds: &[usize],
    target: usize,
    rng: &mut impl Rng,
    max_iter: usize,
) -> Result<Vec<usize>> {
    let mut k = k;
    while k < target {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        let mut best: Option<(usize, usize)> = None;
        for (c, m) in members.iter().enumerate() {
            if m.len() < 2 {
                continue;
            }
            let preds: Vec<usize> = m.iter().map(|&i| model_preds[i]).collect();
            let confusing = count_confusing(&preds)?;
            if best.is_none_or(|(_, b)| confusing > b) {
                best = Some((c, confusing));
            }
        }
        let (split, _) = best.ok_or_else(|| {
            Error::Precondition(format!("no cluster left to split at {k} of {target} clusters"))
        })?;
        let sub = x.select(Axis(0), &members[split]);
        let halves = kmeans(sub.view(), 2, rng, max_iter)?;
        for (&i, &half) in members[split].iter().zip(&halves.assignment) {
            if half == 1 {
                assignment[i] = k;
            }
        }
        k += 1;
    }
    Ok(assignment)
}

/// Constrained k-means with `c0` clusters and cannot-links between labeled
/// points of different classes, then confusion-driven splitting up to `n_clu`.
///
/// `labeled` holds `(point index, true class)` pairs; `model_preds` holds the
/// current classifier's prediction for every point.
#[allow(clippy::too_many_arguments)]
pub fn generate_cpl(
    f_al: ArrayView2<'_, f64>,
    model_preds: &[usize],
    num_pred_classes: usize,
    c0: usize,
    n_clu: usize,
    labeled: &[(usize, usize)],
    rng: &mut impl Rng,
    max_iter: usize,
) -> Result<Cpl> {
    if c0 > n_clu {
        return Err(Error::Precondition(format!("initial clusters {c0} exceed target {n_clu}")));
    }
    if n_clu > f_al.nrows() {
        return Err(Error::Precondition(format!("{n_clu} clusters for {} points", f_al.nrows())));
    }
    if labeled.is_empty() {
        return Err(Error::Precondition("CPL generation needs labeled points".into()));
    }
    let mut links = Vec::new();
    for (a, &(i, yi)) in labeled.iter().enumerate() {
        for &(j, yj) in &labeled[a + 1..] {
            if yi != yj {
                links.push((i, j));
            }
        }
    }
    let base = constrained_kmeans(f_al, c0, &links, rng, max_iter)?;
    let assignment = split_clusters(f_al, base.assignment, c0, model_preds, n_clu, rng, max_iter)?;
    Cpl::from_assignment(assignment, n_clu, model_preds, num_pred_classes, labeled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterCountRule {
    /// Half the labels held so far.
    #[default]
    HalfTotalLabels,
    /// Half of this round's query size.
    HalfQuerySize,
}

/// Cluster count for a round: `b0` in round 0, afterwards
/// `min(⌊total_labels / 2⌋, c_max)` raised to at least `min(b0, c_max)`.
pub fn cluster_schedule(total_labels: usize, b0: usize, c_max: usize, round: usize) -> usize {
    if round == 0 {
        b0
    } else {
        (total_labels / 2).min(c_max).max(b0.min(c_max))
    }
}

/// [`cluster_schedule`] generalized over the count rule; never below `previous`.
pub fn cluster_count(
    rule: ClusterCountRule,
    total_labels: usize,
    query_size: usize,
    b0: usize,
    c_max: usize,
    round: usize,
    previous: usize,
) -> usize {
    let raw = match rule {
        ClusterCountRule::HalfTotalLabels => cluster_schedule(total_labels, b0, c_max, round),
        ClusterCountRule::HalfQuerySize if round == 0 => b0,
        ClusterCountRule::HalfQuerySize => (query_size / 2).min(c_max).max(b0.min(c_max)),
    };
    if round == 0 {
        raw
    } else {
        raw.max(previous.min(c_max))
    }
}
