//! Diagnostics for pseudo-label risk estimation.
//!
//! `g` maps kernel predictions over pseudo-label classes onto true classes by
//! summing the columns whose cluster is dominated by each true class. The
//! pseudo-label error splits into two disjoint parts:
//!
//! * `p_nff` – the mapped prediction misses the true label but the raw
//!   prediction hits the pseudo-label (impurity shows up here);
//! * `p_fnf` – the mapped prediction hits the true label but the raw
//!   prediction misses the pseudo-label (over-clustering shows up here).

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::clustering::Cpl;
use crate::ntk::{one_hot, KernelSystem};
use crate::strategies::KernelPool;
use crate::{Error, Result};

/// Column `j` of the output is the sum of the input columns `k` with
/// `dominance[k] == j`.
pub fn label_map_g(f_cpl: ArrayView2<'_, f64>, dominance: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    if dominance.len() != f_cpl.ncols() {
        return Err(Error::Shape(format!(
            "{} dominance entries for {} pseudo-label columns",
            dominance.len(),
            f_cpl.ncols()
        )));
    }
    if let Some(&bad) = dominance.iter().find(|&&j| j >= num_classes) {
        return Err(Error::Precondition(format!("dominant class {bad} outside [0, {num_classes})")));
    }
    let mut out = Array2::zeros((f_cpl.nrows(), num_classes));
    for (k, &j) in dominance.iter().enumerate() {
        let mut col = out.column_mut(j);
        col += &f_cpl.column(k);
    }
    Ok(out)
}

/// Max absolute difference between kernel regression on true labels and the
/// mapped regression on pseudo-labels, over `query` positions. No
/// precondition is checked; see [`verify_proposition`].
pub fn proposition_deviation(
    sys: &KernelSystem,
    true_labels: &[usize],
    cpl_labels: &[usize],
    dominance: &[usize],
    num_classes: usize,
    query: &[usize],
) -> Result<f64> {
    let n_clu = dominance.len();
    let f_y = sys.predict(one_hot(true_labels, num_classes).view(), query)?;
    let f_cpl = sys.predict(one_hot(cpl_labels, n_clu).view(), query)?;
    let mapped = label_map_g(f_cpl.view(), dominance, num_classes)?;
    Ok(f_y
        .iter()
        .zip(mapped.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Checks that every labeled sample's true class dominates its pseudo-label
/// cluster and that `f0 ≡ 0`, then returns [`proposition_deviation`].
///
/// `true_labels` and `cpl_labels` are aligned with `sys.labeled()`.
pub fn verify_proposition(
    sys: &KernelSystem,
    true_labels: &[usize],
    cpl_labels: &[usize],
    dominance: &[usize],
    num_classes: usize,
    query: &[usize],
) -> Result<f64> {
    if true_labels.len() != sys.labeled().len() || cpl_labels.len() != sys.labeled().len() {
        return Err(Error::Shape("labels must align with the labeled positions".into()));
    }
    if sys.f0().iter().any(|&v| v != 0.0) {
        return Err(Error::Precondition("the identity needs zero initial outputs".into()));
    }
    for (k, (&y, &c)) in true_labels.iter().zip(cpl_labels).enumerate() {
        if dominance.get(c) != Some(&y) {
            return Err(Error::Precondition(format!(
                "labeled sample at position {} (class {y}) is not dominant in pseudo-label cluster {c}",
                sys.labeled()[k]
            )));
        }
    }
    proposition_deviation(sys, true_labels, cpl_labels, dominance, num_classes, query)
}

/// Dominant true class of each pseudo-label cluster among labeled members
/// (ties to the lowest class); `None` for clusters without labeled members.
pub fn labeled_dominance(true_labels: &[usize], cpl_labels: &[usize], num_clusters: usize) -> Vec<Option<usize>> {
    let mut counts: Vec<std::collections::BTreeMap<usize, usize>> = vec![Default::default(); num_clusters];
    for (&y, &c) in true_labels.iter().zip(cpl_labels) {
        *counts[c].entry(y).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|m| {
            let mut best: Option<(usize, usize)> = None;
            for (y, n) in m {
                if best.is_none_or(|(_, bn)| n > bn) {
                    best = Some((y, n));
                }
            }
            best.map(|(y, _)| y)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub p_nff: f64,
    pub p_fnf: f64,
    pub error_cpl: f64,
    pub impurity_share: f64,
    pub overclustering_share: f64,
    pub nff_count: usize,
    pub fnf_count: usize,
    pub num_samples: usize,
}

fn share(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

/// Splits the pseudo-label error of argmax predictions `ntk_preds_cpl`
/// (pseudo-label classes). Agreement with the true label is judged through
/// `dominance`.
pub fn decompose_error(
    ntk_preds_cpl: &[usize],
    y_true: &[usize],
    y_cpl: &[usize],
    dominance: &[usize],
) -> Result<ErrorDecomposition> {
    let n = ntk_preds_cpl.len();
    if y_true.len() != n || y_cpl.len() != n {
        return Err(Error::Shape(format!(
            "{n} predictions, {} true labels, {} pseudo-labels",
            y_true.len(),
            y_cpl.len()
        )));
    }
    let dom = |k: usize| {
        dominance
            .get(k)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("no dominant class for pseudo-label {k}")))
    };
    let (mut nff, mut fnf, mut impure, mut over) = (0, 0, 0, 0);
    for i in 0..n {
        let pred = ntk_preds_cpl[i];
        let agrees_y = dom(pred)? == y_true[i];
        let agrees_cpl = pred == y_cpl[i];
        if agrees_cpl && !agrees_y {
            nff += 1;
            if y_true[i] != dom(y_cpl[i])? {
                impure += 1;
            }
        } else if agrees_y && !agrees_cpl {
            fnf += 1;
            if dom(pred)? == dom(y_cpl[i])? {
                over += 1;
            }
        }
    }
    Ok(ErrorDecomposition {
        p_nff: share(nff, n),
        p_fnf: share(fnf, n),
        error_cpl: share(nff + fnf, n),
        impurity_share: share(impure, nff),
        overclustering_share: share(over, fnf),
        nff_count: nff,
        fnf_count: fnf,
        num_samples: n,
    })
}

/// Fraction of samples where the true-label regression's argmax equals the
/// mapped argmax of the pseudo-label regression.
pub fn agreement_rate(preds_true: &[usize], preds_cpl: &[usize], dominance: &[usize]) -> f64 {
    let hits = preds_true
        .iter()
        .zip(preds_cpl)
        .filter(|&(&y, &c)| dominance.get(c) == Some(&y))
        .count();
    share(hits, preds_true.len())
}

/// `(estimated, true)` coverage: the fraction of `pseudo` matched by the
/// kernel's argmax, and (if given) the fraction of classifier predictions
/// matching the oracle.
pub fn coverage_estimate(
    kernel_preds: &[usize],
    pseudo: &[usize],
    classifier_vs_truth: Option<(&[usize], &[usize])>,
) -> Result<(f64, Option<f64>)> {
    if kernel_preds.len() != pseudo.len() || kernel_preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} kernel predictions for {} pseudo-labels",
            kernel_preds.len(),
            pseudo.len()
        )));
    }
    let est = share(kernel_preds.iter().zip(pseudo).filter(|(a, b)| a == b).count(), pseudo.len());
    let truth = classifier_vs_truth
        .map(|(pred, truth)| {
            if pred.len() != truth.len() {
                return Err(Error::Shape("classifier predictions and truth differ in length".into()));
            }
            Ok(share(pred.iter().zip(truth).filter(|(a, b)| a == b).count(), truth.len()))
        })
        .transpose()?;
    Ok((est, truth))
}

/// One point of an accuracy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub labels: usize,
    pub mean: f64,
    pub std: f64,
}

/// Fraction of budget points where `curve.mean > baseline.mean + baseline.std`.
pub fn effective_budget_ratio(curve: &[CurvePoint], baseline: &[CurvePoint]) -> Result<f64> {
    if curve.len() != baseline.len() || curve.is_empty() {
        return Err(Error::Shape(format!("curves of {} and {} points", curve.len(), baseline.len())));
    }
    let mut wins = 0;
    for (c, b) in curve.iter().zip(baseline) {
        if c.labels != b.labels {
            return Err(Error::Shape(format!("budget grids differ: {} vs {}", c.labels, b.labels)));
        }
        if c.mean > b.mean + b.std {
            wins += 1;
        }
    }
    Ok(share(wins, curve.len()))
}

/// Per-round diagnostic summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub round: usize,
    pub num_clusters: usize,
    pub estimated_coverage: f64,
    pub true_coverage: Option<f64>,
    pub decomposition: ErrorDecomposition,
    pub agreement_rate: f64,
}

impl DiagnosticReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Runs every diagnostic over the candidates of `pool`.
///
/// `cpl` covers every pool position; `truth` holds the oracle class of every
/// position; `classifier_preds` holds the trained classifier's class for
/// every candidate.
pub fn diagnose(
    round: usize,
    pool: &KernelPool,
    cpl: &Cpl,
    truth: &[usize],
    num_classes: usize,
    classifier_preds: &[usize],
) -> Result<DiagnosticReport> {
    let sys = &pool.system;
    if cpl.labels.len() != sys.len() || truth.len() != sys.len() {
        return Err(Error::Shape("pseudo-labels and truth must cover every position".into()));
    }
    let cand = pool.candidate_positions();
    let lab = sys.labeled();
    let y_l: Vec<usize> = lab.iter().map(|&p| truth[p]).collect();
    let c_l: Vec<usize> = lab.iter().map(|&p| cpl.labels[p]).collect();
    let argmaxes = |m: Array2<f64>| -> Vec<usize> { m.outer_iter().map(|r| crate::argmax(r.iter().copied())).collect() };
    let preds_cpl = argmaxes(sys.predict(one_hot(&c_l, cpl.num_clusters).view(), &cand)?);
    let preds_true = argmaxes(sys.predict(one_hot(&y_l, num_classes).view(), &cand)?);
    let dominance = cpl.dominance();
    let y_true: Vec<usize> = cand.iter().map(|&p| truth[p]).collect();
    let y_cpl: Vec<usize> = cand.iter().map(|&p| cpl.labels[p]).collect();
    let (estimated, true_cov) = coverage_estimate(&preds_cpl, &y_cpl, Some((classifier_preds, &y_true)))?;
    Ok(DiagnosticReport {
        round,
        num_clusters: cpl.num_clusters,
        estimated_coverage: estimated,
        true_coverage: true_cov,
        decomposition: decompose_error(&preds_cpl, &y_true, &y_cpl, &dominance)?,
        agreement_rate: agreement_rate(&preds_true, &preds_cpl, &dominance),
    })
}
