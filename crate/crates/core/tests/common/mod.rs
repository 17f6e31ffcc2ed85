#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2, Axis};
use ntkcpl::dataset::ALState;
use ntkcpl::ntk::{one_hot, KernelSystem};
use ntkcpl::seeded_rng;
use ntkcpl::strategies::{build_kernel_pool, KernelPool, NtkOptions};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Gram `X Xᵀ` of `m` random points in `d` dimensions (full rank when d ≥ m).
pub fn random_gram(m: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let x = randn((m, d), rng);
    x.dot(&x.t())
}

/// Kernel system with zero initial outputs over a precomputed gram.
pub fn zero_f0_system(gram: Array2<f64>, width: usize) -> KernelSystem {
    let m = gram.nrows();
    KernelSystem::from_parts(gram, Array2::zeros((m, width)), 0)
}

/// Gauss–Jordan inverse, independent of the library's Cholesky path.
pub fn gauss_jordan_inverse(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut aug = Array2::<f64>::zeros((n, 2 * n));
    aug.slice_mut(ndarray::s![.., ..n]).assign(&a);
    for i in 0..n {
        aug[[i, n + i]] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| aug[[i, col]].abs().total_cmp(&aug[[j, col]].abs()))
            .unwrap();
        if pivot != col {
            for k in 0..2 * n {
                aug.swap([col, k], [pivot, k]);
            }
        }
        let p = aug[[col, col]];
        aug.row_mut(col).mapv_inplace(|v| v / p);
        let pivot_row = aug.row(col).to_owned();
        for i in 0..n {
            if i != col {
                let f = aug[[i, col]];
                if f != 0.0 {
                    aug.row_mut(i).scaled_add(-f, &pivot_row);
                }
            }
        }
    }
    aug.slice(ndarray::s![.., n..]).to_owned()
}

/// Kernel regression at t = ∞ solved from scratch:
/// `K(Q, L) (K(L, L) + ridge I)⁻¹ Y` with zero initial outputs.
pub fn naive_regression(gram: ArrayView2<'_, f64>, ridge: f64, labeled: &[usize], y: ArrayView2<'_, f64>, query: &[usize]) -> Array2<f64> {
    let mut block = gram.select(Axis(0), labeled).select(Axis(1), labeled);
    block.diag_mut().mapv_inplace(|v| v + ridge);
    let inv = gauss_jordan_inverse(block.view());
    gram.select(Axis(0), query).select(Axis(1), labeled).dot(&inv).dot(&y)
}

pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mismatches between the argmax of a from-scratch regression on one-hot
/// `labels[labeled]` and `labels` over `risk`.
pub fn naive_mismatches(
    gram: ArrayView2<'_, f64>,
    ridge: f64,
    labeled: &[usize],
    labels: &[usize],
    width: usize,
    risk: &[usize],
) -> usize {
    let train: Vec<usize> = labeled.iter().map(|&p| labels[p]).collect();
    let preds = naive_regression(gram, ridge, labeled, one_hot(&train, width).view(), risk);
    preds
        .outer_iter()
        .zip(risk)
        .filter(|(row, &p)| argmax(row.view()) != labels[p])
        .count()
}

pub fn squared_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squares with centroids at the cluster means.
pub fn partition_cost(x: ArrayView2<'_, f64>, assignment: &[usize], k: usize) -> f64 {
    let d = x.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &c) in x.outer_iter().zip(assignment) {
        let mut s = sums.row_mut(c);
        s += &row;
        counts[c] += 1;
    }
    let mut cost = 0.0;
    for (row, &c) in x.outer_iter().zip(assignment) {
        let mean: Array1<f64> = sums.row(c).mapv(|v| v / counts[c] as f64);
        cost += squared_distance(row, mean.view());
    }
    cost
}

pub fn state(pool: usize, labeled: &[(usize, usize)], candidate: Vec<usize>) -> ALState {
    let mut s = ALState::with_labeled(pool, labeled).unwrap();
    s.set_candidate(candidate).unwrap();
    s
}

/// Random pool of `m` candidates and `l` labeled points with an NTK system
/// built by the library, plus random pseudo-labels over all positions.
pub fn random_pool(seed: u64, m: usize, l: usize, classes: usize) -> (KernelPool, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let x = randn((m + l, 4), &mut rng);
    let labeled: Vec<(usize, usize)> = (m..m + l).map(|i| (i, rng.random_range(0..classes))).collect();
    let st = state(m + l, &labeled, (0..m).collect());
    let pool = build_kernel_pool(x.view(), &st, classes, &NtkOptions::default(), seed).unwrap();
    let cpl: Vec<usize> = (0..m + l).map(|_| rng.random_range(0..classes)).collect();
    (pool, cpl)
}

/// Greedy NTKCPL that rebuilds the regression for every hypothetical.
pub fn naive_ntkcpl(pool: &KernelPool, b: usize, cpl: &[usize], classes: usize) -> Vec<usize> {
    let sys = &pool.system;
    let risk = pool.candidate_positions();
    let mut labeled = sys.labeled().to_vec();
    let mut picked = Vec::new();
    for _ in 0..b {
        let mut best: Option<(usize, usize)> = None;
        for &p in &risk {
            if labeled.contains(&p) {
                continue;
            }
            let mut trial = labeled.clone();
            trial.push(p);
            let m = naive_mismatches(sys.gram(), sys.ridge(), &trial, cpl, classes, &risk);
            if best.is_none_or(|(_, bm)| m < bm) {
                best = Some((p, m));
            }
        }
        let (p, _) = best.unwrap();
        labeled.push(p);
        picked.push(p);
    }
    picked
}
