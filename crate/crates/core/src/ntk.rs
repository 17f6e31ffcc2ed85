//! Empirical neural tangent kernel regression.
//!
//! The kernel is built from the Jacobian of a single designated output head
//! and shared across every output column (the `K ⊗ I` structure), so each
//! target column is an independent kernel regression. Predictions follow the
//! gradient-flow closed form
//!
//! ```text
//! f_t(x) = f0(x) + K(x, L) (K(L, L) + ridge·I)⁻¹ (I − exp(−t·K(L, L))) (Y − f0(L))
//! ```
//!
//! where the exponential vanishes at `t = ∞`.
//!
//! When the target width differs from the network's output width, `f0` is
//! taken from the designated head and broadcast across target columns. A
//! per-row constant shifts every column equally, so it never changes an
//! argmax.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Header;
use crate::linalg;
use crate::model::MlpParams;
use crate::{Error, Result};

pub const GRAM_MAGIC: &[u8; 4] = b"GRAM";

/// Anything whose per-sample parameter Jacobian defines a tangent kernel.
pub trait TangentModel: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
    fn jacobian_row(&self, x: ArrayView1<'_, f64>, head: usize) -> Array1<f64>;

    /// Gram matrix of head-`head` Jacobians; the default materializes J·Jᵀ.
    fn tangent_gram(&self, x: ArrayView2<'_, f64>, head: usize) -> Array2<f64> {
        jacobian_gram(self, x, head)
    }
}

/// Reference gram built from explicit Jacobian rows.
pub fn jacobian_gram<M: TangentModel + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    head: usize,
) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| model.jacobian_row(x.row(i), head))
        .collect();
    let mut jac = Array2::zeros((x.nrows(), model.num_params()));
    for (mut dst, src) in jac.outer_iter_mut().zip(&rows) {
        dst.assign(src);
    }
    jac.dot(&jac.t())
}

impl TangentModel for MlpParams {
    fn input_dim(&self) -> usize {
        MlpParams::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        self.num_classes()
    }

    fn num_params(&self) -> usize {
        MlpParams::num_params(self)
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        MlpParams::forward(self, x)
    }

    fn jacobian_row(&self, x: ArrayView1<'_, f64>, head: usize) -> Array1<f64> {
        MlpParams::jacobian_row(self, x, head)
    }

    /// `s1²·(X·Xᵀ + 1) ⊙ (A·Aᵀ) + s2²·(Φ·Φᵀ + 1)` with `Φ = ReLU(Z)`,
    /// `A = 1[Z > 0] ⊙ W2[:, head]` and per-layer scales `s1, s2`: the
    /// first-layer and second-layer blocks of J·Jᵀ without forming J.
    fn tangent_gram(&self, x: ArrayView2<'_, f64>, head: usize) -> Array2<f64> {
        let (s1, s2) = self.layer_scales();
        let z = x.dot(&self.w1) + &self.b1;
        let phi = z.mapv(|v| if v > 0.0 { v } else { 0.0 });
        let mut gram = (phi.dot(&phi.t()) + 1.0) * (s2 * s2);
        let w_head = self.w2.column(head);
        if w_head.iter().any(|&w| w != 0.0) {
            let mut a = z;
            for mut row in a.outer_iter_mut() {
                row.zip_mut_with(&w_head, |v, &w| *v = if *v > 0.0 { w } else { 0.0 });
            }
            let inputs = (x.dot(&x.t()) + 1.0) * (s1 * s1);
            gram += &(inputs * a.dot(&a.t()));
        }
        gram
    }
}

/// Bias-free linear map `f(x) = xᵀW`, W of shape d×C.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Array2<f64>,
}

impl TangentModel for LinearModel {
    fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn num_params(&self) -> usize {
        self.weights.len()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} columns, model expects {}", x.ncols(), self.input_dim())));
        }
        Ok(x.dot(&self.weights))
    }

    fn jacobian_row(&self, x: ArrayView1<'_, f64>, head: usize) -> Array1<f64> {
        let c = self.output_dim();
        let mut out = Array1::zeros(self.num_params());
        for (i, &xi) in x.iter().enumerate() {
            out[i * c + head] = xi;
        }
        out
    }
}

/// Training horizon of the gradient-flow predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Finite(f64),
    Infinite,
}

/// Gram and initial outputs over a fixed list of points, plus the inverse of
/// the ridge-regularized labeled block.
#[derive(Debug, Clone)]
pub struct KernelSystem {
    gram: Array2<f64>,
    f0: Array2<f64>,
    head: usize,
    labeled: Vec<usize>,
    inv_labeled: Array2<f64>,
    /// Why the labeled block could not be inverted; tolerated at finite t,
    /// whose eigendecomposition path never needs the inverse.
    singular: Option<String>,
    ridge: f64,
    time: Horizon,
}

/// `1e-4 · trace(gram) / M`.
pub fn default_ridge(gram: ArrayView2<'_, f64>) -> f64 {
    1e-4 * linalg::trace(gram) / gram.nrows() as f64
}

pub fn compute_gram<M: TangentModel + ?Sized>(
    model: &M,
    x: ArrayView2<'_, f64>,
    head: usize,
) -> Result<KernelSystem> {
    if x.nrows() == 0 {
        return Err(Error::Shape("kernel over zero points".into()));
    }
    if head >= model.output_dim() {
        return Err(Error::Shape(format!("head {head} out of {} outputs", model.output_dim())));
    }
    let f0 = model.forward(x)?;
    let gram = model.tangent_gram(x, head);
    Ok(KernelSystem::from_parts(gram, f0, head))
}

impl KernelSystem {
    /// Wraps a precomputed gram. Starts with no labeled points, ridge 0, t = ∞.
    pub fn from_parts(mut gram: Array2<f64>, f0: Array2<f64>, head: usize) -> Self {
        linalg::symmetrize(&mut gram);
        KernelSystem {
            gram,
            f0,
            head,
            labeled: Vec::new(),
            inv_labeled: Array2::zeros((0, 0)),
            singular: None,
            ridge: 0.0,
            time: Horizon::Infinite,
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::Precondition(format!("ridge must be finite and >= 0, got {ridge}")));
        }
        self.ridge = ridge;
        let labeled = std::mem::take(&mut self.labeled);
        self.set_labeled(&labeled)?;
        Ok(self)
    }

    pub fn with_time(mut self, time: Horizon) -> Result<Self> {
        if let Horizon::Finite(t) = time {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(Error::Precondition(format!("time must be finite and >= 0, got {t}")));
            }
        }
        if time == Horizon::Infinite {
            self.require_inverse()?;
        }
        self.time = time;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.gram.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gram.nrows() == 0
    }

    pub fn gram(&self) -> ArrayView2<'_, f64> {
        self.gram.view()
    }

    pub fn f0(&self) -> ArrayView2<'_, f64> {
        self.f0.view()
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    /// Inverse of the ridge-regularized labeled block. Zeros when the block
    /// is singular (only possible at finite t).
    pub fn inv_labeled(&self) -> ArrayView2<'_, f64> {
        self.inv_labeled.view()
    }

    fn require_inverse(&self) -> Result<()> {
        match &self.singular {
            Some(msg) => Err(Error::NumericalRank(msg.clone())),
            None => Ok(()),
        }
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn time(&self) -> Horizon {
        self.time
    }

    /// Initial outputs for `width` target columns.
    pub fn f0_for(&self, width: usize) -> Array2<f64> {
        if width == self.f0.ncols() {
            self.f0.clone()
        } else {
            let col = self.f0.column(self.head);
            Array2::from_shape_fn((self.len(), width), |(i, _)| col[i])
        }
    }

    fn check_position(&self, p: usize) -> Result<()> {
        if p >= self.len() {
            return Err(Error::Precondition(format!("position {p} outside system of {}", self.len())));
        }
        Ok(())
    }

    /// Replaces the labeled set and re-inverts its block directly.
    pub fn set_labeled(&mut self, positions: &[usize]) -> Result<()> {
        for (k, &p) in positions.iter().enumerate() {
            self.check_position(p)?;
            if positions[..k].contains(&p) {
                return Err(Error::Precondition(format!("position {p} labeled twice")));
            }
        }
        let mut block = self.gram.select(Axis(0), positions).select(Axis(1), positions);
        block.diag_mut().mapv_inplace(|v| v + self.ridge);
        self.singular = None;
        self.inv_labeled = if positions.is_empty() {
            Array2::zeros((0, 0))
        } else {
            match linalg::spd_inverse(block.view()) {
                Ok(inv) => inv,
                Err(Error::NumericalRank(msg)) if self.time != Horizon::Infinite => {
                    self.singular = Some(msg);
                    Array2::zeros((positions.len(), positions.len()))
                }
                Err(e) => return Err(e),
            }
        };
        self.labeled = positions.to_vec();
        Ok(())
    }

    /// Copy of `self` with `position` appended to the labeled set.
    pub fn extend_labeled(&self, position: usize) -> Result<KernelSystem> {
        let mut out = self.clone();
        out.extend_labeled_mut(position)?;
        Ok(out)
    }

    /// Block-inverse extension in O(|L|²):
    /// with `k = K(L, p)` and Schur complement `s = K(p, p) + ridge − kᵀ G k`,
    /// the new inverse is `[[G + G k kᵀ G / s, −G k / s], [−kᵀ G / s, 1 / s]]`.
    pub fn extend_labeled_mut(&mut self, position: usize) -> Result<()> {
        self.check_position(position)?;
        if self.labeled.contains(&position) {
            return Err(Error::Precondition(format!("position {position} is already labeled")));
        }
        let n = self.labeled.len();
        let k: Array1<f64> = self.labeled.iter().map(|&l| self.gram[[l, position]]).collect();
        let gk = self.inv_labeled.dot(&k);
        let diag = self.gram[[position, position]] + self.ridge;
        let schur = diag - k.dot(&gk);
        let degenerate = !(schur > diag.abs().max(f64::MIN_POSITIVE) * 1e-12);
        if self.singular.is_some() || (degenerate && self.time != Horizon::Infinite) {
            let mut positions = self.labeled.clone();
            positions.push(position);
            return self.set_labeled(&positions);
        }
        if degenerate {
            return Err(Error::NumericalRank(format!(
                "Schur complement {schur:e} for position {position}"
            )));
        }
        let mut next = Array2::zeros((n + 1, n + 1));
        {
            let mut top = next.slice_mut(s![..n, ..n]);
            top.assign(&self.inv_labeled);
            for i in 0..n {
                for j in 0..n {
                    top[[i, j]] += gk[i] * gk[j] / schur;
                }
            }
        }
        for i in 0..n {
            next[[i, n]] = -gk[i] / schur;
            next[[n, i]] = -gk[i] / schur;
        }
        next[[n, n]] = 1.0 / schur;
        self.inv_labeled = next;
        self.labeled.push(position);
        Ok(())
    }

    /// Closed-form predictions at `query` positions for targets given row-wise
    /// in labeled order.
    pub fn predict(&self, targets: ArrayView2<'_, f64>, query: &[usize]) -> Result<Array2<f64>> {
        if self.labeled.is_empty() {
            return Err(Error::Precondition("prediction needs at least one labeled point".into()));
        }
        if targets.nrows() != self.labeled.len() {
            return Err(Error::Shape(format!(
                "{} target rows for {} labeled points",
                targets.nrows(),
                self.labeled.len()
            )));
        }
        for &q in query {
            self.check_position(q)?;
        }
        let width = targets.ncols();
        let f0 = self.f0_for(width);
        let f0_query = f0.select(Axis(0), query);
        let resid = &targets - &f0.select(Axis(0), &self.labeled);
        let coef = match self.time {
            Horizon::Infinite => {
                self.require_inverse()?;
                self.inv_labeled.dot(&resid)
            }
            Horizon::Finite(t) => {
                let block = self.gram.select(Axis(0), &self.labeled).select(Axis(1), &self.labeled);
                let (w, v) = linalg::symmetric_eigen(block.view());
                let scale = w.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
                let filt = w.mapv(|lam| {
                    let denom = lam + self.ridge;
                    if denom.abs() <= 1e-12 * scale {
                        t
                    } else {
                        -(-t * lam).exp_m1() / denom
                    }
                });
                v.dot(&(Array2::from_diag(&filt).dot(&v.t().dot(&resid))))
            }
        };
        let k_ql = self.gram.select(Axis(0), query).select(Axis(1), &self.labeled);
        Ok(f0_query + k_ql.dot(&coef))
    }

    pub fn save_gram(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let m = u32::try_from(self.len()).map_err(|_| Error::Format("gram too large".into()))?;
        let header = Header {
            magic: *GRAM_MAGIC,
            fields: [1, m, m, 0, 0],
        };
        let io = |e| Error::io(path, e);
        header.write(&mut w).map_err(io)?;
        for v in self.gram.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub fn one_hot(labels: &[usize], width: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), width));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    y
}

/// Closed-form predictions for one-hot targets.
pub fn ntk_predict(
    sys: &KernelSystem,
    labels: ArrayView2<'_, f64>,
    query: &[usize],
) -> Result<Array2<f64>> {
    sys.predict(labels, query)
}

/// Pseudo-labeled pool against which risk is measured.
#[derive(Debug, Clone, Copy)]
pub struct RiskTarget<'a> {
    /// Class of every system position.
    pub labels: &'a [usize],
    pub num_classes: usize,
    /// Positions whose errors are averaged.
    pub risk_set: &'a [usize],
}

/// Fraction of `risk_set` whose argmax prediction, from kernel regression on
/// the labeled positions (plus `hypothetical`) with one-hot `labels` targets,
/// differs from `labels`. Argmax ties go to the lowest class.
pub fn estimate_pool_risk(
    sys: &KernelSystem,
    target: RiskTarget<'_>,
    hypothetical: Option<usize>,
) -> Result<f64> {
    Ok(pool_mismatches(sys, target, hypothetical)? as f64 / target.risk_set.len().max(1) as f64)
}

pub fn pool_mismatches(
    sys: &KernelSystem,
    target: RiskTarget<'_>,
    hypothetical: Option<usize>,
) -> Result<usize> {
    if target.labels.len() != sys.len() {
        return Err(Error::Shape(format!(
            "{} pseudo-labels for a system of {}",
            target.labels.len(),
            sys.len()
        )));
    }
    let extended;
    let sys = match hypothetical {
        Some(p) => {
            if sys.labeled().contains(&p) {
                return Err(Error::Precondition(format!("hypothetical position {p} is already labeled")));
            }
            extended = sys.extend_labeled(p)?;
            &extended
        }
        None => sys,
    };
    let train: Vec<usize> = sys.labeled().iter().map(|&l| target.labels[l]).collect();
    let preds = sys.predict(one_hot(&train, target.num_classes).view(), target.risk_set)?;
    Ok(preds
        .outer_iter()
        .zip(target.risk_set)
        .filter(|(row, &p)| crate::argmax(row.iter().copied()) != target.labels[p])
        .count())
}

/// Rank-one workspace for greedy look-ahead selection at t = ∞.
///
/// Keeps, over the risk set `R`, the current predictions `F` and the residual
/// kernel `S = K(R, R) − K(R, L) G K(L, R)`. Adding position `c` with target
/// `y` changes every prediction by `S(x, c) (y − F(c)) / (S(c, c) + ridge)`,
/// so one hypothetical costs O(|R|·width) and a commit costs O(|R|² + |L|²).
#[derive(Debug, Clone)]
pub struct GreedyWorkspace {
    sys: KernelSystem,
    risk_set: Vec<usize>,
    local: Vec<Option<usize>>,
    width: usize,
    preds: Array2<f64>,
    residual: Array2<f64>,
}

impl GreedyWorkspace {
    /// `targets` holds one row per labeled position of `sys`.
    pub fn new(sys: KernelSystem, targets: ArrayView2<'_, f64>, risk_set: &[usize]) -> Result<Self> {
        if sys.time() != Horizon::Infinite {
            return Err(Error::Precondition("the greedy workspace requires t = infinity".into()));
        }
        if targets.nrows() != sys.labeled().len() {
            return Err(Error::Shape(format!(
                "{} target rows for {} labeled points",
                targets.nrows(),
                sys.labeled().len()
            )));
        }
        let mut local = vec![None; sys.len()];
        for (k, &p) in risk_set.iter().enumerate() {
            sys.check_position(p)?;
            if local[p].replace(k).is_some() {
                return Err(Error::Precondition(format!("position {p} repeated in risk set")));
            }
        }
        let width = targets.ncols();
        let f0 = sys.f0_for(width);
        let k_rr = sys.gram.select(Axis(0), risk_set).select(Axis(1), risk_set);
        let (preds, residual) = if sys.labeled.is_empty() {
            (f0.select(Axis(0), risk_set), k_rr)
        } else {
            let k_rl = sys.gram.select(Axis(0), risk_set).select(Axis(1), &sys.labeled);
            let q = k_rl.dot(&sys.inv_labeled);
            let resid = &targets - &f0.select(Axis(0), &sys.labeled);
            let preds = f0.select(Axis(0), risk_set) + q.dot(&resid);
            let mut residual = k_rr - q.dot(&k_rl.t());
            linalg::symmetrize(&mut residual);
            (preds, residual)
        };
        Ok(GreedyWorkspace {
            sys,
            risk_set: risk_set.to_vec(),
            local,
            width,
            preds,
            residual,
        })
    }

    pub fn system(&self) -> &KernelSystem {
        &self.sys
    }

    /// Current predictions over the risk set, in risk-set order.
    pub fn predictions(&self) -> ArrayView2<'_, f64> {
        self.preds.view()
    }

    pub fn risk_set(&self) -> &[usize] {
        &self.risk_set
    }

    fn local_index(&self, position: usize) -> Result<usize> {
        self.local
            .get(position)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Precondition(format!("position {position} is not in the risk set")))
    }

    fn update_terms(&self, k: usize, target: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
        let diag = self.sys.gram[[self.risk_set[k], self.risk_set[k]]] + self.sys.ridge;
        let schur = self.residual[[k, k]] + self.sys.ridge;
        if !(schur > diag.abs().max(f64::MIN_POSITIVE) * 1e-12) {
            return Err(Error::NumericalRank(format!(
                "Schur complement {schur:e} for position {}",
                self.risk_set[k]
            )));
        }
        let delta = &target - &self.preds.row(k);
        Ok((schur, delta))
    }

    /// Number of risk-set mismatches against `labels` (indexed by system
    /// position) after hypothetically adding `position` with one-hot `class`.
    pub fn mismatches_with(&self, position: usize, class: usize, labels: &[usize]) -> Result<usize> {
        let k = self.local_index(position)?;
        let mut target = Array1::zeros(self.width);
        target[class] = 1.0;
        let (schur, delta) = self.update_terms(k, target.view())?;
        let col = self.residual.row(k);
        let delta = delta.as_slice().expect("contiguous");
        let mut count = 0;
        let mut buf = vec![0.0; self.width];
        for (x, row) in self.preds.outer_iter().enumerate() {
            let a = col[x] / schur;
            for ((b, &f), &d) in buf.iter_mut().zip(row.iter()).zip(delta) {
                *b = f + a * d;
            }
            if crate::argmax(buf.iter().copied()) != labels[self.risk_set[x]] {
                count += 1;
            }
        }
        Ok(count)
    }

    /// Total L1 change of risk-set predictions if `position` joined with
    /// target `class`.
    pub fn output_change_with(&self, position: usize, class: usize) -> Result<f64> {
        let k = self.local_index(position)?;
        let mut target = Array1::zeros(self.width);
        target[class] = 1.0;
        let (schur, delta) = self.update_terms(k, target.view())?;
        let l1 = delta.iter().map(|v| v.abs()).sum::<f64>();
        Ok(self.residual.row(k).iter().map(|v| v.abs()).sum::<f64>() * l1 / schur)
    }

    /// Adds `position` with one-hot `class` permanently.
    pub fn commit(&mut self, position: usize, class: usize) -> Result<()> {
        let k = self.local_index(position)?;
        let mut target = Array1::zeros(self.width);
        target[class] = 1.0;
        let (schur, delta) = self.update_terms(k, target.view())?;
        self.sys.extend_labeled_mut(position)?;
        let col = self.residual.row(k).to_owned();
        for (x, mut row) in self.preds.outer_iter_mut().enumerate() {
            row.scaled_add(col[x] / schur, &delta);
        }
        for (x, mut row) in self.residual.outer_iter_mut().enumerate() {
            row.scaled_add(-col[x] / schur, &col);
        }
        Ok(())
    }
}
