//! Two-layer MLP classifier trained on top of frozen features.
//!
//! `logits = ReLU(X·W1 + b1)·W2 + b2`. Parameters flatten in the fixed order
//! W1 (row-major, d×h), b1, W2 (row-major, h×C), b2; Jacobians, checkpoints
//! and the NTK all use that order. The ReLU derivative at exactly 0 is 0.
//!
//! Under [`InitScheme::NtkParameterization`] each layer computes
//! `(x·W + b) / sqrt(fan_in)` with standard-Gaussian `W, b`. The struct always
//! stores the effective (already scaled) weights, so the forward pass and
//! training are scheme-agnostic; only the flattened coordinates, and hence
//! Jacobians and the tangent kernel, are taken with respect to the unscaled
//! parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::Header;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLPW";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Standard-Gaussian parameters, each layer's output scaled by `1/sqrt(fan_in)`.
    NtkParameterization,
    /// Uniform on `±1/sqrt(fan_in)`, the usual default for linear layers.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub scheme: InitScheme,
    pub zero_output_init: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: Loss,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The CIFAR-10 "MLP64" recipe.
    fn default() -> Self {
        TrainConfig {
            hidden_width: 64,
            learning_rate: 0.3,
            momentum: 0.9,
            weight_decay: 3e-4,
            batch_size: 100,
            epochs: 100,
            loss: Loss::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Precondition(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Precondition("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch size must be at least 1".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::Precondition("hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn init_mlp(
    d: usize,
    h: usize,
    c: usize,
    scheme: InitScheme,
    zero_output_init: bool,
    rng: &mut impl Rng,
) -> Result<MlpParams> {
    if d == 0 || h == 0 || c == 0 {
        return Err(Error::Precondition(format!("MLP sizes must be >= 1, got d={d} h={h} C={c}")));
    }
    let mut draw = |fan_in: usize, shape: (usize, usize)| -> Array2<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        match scheme {
            InitScheme::NtkParameterization => Array2::from_shape_simple_fn(shape, || {
                let z: f64 = StandardNormal.sample(rng);
                z * bound
            }),
            InitScheme::Standard => {
                let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Array2::from_shape_simple_fn(shape, || u.sample(rng))
            }
        }
    };
    let w1 = draw(d, (d, h));
    let b1 = draw(d, (1, h)).remove_axis(Axis(0));
    let (w2, b2) = if zero_output_init {
        (Array2::zeros((h, c)), Array1::zeros(c))
    } else {
        (draw(h, (h, c)), draw(h, (1, c)).remove_axis(Axis(0)))
    };
    Ok(MlpParams {
        w1,
        b1,
        w2,
        b2,
        scheme,
        zero_output_init,
    })
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.ncols()
    }

    pub fn num_params(&self) -> usize {
        let (d, h, c) = (self.input_dim(), self.hidden_width(), self.num_classes());
        d * h + h + h * c + c
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Factors mapping flattened coordinates of each layer onto stored weights.
    pub fn layer_scales(&self) -> (f64, f64) {
        match self.scheme {
            InitScheme::NtkParameterization => (
                1.0 / (self.input_dim() as f64).sqrt(),
                1.0 / (self.hidden_width() as f64).sqrt(),
            ),
            InitScheme::Standard => (1.0, 1.0),
        }
    }

    fn pre_activation(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w1) + &self.b1
    }

    /// Hidden activations `ReLU(X·W1 + b1)`, the active-learning feature.
    pub fn penultimate(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.pre_activation(x).mapv_into(relu))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let a = self.penultimate(x)?;
        Ok(a.dot(&self.w2) + &self.b2)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(logits.outer_iter().map(|r| crate::argmax(r.iter().copied())).collect())
    }

    /// Gradient of logit `head` with respect to every parameter, flattened.
    pub fn jacobian_row(&self, x: ArrayView1<'_, f64>, head: usize) -> Array1<f64> {
        let (d, h, c) = (self.input_dim(), self.hidden_width(), self.num_classes());
        let (s1, s2) = self.layer_scales();
        let z = x.dot(&self.w1) + &self.b1;
        let mut out = Array1::zeros(self.num_params());
        let dz: Array1<f64> = Zip::from(&z)
            .and(self.w2.column(head))
            .map_collect(|&zj, &w| if zj > 0.0 { w * s1 } else { 0.0 });
        for i in 0..d {
            out.slice_mut(s![i * h..(i + 1) * h]).assign(&(&dz * x[i]));
        }
        let off = d * h;
        out.slice_mut(s![off..off + h]).assign(&dz);
        let off = off + h;
        for j in 0..h {
            out[off + j * c + head] = relu(z[j]) * s2;
        }
        out[off + h * c + head] = s2;
        out
    }

    /// C×P Jacobian of all logits at one input.
    pub fn jacobian(&self, x: ArrayView1<'_, f64>) -> Array2<f64> {
        let mut jac = Array2::zeros((self.num_classes(), self.num_params()));
        for head in 0..self.num_classes() {
            jac.row_mut(head).assign(&self.jacobian_row(x, head));
        }
        jac
    }

    /// Stored weights in flattening order, without any rescaling.
    fn stored_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    fn from_stored_values(&self, v: &[f64]) -> Result<MlpParams> {
        if v.len() != self.num_params() {
            return Err(Error::Shape(format!("{} values for {} parameters", v.len(), self.num_params())));
        }
        let (d, h, c) = (self.input_dim(), self.hidden_width(), self.num_classes());
        let (w1, rest) = v.split_at(d * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h * c);
        Ok(MlpParams {
            w1: Array2::from_shape_vec((d, h), w1.to_vec()).expect("sized"),
            b1: Array1::from(b1.to_vec()),
            w2: Array2::from_shape_vec((h, c), w2.to_vec()).expect("sized"),
            b2: Array1::from(b2.to_vec()),
            scheme: self.scheme,
            zero_output_init: self.zero_output_init,
        })
    }

    /// Per-coordinate factor from flattened coordinates to stored weights.
    fn coordinate_scales(&self) -> impl Iterator<Item = f64> {
        let (d, h, c) = (self.input_dim(), self.hidden_width(), self.num_classes());
        let (s1, s2) = self.layer_scales();
        std::iter::repeat_n(s1, d * h + h).chain(std::iter::repeat_n(s2, h * c + c))
    }

    /// Parameters in the coordinates Jacobians are taken in.
    pub fn flatten(&self) -> Array1<f64> {
        self.stored_values()
            .into_iter()
            .zip(self.coordinate_scales())
            .map(|(v, s)| v / s)
            .collect()
    }

    /// Inverse of [`MlpParams::flatten`] for a network of this shape.
    pub fn unflatten(&self, theta: ArrayView1<'_, f64>) -> Result<MlpParams> {
        if theta.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                theta.len(),
                self.num_params()
            )));
        }
        let v: Vec<f64> = theta.iter().zip(self.coordinate_scales()).map(|(t, s)| t * s).collect();
        self.from_stored_values(&v)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let flags = u32::from(self.scheme == InitScheme::NtkParameterization)
            | (u32::from(self.zero_output_init) << 1);
        let dims = [self.input_dim(), self.hidden_width(), self.num_classes()]
            .map(|v| u32::try_from(v).expect("network dimension fits in u32"));
        let header = Header {
            magic: *CHECKPOINT_MAGIC,
            fields: [1, dims[0], dims[1], dims[2], flags],
        };
        let io = |e| Error::io(path, e);
        header.write(&mut w).map_err(io)?;
        for v in self.stored_values() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let header =
            Header::read(&mut r).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
        if &header.magic != CHECKPOINT_MAGIC || header.fields[0] != 1 {
            return Err(Error::Format("not an MLPW version 1 checkpoint".into()));
        }
        let [_, d, h, c, flags] = header.fields.map(|v| v as usize);
        let shell = MlpParams {
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, c)),
            b2: Array1::zeros(c),
            scheme: if flags & 1 == 1 {
                InitScheme::NtkParameterization
            } else {
                InitScheme::Standard
            },
            zero_output_init: flags & 2 == 2,
        };
        let mut bytes = vec![0u8; shell.num_params() * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("truncated parameters: {e}")))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        shell.from_stored_values(&values)
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

fn one_hot(labels: &[usize], c: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), c));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    y
}

/// Mean loss over the given rows (no weight decay term).
pub fn dataset_loss(
    params: &MlpParams,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    loss: Loss,
) -> Result<f64> {
    let logits = params.forward(features)?;
    let y = one_hot(labels, params.num_classes());
    let n = labels.len() as f64;
    Ok(match loss {
        Loss::CrossEntropy => {
            let p = softmax_rows(logits.view());
            -labels
                .iter()
                .enumerate()
                .map(|(i, &l)| p[[i, l]].max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
                / n
        }
        Loss::Mse => 0.5 * (&logits - &y).mapv(|v| v * v).sum() / n,
    })
}

struct Grads {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

fn batch_gradients(params: &MlpParams, x: ArrayView2<'_, f64>, labels: &[usize], loss: Loss) -> Grads {
    let z = params.pre_activation(x);
    let a = z.mapv(relu);
    let logits = a.dot(&params.w2) + &params.b2;
    let y = one_hot(labels, params.num_classes());
    let scale = 1.0 / labels.len() as f64;
    let dlogits = match loss {
        Loss::CrossEntropy => (softmax_rows(logits.view()) - &y) * scale,
        Loss::Mse => (logits - &y) * scale,
    };
    let w2 = a.t().dot(&dlogits);
    let b2 = dlogits.sum_axis(Axis(0));
    let mut dz = dlogits.dot(&params.w2.t());
    Zip::from(&mut dz).and(&z).for_each(|g, &zv| {
        if zv <= 0.0 {
            *g = 0.0;
        }
    });
    Grads {
        w1: x.t().dot(&dz),
        b1: dz.sum_axis(Axis(0)),
        w2,
        b2,
    }
}

pub fn train_classifier(
    params: &MlpParams,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<MlpParams> {
    train_classifier_with_history(params, features, labels, cfg).map(|(p, _)| p)
}

/// Mini-batch SGD with momentum and L2 weight decay. Returns the trained
/// parameters and the full-data loss after every epoch.
pub fn train_classifier_with_history(
    params: &MlpParams,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(MlpParams, Vec<f64>)> {
    cfg.validate()?;
    params.check_input(features)?;
    if labels.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    if labels.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            features.nrows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= params.num_classes()) {
        return Err(Error::Precondition(format!(
            "label {bad} outside [0, {})",
            params.num_classes()
        )));
    }

    let mut p = params.clone();
    let mut v = Grads {
        w1: Array2::zeros(p.w1.raw_dim()),
        b1: Array1::zeros(p.b1.raw_dim()),
        w2: Array2::zeros(p.w2.raw_dim()),
        b2: Array1::zeros(p.b2.raw_dim()),
    };
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (lr, mu, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = features.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let g = batch_gradients(&p, xb.view(), &yb, cfg.loss);
            step(&mut p.w1, &mut v.w1, &g.w1, lr, mu, wd);
            step(&mut p.b1, &mut v.b1, &g.b1, lr, mu, wd);
            step(&mut p.w2, &mut v.w2, &g.w2, lr, mu, wd);
            step(&mut p.b2, &mut v.b2, &g.b2, lr, mu, wd);
        }
        history.push(dataset_loss(&p, features, labels, cfg.loss)?);
    }
    Ok((p, history))
}

fn step<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    velocity: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    Zip::from(param).and(velocity).and(grad).for_each(|w, v, &g| {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w -= lr * *v;
    });
}

/// BADGE embedding: the cross-entropy gradient with respect to W2 under the
/// hallucinated label `argmax logits`, flattened row-major (h×C).
pub fn grad_embedding(params: &MlpParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let a = params.penultimate(x)?;
    let logits = a.dot(&params.w2) + &params.b2;
    let mut p = softmax_rows(logits.view());
    for (i, row) in logits.outer_iter().enumerate() {
        let yhat = crate::argmax(row.iter().copied());
        p[[i, yhat]] -= 1.0;
    }
    let (m, h, c) = (x.nrows(), params.hidden_width(), params.num_classes());
    let mut out = Array2::zeros((m, h * c));
    for i in 0..m {
        let mut row = out.row_mut(i);
        for j in 0..h {
            for k in 0..c {
                row[j * c + k] = a[[i, j]] * p[[i, k]];
            }
        }
    }
    Ok(out)
}
