//! Gaussian-mixture benchmark data.
//!
//! Class means are drawn once from `N(0, separation² / d · I)` so their
//! expected pairwise distance is about `separation·√2`; samples add isotropic
//! noise of standard deviation `sigma`. Train and test sets share the means.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSet;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            num_classes: 8,
            dim: 16,
            train_size: 2000,
            test_size: 2000,
            separation: 1.0,
            sigma: 0.27,
            seed: 0,
        }
    }
}

fn draw(means: &Array2<f64>, n: usize, sigma: f64, rng: &mut impl Rng) -> Result<FeatureSet> {
    let (c, d) = means.dim();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut x = Array2::<f64>::zeros((n, d));
    for (i, mut row) in x.outer_iter_mut().enumerate() {
        for (v, &mu) in row.iter_mut().zip(means.row(labels[i])) {
            let z: f64 = StandardNormal.sample(rng);
            *v = mu + sigma * z;
        }
    }
    FeatureSet::new(x, Some(labels), c)
}

/// Returns `(train, test)`.
pub fn gaussian_mixture(cfg: &MixtureConfig) -> Result<(FeatureSet, FeatureSet)> {
    if cfg.num_classes == 0 || cfg.dim == 0 || cfg.train_size == 0 || cfg.test_size == 0 {
        return Err(Error::Config("mixture sizes must all be at least 1".into()));
    }
    if !(cfg.sigma >= 0.0 && cfg.separation >= 0.0) {
        return Err(Error::Config("sigma and separation must be >= 0".into()));
    }
    let mut rng = crate::seeded_rng(cfg.seed);
    let scale = cfg.separation / (cfg.dim as f64).sqrt();
    let means = Array2::from_shape_simple_fn((cfg.num_classes, cfg.dim), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    let train = draw(&means, cfg.train_size, cfg.sigma, &mut rng)?;
    let test = draw(&means, cfg.test_size, cfg.sigma, &mut rng)?;
    Ok((train, test))
}
