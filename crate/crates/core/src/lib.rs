//! Pool-based active learning that picks samples by minimizing the estimated
//! 0-1 risk over the whole candidate pool.
//!
//! The trained classifier is approximated by kernel regression with the
//! empirical neural tangent kernel of a small MLP, and the missing pool labels
//! are approximated by clustering pseudo-labels (CPL). Baseline strategies
//! (random, entropy, coreset, BADGE, look-ahead) share the same selection
//! contract, and [`harness`] drives seeded multi-run experiments.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`dataset`] | feature files, oracle simulation, pool bookkeeping |
//! | [`model`] | MLP classifier, training, Jacobians, gradient embeddings |
//! | [`ntk`] | empirical NTK gram, closed-form prediction, pool risk |
//! | [`clustering`] | k-means, constrained k-means, CPL generation |
//! | [`strategies`] | query strategies |
//! | [`analysis`] | label mapping, error decomposition, coverage |
//! | [`harness`] | experiment configuration, execution, reports |

pub mod analysis;
pub mod clustering;
pub mod dataset;
mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod ntk;
pub mod strategies;
pub mod synthetic;

pub use error::{Error, Result};

/// Deterministic generator used everywhere a seed is accepted.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a `u64` seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Index of the largest value, ties resolved toward the lowest index.
pub(crate) fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}
