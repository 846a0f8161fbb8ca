//! Local geometric analysis of feature extraction in feedforward networks.
//!
//! For a weakly dependent pair `(X, Y)` over finite alphabets, the excess
//! risk of a layer is approximated by a quadratic surrogate whose optimum is
//! a truncated SVD of the loss-whitened Bayes-action matrix `B̃`. The crate
//! builds the distributions, losses and geometry, solves the low-rank
//! problems layer by layer, and trains reference networks to compare against.

pub mod activations;
pub mod dist;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod layerwise;
pub mod linalg;
pub mod losses;
pub mod lowrank;
pub mod netlab;

pub use activations::Activation;
pub use dist::JointDistribution;
pub use error::{GeomError, Result};
pub use geometry::GeometryBundle;
pub use losses::LossModel;
pub use lowrank::LayerAnalysis;
pub use netlab::NetworkParams;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Deterministic generator used for every seeded draw in the crate.
pub fn seeded_rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}
