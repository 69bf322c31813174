//! Modality-aware graph convolutional diffusion (MGD): k propagation
//! steps `H^(l) = β·Â·H^(l−1) + α·H^(0)` over the shared normalized
//! adjacency, scaled by the closed-form normalizer γ, with dropout on
//! both ends.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kgdata::NormalizedAdjacency;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// Residual retention coefficient α ≥ 0.
    pub alpha: f64,
    /// Neighborhood propagation coefficient β ≥ 0.
    pub beta: f64,
    /// Propagation steps k ≥ 1.
    pub k: usize,
    pub dropout: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            alpha: 0.1,
            beta: 0.9,
            k: 4,
            dropout: 0.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) {
        assert!(self.alpha >= 0.0 && self.beta >= 0.0, "coefficients must be non-negative");
        assert!(self.k >= 1, "diffusion needs at least one step");
        assert!((0.0..1.0).contains(&self.dropout), "dropout must be in [0,1)");
        assert!(gamma(self) > 0.0, "gamma must be positive");
    }
}

/// `γ = βᵏ + α·Σ_{c=0}^{k−1} βᶜ` by direct summation, exact at β = 1.
pub fn gamma(config: &DiffusionConfig) -> f64 {
    let mut pow = 1.0;
    let mut geom = 0.0;
    for _ in 0..config.k {
        geom += pow;
        pow *= config.beta;
    }
    pow + config.alpha * geom
}

/// Recorded k-step diffusion: input dropout, k propagation steps,
/// scaling by `1/γ`, output dropout.
pub fn diffuse(
    h0: &Tensor,
    adj: &NormalizedAdjacency,
    config: &DiffusionConfig,
    train: bool,
    rng: &mut impl Rng,
) -> Tensor {
    assert_eq!(adj.dimension, h0.rows, "diffusion dimension mismatch");
    config.validate();
    let base = h0.dropout(config.dropout, train, rng);
    let residual = base.scale(config.alpha);
    let mut h = base.clone();
    for _ in 0..config.k {
        h = h.sparse_lmul(&adj.matrix).scale(config.beta).add(&residual);
    }
    h.scale(1.0 / gamma(config))
        .dropout(config.dropout, train, rng)
}
