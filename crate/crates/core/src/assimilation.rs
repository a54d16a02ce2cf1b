//! Augmented states, Gaussian noise laws, observation operators and likelihoods.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{Decoder, NormStats};
use crate::rng::standard_normal;
use crate::tensor::Tensor;

/// `(q, m)` in high-fidelity space.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub q: Vec<f64>,
    pub m: Vec<f64>,
}

/// `(z, m)` in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAugmentedState {
    pub z: Vec<f64>,
    pub m: Vec<f64>,
}

/// Zero-mean Gaussian noise with a per-component standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub std: Vec<f64>,
}

impl GaussianNoise {
    pub fn new(std: Vec<f64>) -> Result<Self> {
        if std.iter().any(|s| !(*s >= 0.0)) {
            return Err(config_err!("noise std must be non-negative"));
        }
        Ok(GaussianNoise { std })
    }

    pub fn isotropic(dim: usize, std: f64) -> Result<Self> {
        Self::new(vec![std; dim])
    }

    /// Adds one draw to `x`. A normal variate is consumed for every component,
    /// including those with zero spread, so draw order never depends on `std`.
    pub fn perturb<R: Rng + ?Sized>(&self, x: &mut [f64], rng: &mut R) {
        for (v, s) in x.iter_mut().zip(&self.std) {
            let e = standard_normal(rng);
            *v += s * e;
        }
    }
}

/// Selects state components at sensor indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationOperator {
    pub indices: Vec<usize>,
    pub state_dim: usize,
}

impl ObservationOperator {
    pub fn new(indices: Vec<usize>, state_dim: usize) -> Result<Self> {
        if let Some(i) = indices.iter().find(|&&i| i >= state_dim) {
            return Err(shape_err!("sensor index {i} outside state of length {state_dim}"));
        }
        Ok(ObservationOperator { indices, state_dim })
    }

    pub fn identity(n: usize) -> Self {
        ObservationOperator { indices: (0..n).collect(), state_dim: n }
    }

    pub fn obs_dim(&self) -> usize {
        self.indices.len()
    }

    pub fn observe(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.state_dim {
            return Err(shape_err!("state has length {}, operator expects {}", q.len(), self.state_dim));
        }
        Ok(self.indices.iter().map(|&i| q[i]).collect())
    }
}

/// `Σᵢ −½ ln(2πσ²) − rᵢ² / (2σ²)`.
pub fn gaussian_log_likelihood(residual: &[f64], std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(config_err!("observation std must be positive, got {std}"));
    }
    let var = std * std;
    let c = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    Ok(residual.iter().map(|r| c - r * r / (2.0 * var)).sum())
}

/// Decodes, denormalizes and observes a latent state.
pub fn latent_observe(
    a: &LatentAugmentedState,
    decoder: &Decoder,
    h: &ObservationOperator,
    stats: &NormStats,
) -> Result<Vec<f64>> {
    let z = Tensor::new(&[1, a.z.len()], a.z.clone())?;
    let m = if decoder.cfg.param_dim > 0 {
        let mut mn = a.m.clone();
        stats.normalize_params(&mut mn);
        Some(Tensor::new(&[1, mn.len()], mn)?)
    } else {
        None
    };
    let mut q = decoder.decode(&z, m.as_ref())?.into_data();
    stats.denormalize_state(&mut q);
    h.observe(&q)
}
