//! High-fidelity forward models and the dynamics of the high-fidelity filter.

use nalgebra::DMatrix;

use super::{Dynamics, Particle};
use crate::assimilation::{GaussianNoise, ObservationOperator};
use crate::error::{config_err, shape_err, Result};
use crate::models::burgers::{advance, BurgersConfig, Rk4};
use crate::models::LinearGaussianSsm;
use crate::rng::{fill_standard_normal, rng_stream, stream_id, Purpose, StreamRng};

/// Deterministic map over one assimilation interval.
pub trait ForwardModel: Sync {
    fn state_dim(&self) -> usize;

    fn advance(&self, q: &mut [f64], m: &[f64]) -> Result<()>;
}

/// `q ↦ q`: state noise is the whole transition.
#[derive(Clone, Debug)]
pub struct RandomWalk {
    pub dim: usize,
}

impl ForwardModel for RandomWalk {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn advance(&self, _q: &mut [f64], _m: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// `q ↦ A q`.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel {
    pub a: DMatrix<f64>,
}

impl ForwardModel for LinearGaussianModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn advance(&self, q: &mut [f64], _m: &[f64]) -> Result<()> {
        let next: Vec<f64> = (0..q.len()).map(|i| (0..q.len()).map(|j| self.a[(i, j)] * q[j]).sum()).collect();
        q.copy_from_slice(&next);
        Ok(())
    }
}

/// `obs_stride` Burgers solver steps.
#[derive(Clone, Debug)]
pub struct BurgersModel {
    pub cfg: BurgersConfig,
}

impl ForwardModel for BurgersModel {
    fn state_dim(&self) -> usize {
        self.cfg.nx
    }

    fn advance(&self, q: &mut [f64], _m: &[f64]) -> Result<()> {
        let mut ws = Rk4::new(q.len());
        advance(&self.cfg, q, self.cfg.obs_stride, &mut ws)
    }
}

/// Bootstrap dynamics `q ← F(q, m) + ξ`, `m ← m + ζ`.
#[derive(Clone, Debug)]
pub struct HfDynamics<F> {
    pub model: F,
    pub state_noise: GaussianNoise,
    pub param_noise: GaussianNoise,
    pub observation: ObservationOperator,
    pub obs_std: f64,
}

impl<F: ForwardModel> HfDynamics<F> {
    pub fn new(
        model: F,
        state_noise: GaussianNoise,
        param_noise: GaussianNoise,
        observation: ObservationOperator,
        obs_std: f64,
    ) -> Result<Self> {
        let d = model.state_dim();
        if state_noise.std.len() != d || observation.state_dim != d {
            return Err(shape_err!("state noise and observation operator must match state dimension {d}"));
        }
        if !(obs_std > 0.0) {
            return Err(config_err!("observation std must be positive"));
        }
        Ok(HfDynamics { model, state_noise, param_noise, observation, obs_std })
    }
}

impl<F: ForwardModel> Dynamics for HfDynamics<F> {
    fn propagate(&self, chunk: &mut [Particle], rngs: &mut [StreamRng]) -> Result<()> {
        for (p, rng) in chunk.iter_mut().zip(rngs) {
            if p.params.len() != self.param_noise.std.len() {
                return Err(shape_err!("particle has {} parameters, noise law {}", p.params.len(), self.param_noise.std.len()));
            }
            self.model.advance(&mut p.state, &p.params)?;
            self.state_noise.perturb(&mut p.state, rng);
            self.param_noise.perturb(&mut p.params, rng);
        }
        Ok(())
    }

    fn decode(&self, chunk: &[Particle]) -> Result<Vec<Vec<f64>>> {
        Ok(chunk.iter().map(|p| p.state.clone()).collect())
    }

    fn observation(&self) -> &ObservationOperator {
        &self.observation
    }

    fn obs_std(&self) -> f64 {
        self.obs_std
    }
}

/// Filter dynamics for a linear-Gaussian model with diagonal `Q`, `R = r·I`
/// and an `H` whose rows select state components.
pub fn ssm_dynamics(ssm: &LinearGaussianSsm) -> Result<HfDynamics<LinearGaussianModel>> {
    ssm.validate()?;
    let d = ssm.state_dim();
    let offdiag = |m: &DMatrix<f64>| (0..m.nrows()).any(|i| (0..m.ncols()).any(|j| i != j && m[(i, j)] != 0.0));
    if offdiag(&ssm.q) || offdiag(&ssm.r) {
        return Err(config_err!("particle filter needs diagonal process and observation covariances"));
    }
    let r0 = ssm.r[(0, 0)];
    if (0..ssm.obs_dim()).any(|i| ssm.r[(i, i)] != r0) {
        return Err(config_err!("observation noise must be isotropic"));
    }
    let mut indices = Vec::with_capacity(ssm.obs_dim());
    for i in 0..ssm.obs_dim() {
        let row: Vec<f64> = (0..d).map(|j| ssm.h[(i, j)]).collect();
        let ones: Vec<usize> = (0..d).filter(|&j| row[j] == 1.0).collect();
        if ones.len() != 1 || row.iter().filter(|v| **v != 0.0).count() != 1 {
            return Err(config_err!("observation row {i} is not a component selector"));
        }
        indices.push(ones[0]);
    }
    HfDynamics::new(
        LinearGaussianModel { a: ssm.a.clone() },
        GaussianNoise::new((0..d).map(|i| ssm.q[(i, i)].sqrt()).collect())?,
        GaussianNoise::new(Vec::new())?,
        ObservationOperator::new(indices, d)?,
        r0.sqrt(),
    )
}

/// `n` draws from the initial law `N(m0, P0)` (diagonal `P0`).
pub fn ssm_initial_particles(ssm: &LinearGaussianSsm, n: usize, seed: u64) -> Vec<Particle> {
    let d = ssm.state_dim();
    (0..n)
        .map(|i| {
            let mut rng = rng_stream(seed, stream_id(Purpose::Initial, 0, i as u64));
            let mut e = vec![0.0; d];
            fill_standard_normal(&mut rng, &mut e);
            let x = (0..d).map(|j| ssm.m0[j] + ssm.p0[(j, j)].max(0.0).sqrt() * e[j]).collect();
            Particle::new(x, Vec::new())
        })
        .collect()
}
