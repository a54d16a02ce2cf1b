//! The latent-space particle filter: encode once, then step, decode, weight
//! and resample latent particles.

use rayon::prelude::*;

use super::{run_filter, Dynamics, FilterConfig, FilterResult, Particle, PARTICLE_CHUNK};
use crate::assimilation::{GaussianNoise, ObservationOperator};
use crate::error::{config_err, shape_err, Result};
use crate::nn::stepper::pad_history;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Encoder, latent stepper and decoder acting on physical-unit tensors.
pub trait Surrogate: Sync {
    fn state_dim(&self) -> usize;

    fn latent_dim(&self) -> usize;

    fn param_dim(&self) -> usize;

    /// Number of latent states the stepper reads (`k + 1`).
    fn window(&self) -> usize;

    /// `[B, state_dim]`, `[B, param_dim]` -> `[B, latent_dim]`
    fn encode(&self, states: &Tensor, params: &Tensor) -> Result<Tensor>;

    /// `[B, window, latent_dim]`, `[B, param_dim]` -> `[B, latent_dim]`
    fn step(&self, windows: &Tensor, params: &Tensor) -> Result<Tensor>;

    /// `[B, latent_dim]`, `[B, param_dim]` -> `[B, state_dim]`
    fn decode(&self, z: &Tensor, params: &Tensor) -> Result<Tensor>;
}

impl<S: Surrogate + ?Sized> Surrogate for &S {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }

    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }

    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }

    fn window(&self) -> usize {
        (**self).window()
    }

    fn encode(&self, states: &Tensor, params: &Tensor) -> Result<Tensor> {
        (**self).encode(states, params)
    }

    fn step(&self, windows: &Tensor, params: &Tensor) -> Result<Tensor> {
        (**self).step(windows, params)
    }

    fn decode(&self, z: &Tensor, params: &Tensor) -> Result<Tensor> {
        (**self).decode(z, params)
    }
}

/// Identity encoder and decoder, and a stepper that repeats the latest state.
#[derive(Clone, Debug)]
pub struct IdentitySurrogate {
    pub dim: usize,
    pub param_dim: usize,
}

impl Surrogate for IdentitySurrogate {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn window(&self) -> usize {
        1
    }

    fn encode(&self, states: &Tensor, _params: &Tensor) -> Result<Tensor> {
        Ok(states.clone())
    }

    fn step(&self, windows: &Tensor, _params: &Tensor) -> Result<Tensor> {
        let s = windows.shape();
        let (b, w, l) = (s[0], s[1], s[2]);
        let rows: Vec<f64> = (0..b).flat_map(|i| windows.data()[(i * w + w - 1) * l..(i * w + w) * l].to_vec()).collect();
        Tensor::new(&[b, l], rows)
    }

    fn decode(&self, z: &Tensor, _params: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }
}

/// `z ← f(z_{n−k..n}, m) + ξ̂`, `m ← m + ζ`, observed through the decoder.
#[derive(Clone, Debug)]
pub struct LatentDynamics<S> {
    pub surrogate: S,
    pub latent_noise: GaussianNoise,
    pub param_noise: GaussianNoise,
    pub observation: ObservationOperator,
    pub obs_std: f64,
    /// Stepper applications per assimilation interval.
    pub steps_per_obs: usize,
}

impl<S: Surrogate> LatentDynamics<S> {
    pub fn new(
        surrogate: S,
        latent_noise: GaussianNoise,
        param_noise: GaussianNoise,
        observation: ObservationOperator,
        obs_std: f64,
    ) -> Result<Self> {
        if latent_noise.std.len() != surrogate.latent_dim() || param_noise.std.len() != surrogate.param_dim() {
            return Err(shape_err!("noise laws must match latent and parameter dimensions"));
        }
        if observation.state_dim != surrogate.state_dim() {
            return Err(shape_err!("observation operator expects {} states", observation.state_dim));
        }
        if !(obs_std > 0.0) {
            return Err(config_err!("observation std must be positive"));
        }
        Ok(LatentDynamics { surrogate, latent_noise, param_noise, observation, obs_std, steps_per_obs: 1 })
    }

    fn params(&self, chunk: &[Particle]) -> Result<Tensor> {
        let d = self.surrogate.param_dim();
        if chunk.iter().any(|p| p.params.len() != d) {
            return Err(shape_err!("every particle needs {d} parameters"));
        }
        Tensor::new(&[chunk.len(), d], chunk.iter().flat_map(|p| p.params.iter().copied()).collect())
    }
}

impl<S: Surrogate> Dynamics for LatentDynamics<S> {
    fn propagate(&self, chunk: &mut [Particle], rngs: &mut [StreamRng]) -> Result<()> {
        let (b, w, l) = (chunk.len(), self.surrogate.window(), self.surrogate.latent_dim());
        let params = self.params(chunk)?;
        let mut trajs: Vec<Vec<Vec<f64>>> = chunk
            .iter()
            .map(|p| {
                let mut t = p.history.clone();
                t.push(p.state.clone());
                pad_history(&t, w)
            })
            .collect();
        for _ in 0..self.steps_per_obs.max(1) {
            let windows: Vec<f64> = trajs.iter().flat_map(|t| t[t.len() - w..].concat()).collect();
            let next = self.surrogate.step(&Tensor::new(&[b, w, l], windows)?, &params)?;
            if !next.all_finite() {
                return Err(crate::DlspfError::NonFinite("latent step produced non-finite values".into()));
            }
            for (i, t) in trajs.iter_mut().enumerate() {
                t.push(next.row(i).to_vec());
            }
        }
        for ((p, rng), mut t) in chunk.iter_mut().zip(rngs).zip(trajs) {
            let mut z = t.pop().expect("at least one step");
            self.latent_noise.perturb(&mut z, rng);
            self.param_noise.perturb(&mut p.params, rng);
            p.state = z;
            let keep = w.saturating_sub(1);
            p.history = t.split_off(t.len().saturating_sub(keep));
        }
        Ok(())
    }

    fn decode(&self, chunk: &[Particle]) -> Result<Vec<Vec<f64>>> {
        let l = self.surrogate.latent_dim();
        let z = Tensor::new(&[chunk.len(), l], chunk.iter().flat_map(|p| p.state.iter().copied()).collect())?;
        let q = self.surrogate.decode(&z, &self.params(chunk)?)?;
        if !q.all_finite() {
            return Err(crate::DlspfError::NonFinite("decoder produced non-finite values".into()));
        }
        Ok((0..chunk.len()).map(|i| q.row(i).to_vec()).collect())
    }

    fn observation(&self) -> &ObservationOperator {
        &self.observation
    }

    fn obs_std(&self) -> f64 {
        self.obs_std
    }
}

/// Encodes the initial ensemble and runs the latent filter.
///
/// The snapshots hold both the latent particles and their decoded states.
pub fn run_dlspf<S: Surrogate>(
    dynamics: &LatentDynamics<S>,
    initial_states: &[Vec<f64>],
    initial_params: &[Vec<f64>],
    observations: &[Vec<f64>],
    cfg: &FilterConfig,
) -> Result<FilterResult> {
    let s = &dynamics.surrogate;
    if initial_states.len() != initial_params.len() {
        return Err(shape_err!("{} initial states but {} parameter vectors", initial_states.len(), initial_params.len()));
    }
    if initial_states.iter().any(|q| q.len() != s.state_dim()) {
        return Err(shape_err!("initial states must have length {}", s.state_dim()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| config_err!("thread pool: {e}"))?;
    let encoded: Vec<Vec<Particle>> = pool.install(|| {
        initial_states
            .par_chunks(PARTICLE_CHUNK)
            .zip(initial_params.par_chunks(PARTICLE_CHUNK))
            .map(|(qs, ms)| {
                let q = Tensor::from_rows(qs)?;
                let m = Tensor::new(&[ms.len(), s.param_dim()], ms.concat())?;
                let z = s.encode(&q, &m)?;
                Ok((0..qs.len()).map(|i| Particle::new(z.row(i).to_vec(), ms[i].clone())).collect())
            })
            .collect::<Result<_>>()
    })?;
    run_filter(dynamics, encoded.concat(), observations, cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_step_repeats_last_state() {
        let s = IdentitySurrogate { dim: 2, param_dim: 0 };
        let w = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = s.step(&w, &Tensor::zeros(&[2, 0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    /// A stepper that adds one to every latent coordinate, with memory two.
    struct Counter;

    impl Surrogate for Counter {
        fn state_dim(&self) -> usize {
            1
        }
        fn latent_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            0
        }
        fn window(&self) -> usize {
            3
        }
        fn encode(&self, states: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok(states.clone())
        }
        fn step(&self, windows: &Tensor, _: &Tensor) -> Result<Tensor> {
            let b = windows.shape()[0];
            Tensor::new(&[b, 1], (0..b).map(|i| windows.data()[i * 3 + 2] + 1.0).collect())
        }
        fn decode(&self, z: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok(z.clone())
        }
    }

    #[test]
    fn history_is_trimmed_to_memory() {
        let dynamics = LatentDynamics::new(
            Counter,
            GaussianNoise::isotropic(1, 0.0).unwrap(),
            GaussianNoise::new(vec![]).unwrap(),
            ObservationOperator::identity(1),
            1.0,
        )
        .unwrap();
        let mut ps = vec![Particle::new(vec![0.0], vec![])];
        let mut rngs = vec![crate::rng::rng_stream(0, 0)];
        for _ in 0..4 {
            dynamics.propagate(&mut ps, &mut rngs).unwrap();
        }
        assert_eq!(ps[0].state, vec![4.0]);
        assert_eq!(ps[0].history, vec![vec![2.0], vec![3.0]]);
    }
}
