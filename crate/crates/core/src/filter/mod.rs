//! Bootstrap particle filtering in high-fidelity and latent space.

pub mod analysis;
pub mod hf;
pub mod latent;

use std::time::Instant;

use rayon::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assimilation::{gaussian_log_likelihood, ObservationOperator};
use crate::error::{config_err, shape_err, DlspfError, Result};
use crate::rng::{rng_stream, stream_id, Purpose, StreamRng};
use crate::tensor::Tensor;

pub use analysis::{
    estimate_importance_ratio, fit_loglog_slope, mc_convergence_test, ConvergenceFit, ImportanceRatioDiagnostic,
};
pub use hf::{
    ssm_dynamics, ssm_initial_particles, BurgersModel, ForwardModel, HfDynamics, LinearGaussianModel, RandomWalk,
};
pub use latent::{run_dlspf, IdentitySurrogate, LatentDynamics, Surrogate};

/// Particles are processed in chunks of this size; the split never depends
/// on the worker count.
pub const PARTICLE_CHUNK: usize = 32;

/// Normalization tolerance for weight vectors.
pub const WEIGHT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    /// Physical state (high-fidelity) or latent state.
    pub state: Vec<f64>,
    pub params: Vec<f64>,
    /// Earlier states, oldest first; only used by steppers with memory.
    pub history: Vec<Vec<f64>>,
}

impl Particle {
    pub fn new(state: Vec<f64>, params: Vec<f64>) -> Self {
        Particle { state, params, history: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub particles: Vec<Particle>,
    pub weights: Vec<f64>,
    pub step: usize,
}

impl Ensemble {
    pub fn uniform(particles: Vec<Particle>) -> Self {
        let n = particles.len();
        Ensemble { particles, weights: vec![1.0 / n as f64; n], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

/// Model-specific parts of a bootstrap filter.
pub trait Dynamics: Sync {
    /// Advances a chunk of particles over one assimilation interval, including
    /// model and parameter noise. `rngs[i]` belongs to `chunk[i]`.
    fn propagate(&self, chunk: &mut [Particle], rngs: &mut [StreamRng]) -> Result<()>;

    /// Physical states of a chunk (identity in high-fidelity space).
    fn decode(&self, chunk: &[Particle]) -> Result<Vec<Vec<f64>>>;

    fn observation(&self) -> &ObservationOperator;

    fn obs_std(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Resample when ESS drops below this; `None` means `N/2`.
    #[serde(default)]
    pub ess_threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl FilterConfig {
    pub fn new(n_particles: usize, seed: u64) -> Self {
        FilterConfig { n_particles, ess_threshold: None, seed, workers: 1 }
    }

    pub fn threshold(&self) -> f64 {
        self.ess_threshold.unwrap_or(self.n_particles as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 || self.workers == 0 {
            return Err(config_err!("need at least one particle and one worker"));
        }
        let t = self.threshold();
        if self.ess_threshold.is_some() && !(1.0..=self.n_particles as f64).contains(&t) {
            return Err(config_err!("resample threshold {t} outside [1, N]"));
        }
        Ok(())
    }
}

/// `wᵢ ∝ prevᵢ · exp(llᵢ)`, normalized with log-sum-exp.
pub fn update_weights(prev: &[f64], log_lik: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != log_lik.len() {
        return Err(shape_err!("{} weights vs {} likelihoods", prev.len(), log_lik.len()));
    }
    let logs: Vec<f64> = prev
        .iter()
        .zip(log_lik)
        .map(|(&w, &l)| if w > 0.0 && !l.is_nan() { w.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(DlspfError::DegenerateEnsemble("every particle has zero likelihood".into()));
    }
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / total).collect())
}

pub fn check_normalized(w: &[f64]) -> Result<()> {
    let s: f64 = w.iter().sum();
    if w.is_empty() || w.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(config_err!("weights are not a probability vector (sum {s})"));
    }
    Ok(())
}

/// `1 / Σ wᵢ²`.
pub fn effective_sample_size(w: &[f64]) -> Result<f64> {
    check_normalized(w)?;
    Ok(1.0 / w.iter().map(|v| v * v).sum::<f64>())
}

/// `n` i.i.d. categorical draws by inverse CDF.
pub fn multinomial_indices<R: Rng + ?Sized>(w: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_normalized(w)?;
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for v in w {
        acc += v;
        cdf.push(acc);
    }
    let last = w.iter().rposition(|v| *v > 0.0).unwrap_or(0);
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cdf.partition_point(|c| *c <= u).min(last)
        })
        .collect())
}

/// Resamples with replacement and resets the weights to `1/N`.
pub fn multinomial_resample<R: Rng + ?Sized>(ens: &Ensemble, rng: &mut R) -> Result<Ensemble> {
    let n = ens.len();
    let idx = multinomial_indices(&ens.weights, n, rng)?;
    Ok(Ensemble {
        particles: idx.iter().map(|&i| ens.particles[i].clone()).collect(),
        weights: vec![1.0 / n as f64; n],
        step: ens.step,
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub step: f64,
    pub decode: f64,
    pub weight: f64,
    pub resample: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.step + self.decode + self.weight + self.resample
    }
}

/// One recorded filtering time.
#[derive(Clone, Debug)]
pub struct Snapshot {
    /// `[N, state_dim]` physical (decoded) states
    pub physical: Tensor,
    /// `[N, N_m]`
    pub params: Tensor,
    /// `[N, latent_dim]` for latent filters
    pub latent: Option<Tensor>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct FilterResult {
    /// Index 0 is the initial ensemble, index `n` follows observation `n`.
    pub snapshots: Vec<Snapshot>,
    /// ESS after each weight update (before any resampling).
    pub ess: Vec<f64>,
    /// ESS once the step is complete.
    pub ess_after: Vec<f64>,
    pub resampled: Vec<bool>,
    pub timings: PhaseTimings,
}

impl FilterResult {
    /// Weighted posterior means, `[T, state_dim]`.
    pub fn posterior_means(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.snapshots.iter().map(|s| weighted_mean(&s.physical, &s.weights)).collect();
        let d = rows.first().map_or(0, |r| r.len());
        Tensor::new(&[rows.len(), d], rows.concat()).expect("equal widths")
    }

    pub fn param_means(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.snapshots.iter().map(|s| weighted_mean(&s.params, &s.weights)).collect();
        let d = rows.first().map_or(0, |r| r.len());
        Tensor::new(&[rows.len(), d], rows.concat()).expect("equal widths")
    }
}

pub fn weighted_mean(x: &Tensor, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let d = if n == 0 { 0 } else { x.len() / n };
    let mut out = vec![0.0; d];
    for (i, wi) in w.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&x.data()[i * d..(i + 1) * d]) {
            *o += wi * v;
        }
    }
    out
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    Tensor::new(&[rows.len(), d], rows.concat())
}

fn snapshot(ens: &Ensemble, physical: Vec<Vec<f64>>, latent: bool) -> Result<Snapshot> {
    let params: Vec<Vec<f64>> = ens.particles.iter().map(|p| p.params.clone()).collect();
    let latent = if latent {
        let z: Vec<Vec<f64>> = ens.particles.iter().map(|p| p.state.clone()).collect();
        Some(rows_tensor(&z)?)
    } else {
        None
    };
    Ok(Snapshot { physical: rows_tensor(&physical)?, params: rows_tensor(&params)?, latent, weights: ens.weights.clone() })
}

fn decode_all<D: Dynamics + ?Sized>(dyn_: &D, ens: &Ensemble) -> Result<Vec<Vec<f64>>> {
    let parts: Vec<Vec<Vec<f64>>> =
        ens.particles.par_chunks(PARTICLE_CHUNK).map(|c| dyn_.decode(c)).collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// One assimilation step: propagate, decode, weight, conditionally resample.
/// Returns the decoded states of the final ensemble.
pub fn filter_step<D: Dynamics + ?Sized>(
    dyn_: &D,
    ens: &mut Ensemble,
    observation: &[f64],
    cfg: &FilterConfig,
    timings: &mut PhaseTimings,
    result: &mut FilterResult,
) -> Result<Vec<Vec<f64>>> {
    let n = ens.len();
    let step = ens.step + 1;
    let t0 = Instant::now();
    let mut rngs: Vec<StreamRng> =
        (0..n).map(|i| rng_stream(cfg.seed, stream_id(Purpose::Propagate, step as u64, i as u64))).collect();
    ens.particles
        .par_chunks_mut(PARTICLE_CHUNK)
        .zip(rngs.par_chunks_mut(PARTICLE_CHUNK))
        .try_for_each(|(c, r)| dyn_.propagate(c, r))?;
    let t1 = Instant::now();
    let mut physical = decode_all(dyn_, ens)?;
    let t2 = Instant::now();
    let h = dyn_.observation();
    let std = dyn_.obs_std();
    let ll: Vec<f64> = physical
        .par_iter()
        .map(|q| {
            let pred = h.observe(q)?;
            let r: Vec<f64> = observation.iter().zip(&pred).map(|(y, p)| y - p).collect();
            gaussian_log_likelihood(&r, std)
        })
        .collect::<Result<_>>()?;
    ens.weights = update_weights(&ens.weights, &ll)?;
    let ess = effective_sample_size(&ens.weights)?;
    let t3 = Instant::now();
    let resample = ess < cfg.threshold();
    if resample {
        let mut rng = rng_stream(cfg.seed, stream_id(Purpose::Resample, step as u64, 0));
        let idx = multinomial_indices(&ens.weights, n, &mut rng)?;
        ens.particles = idx.iter().map(|&i| ens.particles[i].clone()).collect();
        physical = idx.iter().map(|&i| physical[i].clone()).collect();
        ens.weights = vec![1.0 / n as f64; n];
    }
    let t4 = Instant::now();
    ens.step = step;
    timings.step += (t1 - t0).as_secs_f64();
    timings.decode += (t2 - t1).as_secs_f64();
    timings.weight += (t3 - t2).as_secs_f64();
    timings.resample += (t4 - t3).as_secs_f64();
    result.ess.push(ess);
    result.resampled.push(resample);
    result.ess_after.push(effective_sample_size(&ens.weights)?);
    Ok(physical)
}

/// Runs the bootstrap filter over `observations` (one per assimilation interval).
pub fn run_filter<D: Dynamics + ?Sized>(
    dyn_: &D,
    initial: Vec<Particle>,
    observations: &[Vec<f64>],
    cfg: &FilterConfig,
    latent: bool,
) -> Result<FilterResult> {
    cfg.validate()?;
    if initial.len() != cfg.n_particles {
        return Err(config_err!("{} initial particles for N = {}", initial.len(), cfg.n_particles));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| config_err!("thread pool: {e}"))?;
    pool.install(|| {
        let mut ens = Ensemble::uniform(initial);
        let mut result = FilterResult::default();
        let mut timings = PhaseTimings::default();
        let physical = decode_all(dyn_, &ens)?;
        result.snapshots.push(snapshot(&ens, physical, latent)?);
        for y in observations {
            if y.len() != dyn_.observation().obs_dim() {
                return Err(shape_err!("observation of length {} for {} sensors", y.len(), dyn_.observation().obs_dim()));
            }
            let physical = filter_step(dyn_, &mut ens, y, cfg, &mut timings, &mut result)?;
            result.snapshots.push(snapshot(&ens, physical, latent)?);
        }
        result.timings = timings;
        Ok(result)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_examples() {
        let u = vec![1.0 / 3.0; 3];
        let w = update_weights(&u, &[2f64.ln(), 0.0, 0.0]).unwrap();
        for (a, b) in w.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = update_weights(&[0.5, 0.5, 0.0], &[-1.0, -1.0, -1.0]).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 0.0]);
        let a = update_weights(&u, &[-3.0, 1.0, 0.5]).unwrap();
        let b = update_weights(&u, &[-1003.0, -999.0, -999.5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(update_weights(&u, &[f64::NEG_INFINITY; 3]).is_err());
    }

    #[test]
    fn ess_examples() {
        assert!((effective_sample_size(&[0.25; 4]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(effective_sample_size(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
        let e = effective_sample_size(&[0.5, 0.25, 0.125, 0.125]).unwrap();
        assert!((e - 1.0 / 0.34375).abs() < 1e-12);
        assert!(effective_sample_size(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn resample_examples() {
        let ens = Ensemble {
            particles: (0..3).map(|i| Particle::new(vec![i as f64], vec![])).collect(),
            weights: vec![1.0, 0.0, 0.0],
            step: 0,
        };
        let mut rng = rng_stream(1, 0);
        let r = multinomial_resample(&ens, &mut rng).unwrap();
        assert!(r.particles.iter().all(|p| p.state[0] == 0.0));
        assert_eq!(r.weights, vec![1.0 / 3.0; 3]);
        let w = [0.2, 0.5, 0.3];
        let a = multinomial_indices(&w, 50, &mut rng_stream(3, 3)).unwrap();
        let b = multinomial_indices(&w, 50, &mut rng_stream(3, 3)).unwrap();
        assert_eq!(a, b);
    }
}
