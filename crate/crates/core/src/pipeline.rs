//! The five experiment stages: simulate, train the autoencoder, train the
//! stepper, filter and evaluate. Every stage reads and writes files under one
//! output directory:
//!
//! ```text
//! out/data/        train.ltsf, test.ltsf (+ *_params.ltsf), observations.ltsf, manifest.json
//! out/ae/          encoder.ltck, decoder.ltck, norm.json, loss.csv, manifest.json
//! out/dyn/         latents.ltsf, stepper.ltck, bundle.json, loss.csv, manifest.json
//! out/filter_hf/   ensemble, weights, summary tensors, ess.csv, manifest.json, timings.json
//! out/filter_latent/
//! out/eval/        report.json, series.csv
//! ```
//!
//! Manifests hold only deterministic content; wall-clock times go to `timings.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assimilation::{GaussianNoise, ObservationOperator};
use crate::bundle::{load_autoencoder, save_autoencoder, ModelBundle};
use crate::config::{BurgersSetup, ExperimentConfig, ModelConfig, ScalarSsmSetup};
use crate::error::{config_err, shape_err, DlspfError, Result};
use crate::filter::{
    run_dlspf, run_filter, ssm_dynamics, ssm_initial_particles, BurgersModel, FilterConfig, FilterResult, HfDynamics,
    LatentDynamics, Particle, Surrogate,
};
use crate::io::{atomic_write, load_tensor};
use crate::metrics::{
    amrmse, nll_against_ensemble, nll_gaussian, picp, rmse, rrmse, series_csv, wasserstein1_1d,
    weighted_wasserstein1_1d, windowed_rrmse, EnsembleSeries, MetricReport,
};
use crate::models::{generate_dataset, kalman_filter, BurgersDataset};
use crate::nn::{train_autoencoder, train_stepper, Autoencoder, LatentStepper, NormStats, TrainHistory};
use crate::rng::{fill_standard_normal, rng_stream, stream_id, Purpose};
use crate::tensor::Tensor;

const TRAIN_SPLIT: u64 = 0;
const TEST_SPLIT: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Hf,
    Latent,
}

impl FilterMode {
    pub fn name(self) -> &'static str {
        match self {
            FilterMode::Hf => "hf",
            FilterMode::Latent => "latent",
        }
    }
}

impl std::str::FromStr for FilterMode {
    type Err = DlspfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hf" => Ok(FilterMode::Hf),
            "latent" => Ok(FilterMode::Latent),
            other => Err(config_err!("unknown filter mode {other:?}")),
        }
    }
}

/// Paths of the stage directories below an output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn ae(&self) -> PathBuf {
        self.root.join("ae")
    }

    pub fn dynamics(&self) -> PathBuf {
        self.root.join("dyn")
    }

    pub fn filter(&self, mode: FilterMode) -> PathBuf {
        self.root.join(format!("filter_{}", mode.name()))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Saves a tensor and returns the SHA-256 of the written file.
fn save_hashed(path: &Path, t: &Tensor, files: &mut BTreeMap<String, String>) -> Result<()> {
    let bytes = crate::io::tensor_bytes(t)?;
    atomic_write(path, &bytes)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    files.insert(name, sha_hex(&bytes));
    Ok(())
}

fn burgers_setup(cfg: &ExperimentConfig) -> Result<&BurgersSetup> {
    cfg.burgers().ok_or_else(|| config_err!("this stage needs a Burgers model"))
}

fn check_hash(expected: &str, found: &str, what: &str) -> Result<()> {
    if expected != found {
        return Err(config_err!("{what} was produced by config {found}, current config is {expected}"));
    }
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateManifest {
    pub config_hash: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Solver steps (or model steps) at which observations exist.
    pub obs_steps: Vec<usize>,
    pub files: BTreeMap<String, String>,
}

/// Observations of `truth [T, nx]` at the configured stride for test trajectory `index`.
pub fn burgers_observations(setup: &BurgersSetup, truth: &Tensor, seed: u64, index: usize) -> Result<Vec<Vec<f64>>> {
    let s = &setup.solver;
    let h = ObservationOperator::new(s.sensor_indices(), s.nx)?;
    let mut rng = rng_stream(seed, stream_id(Purpose::Observation, index as u64, 0));
    s.observation_steps()
        .iter()
        .map(|&t| {
            let mut y = h.observe(truth.row(t))?;
            let mut e = vec![0.0; y.len()];
            fill_standard_normal(&mut rng, &mut e);
            y.iter_mut().zip(&e).for_each(|(v, e)| *v += s.obs_std * e);
            Ok(y)
        })
        .collect()
}

fn trajectory(ds: &Tensor, i: usize) -> Result<Tensor> {
    let (t, d) = (ds.shape()[1], ds.shape()[2]);
    Tensor::new(&[t, d], ds.data()[i * t * d..(i + 1) * t * d].to_vec())
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<SimulateManifest> {
    cfg.validate()?;
    let dir = Layout::new(out).data();
    let mut files = BTreeMap::new();
    let hash = hex::encode(cfg.data_hash()?);
    let manifest = match &cfg.model {
        ModelConfig::Burgers(setup) => {
            let train = generate_dataset(&setup.solver, cfg.data.n_train, cfg.seed, TRAIN_SPLIT)?;
            let test = generate_dataset(&setup.solver, cfg.data.n_test, cfg.seed, TEST_SPLIT)?;
            let amp = |d: &BurgersDataset| Tensor::new(&[d.amplitudes.len(), 1], d.amplitudes.clone());
            save_hashed(&dir.join("train.ltsf"), &train.states, &mut files)?;
            save_hashed(&dir.join("train_params.ltsf"), &amp(&train)?, &mut files)?;
            save_hashed(&dir.join("test.ltsf"), &test.states, &mut files)?;
            save_hashed(&dir.join("test_params.ltsf"), &amp(&test)?, &mut files)?;
            let mut obs = Vec::new();
            let steps = setup.solver.observation_steps();
            for i in 0..cfg.data.n_test {
                obs.extend(burgers_observations(setup, &trajectory(&test.states, i)?, cfg.seed, i)?.concat());
            }
            let n_o = setup.solver.sensors.len();
            save_hashed(&dir.join("observations.ltsf"), &Tensor::new(&[cfg.data.n_test, steps.len(), n_o], obs)?, &mut files)?;
            SimulateManifest {
                config_hash: hash,
                seed: cfg.seed,
                n_train: cfg.data.n_train,
                n_test: cfg.data.n_test,
                obs_steps: steps,
                files,
            }
        }
        ModelConfig::LinearGaussian(s) => {
            let (xs, ys) = s.ssm().simulate(s.steps, cfg.seed);
            let truth = Tensor::new(&[xs.len(), 1], xs.iter().map(|x| x[0]).collect())?;
            let obs = Tensor::new(&[1, ys.len(), 1], ys.iter().map(|y| y[0]).collect())?;
            save_hashed(&dir.join("truth.ltsf"), &truth, &mut files)?;
            save_hashed(&dir.join("observations.ltsf"), &obs, &mut files)?;
            SimulateManifest {
                config_hash: hash,
                seed: cfg.seed,
                n_train: 0,
                n_test: 1,
                obs_steps: (1..=s.steps).collect(),
                files,
            }
        }
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- train-ae

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeManifest {
    pub config_hash: String,
    pub snapshots: usize,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Relative L2 reconstruction error on the test split in physical units.
    pub heldout_rel_error: f64,
    pub files: BTreeMap<String, String>,
}

/// Rows `(i, t)` of `states [n, T, D]` for every `t` divisible by `stride`, with trajectory ids.
pub fn snapshots(states: &Tensor, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = states.shape();
    if s.len() != 3 {
        return Err(shape_err!("trajectories must be [n, T, D], got {:?}", s));
    }
    let (n, t, d) = (s[0], s[1], s[2]);
    let mut out = Vec::new();
    let mut ids = Vec::new();
    for i in 0..n {
        for j in (0..t).step_by(stride.max(1)) {
            out.extend_from_slice(&states.data()[(i * t + j) * d..(i * t + j + 1) * d]);
            ids.push(i);
        }
    }
    Ok((Tensor::new(&[ids.len(), d], out)?, ids))
}

fn param_rows(params: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let d = params.shape()[1];
    Tensor::new(&[ids.len(), d], ids.iter().flat_map(|&i| params.row(i).to_vec()).collect())
}

fn normalize_rows(x: &Tensor, f: impl Fn(&mut [f64])) -> Tensor {
    let mut y = x.clone();
    let d = x.shape()[1];
    if d > 0 {
        y.data_mut().chunks_mut(d).for_each(f);
    }
    y
}

/// `‖dec(enc(q)) − q‖ / ‖q‖` over rows of `states [B, D]` in physical units.
pub fn physical_reconstruction_error(
    ae: &Autoencoder,
    norm: &NormStats,
    states: &Tensor,
    params: Option<&Tensor>,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let b = states.shape()[0];
    let chunk = 256;
    for start in (0..b).step_by(chunk) {
        let len = chunk.min(b - start);
        let d = states.shape()[1];
        let q = Tensor::new(&[len, d], states.data()[start * d..(start + len) * d].to_vec())?;
        let qn = normalize_rows(&q, |r| norm.normalize_state(r));
        let z = ae.encoder.encode(&qn)?;
        let m = params
            .map(|p| {
                let pd = p.shape()[1];
                let rows = Tensor::new(&[len, pd], p.data()[start * pd..(start + len) * pd].to_vec())?;
                Ok::<_, DlspfError>(normalize_rows(&rows, |r| norm.normalize_params(r)))
            })
            .transpose()?;
        let rec = normalize_rows(&ae.decoder.decode(&z, m.as_ref())?, |r| norm.denormalize_state(r));
        num += rec.data().iter().zip(q.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        den += q.sq_norm();
    }
    Ok((num / den).sqrt())
}

fn loss_csv(history: &TrainHistory) -> String {
    let mut s = String::from("epoch,recon,mmd,consistency,reg,total\n");
    for (i, c) in history.epochs.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{},{},{}\n", c.recon, c.mmd, c.consistency, c.reg, c.total));
    }
    s
}

fn offset_seed(master: u64, section: u64) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(section)
}

pub fn cmd_train_ae(cfg: &ExperimentConfig, out: &Path) -> Result<AeManifest> {
    cfg.validate()?;
    let setup = burgers_setup(cfg)?;
    let layout = Layout::new(out);
    let data: SimulateManifest = read_json(&layout.data().join("manifest.json"))?;
    check_hash(&hex::encode(cfg.data_hash()?), &data.config_hash, "dataset")?;
    let train = load_tensor(&layout.data().join("train.ltsf"))?;
    let (snaps, ids) = snapshots(&train, cfg.data.snapshot_stride)?;
    let params = if setup.parameterized {
        Some(param_rows(&load_tensor(&layout.data().join("train_params.ltsf"))?, &ids)?)
    } else {
        None
    };
    let norm = NormStats::fit(
        snaps.data(),
        cfg.ae.channels,
        cfg.ae.length,
        params.as_ref().map(|p| (p.data(), p.shape()[1])),
    )?;
    let x = normalize_rows(&snaps, |r| norm.normalize_state(r));
    let m = params.as_ref().map(|p| normalize_rows(p, |r| norm.normalize_params(r)));
    let mut ae = Autoencoder::new(&cfg.ae, &mut rng_stream(cfg.seed, stream_id(Purpose::Init, 0, 0)))?;
    let mut tc = cfg.ae_train.clone();
    tc.seed = offset_seed(cfg.seed, tc.seed);
    let history = train_autoencoder(&mut ae, &x, m.as_ref(), &tc)?;

    let test = load_tensor(&layout.data().join("test.ltsf"))?;
    let (tsnaps, tids) = snapshots(&test, 1)?;
    let tparams = if setup.parameterized {
        Some(param_rows(&load_tensor(&layout.data().join("test_params.ltsf"))?, &tids)?)
    } else {
        None
    };
    let heldout = physical_reconstruction_error(&ae, &norm, &tsnaps, tparams.as_ref())?;

    let dir = layout.ae();
    save_autoencoder(&dir, &ae, &norm, cfg.ae_hash()?)?;
    let csv = loss_csv(&history);
    atomic_write(&dir.join("loss.csv"), csv.as_bytes())?;
    let mut files = BTreeMap::new();
    for f in ["encoder.ltck", "decoder.ltck", "norm.json", "loss.csv"] {
        files.insert(f.to_string(), sha_hex(&fs::read(dir.join(f))?));
    }
    let (first, last) = history.smoothed_ends(50);
    let manifest = AeManifest {
        config_hash: hex::encode(cfg.ae_hash()?),
        snapshots: snaps.shape()[0],
        steps: history.steps.len(),
        first_loss: first,
        final_loss: last,
        heldout_rel_error: heldout,
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- train-dyn

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynManifest {
    pub config_hash: String,
    pub latent_shape: Vec<usize>,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub latent_residual_std: f64,
    /// Relative L2 error of decoded rollouts from the first state of every test trajectory.
    pub test_rollout_rel_error: f64,
    pub files: BTreeMap<String, String>,
}

/// Encodes every state of `states [n, T, D]` into `[n, T, latent]`.
pub fn encode_trajectories(bundle_ae: &Autoencoder, norm: &NormStats, states: &Tensor) -> Result<Tensor> {
    let (n, t, d) = (states.shape()[0], states.shape()[1], states.shape()[2]);
    let l = bundle_ae.latent_dim();
    let mut out = Vec::with_capacity(n * t * l);
    let rows = n * t;
    let chunk = 512;
    for start in (0..rows).step_by(chunk) {
        let len = chunk.min(rows - start);
        let q = Tensor::new(&[len, d], states.data()[start * d..(start + len) * d].to_vec())?;
        out.extend(bundle_ae.encoder.encode(&normalize_rows(&q, |r| norm.normalize_state(r)))?.into_data());
    }
    Tensor::new(&[n, t, l], out)
}

/// RMS of the stepper's one-step residual over all training windows.
pub fn one_step_residual_std(stepper: &LatentStepper, latents: &Tensor, params: Option<&Tensor>) -> Result<f64> {
    let mut cfg = stepper.cfg.clone();
    cfg.unroll = 1;
    let windows = crate::nn::stepper::LatentWindows::new(latents, params, &cfg)?;
    let mut sq = 0.0;
    let mut count = 0usize;
    for picks in windows.index.chunks(256) {
        let (h, t, m) = windows.batch(picks, &cfg)?;
        let pred = stepper.step(&h, m.as_ref())?;
        sq += pred.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += pred.len();
    }
    Ok((sq / count as f64).sqrt())
}

/// Encodes the initial state of each trajectory, rolls the stepper over the
/// whole horizon, decodes and returns the relative L2 error against the
/// trajectory sampled at the stepper stride.
pub fn rollout_error(bundle: &ModelBundle, states: &Tensor, params: Option<&Tensor>) -> Result<f64> {
    let (n, t, d) = (states.shape()[0], states.shape()[1], states.shape()[2]);
    let stride = bundle.stepper.cfg.time_stride;
    let kept: Vec<usize> = (0..t).step_by(stride).collect();
    let steps = kept.len() - 1;
    let pd = bundle.param_dim();
    let q0 = Tensor::new(&[n, d], (0..n).flat_map(|i| states.data()[i * t * d..(i * t + 1) * d].to_vec()).collect())?;
    let m = match params {
        Some(p) => p.clone(),
        None => Tensor::zeros(&[n, pd]),
    };
    let z0 = bundle.encode(&q0, &m)?;
    let (w, l) = (bundle.window(), bundle.latent_dim());
    let hist: Vec<f64> = (0..n).flat_map(|i| z0.row(i).repeat(w)).collect();
    let mn = (pd > 0).then(|| normalize_rows(&m, |r| bundle.norm.normalize_params(r)));
    let traj = bundle.stepper.rollout_batch(&Tensor::new(&[n, w, l], hist)?, mn.as_ref(), steps)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (j, &tj) in kept.iter().enumerate() {
        let zj: Vec<f64> = (0..n).flat_map(|i| traj.data()[(i * (w + steps) + w - 1 + j) * l..][..l].to_vec()).collect();
        let q = bundle.decode(&Tensor::new(&[n, l], zj)?, &m)?;
        for i in 0..n {
            let truth = &states.data()[(i * t + tj) * d..(i * t + tj + 1) * d];
            num += q.row(i).iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            den += truth.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok((num / den).sqrt())
}

pub fn cmd_train_dyn(cfg: &ExperimentConfig, out: &Path) -> Result<DynManifest> {
    cfg.validate()?;
    let setup = burgers_setup(cfg)?;
    let layout = Layout::new(out);
    let (ae, norm, hash) = load_autoencoder(&layout.ae())?;
    check_hash(&hex::encode(cfg.ae_hash()?), &hex::encode(hash), "autoencoder")?;
    if ae.latent_dim() != cfg.stepper.latent_dim {
        return Err(config_err!(
            "autoencoder latent dimension {} differs from stepper latent dimension {}",
            ae.latent_dim(),
            cfg.stepper.latent_dim
        ));
    }
    let train = load_tensor(&layout.data().join("train.ltsf"))?;
    let latents = encode_trajectories(&ae, &norm, &train)?;
    let dir = layout.dynamics();
    let mut files = BTreeMap::new();
    save_hashed(&dir.join("latents.ltsf"), &latents, &mut files)?;
    let params = if setup.parameterized {
        let p = load_tensor(&layout.data().join("train_params.ltsf"))?;
        Some(normalize_rows(&p, |r| norm.normalize_params(r)))
    } else {
        None
    };
    let mut stepper = LatentStepper::new(&cfg.stepper, &mut rng_stream(cfg.seed, stream_id(Purpose::Init, 1, 0)))?;
    let mut tc = cfg.stepper_train.clone();
    tc.seed = offset_seed(cfg.seed, tc.seed.wrapping_add(1));
    let history = train_stepper(&mut stepper, &latents, params.as_ref(), &tc)?;
    let residual = one_step_residual_std(&stepper, &latents, params.as_ref())?;
    let mut bundle = ModelBundle::new(ae, stepper, norm, hash, cfg.dyn_hash()?)?;
    bundle.latent_residual_std = residual;

    let test = load_tensor(&layout.data().join("test.ltsf"))?;
    let test_params = if setup.parameterized { Some(load_tensor(&layout.data().join("test_params.ltsf"))?) } else { None };
    let rollout = rollout_error(&bundle, &test, test_params.as_ref())?;

    bundle.save(&layout.ae(), &dir)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, c) in history.epochs.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", c.total));
    }
    atomic_write(&dir.join("loss.csv"), csv.as_bytes())?;
    for f in ["stepper.ltck", "bundle.json", "loss.csv"] {
        files.insert(f.to_string(), sha_hex(&fs::read(dir.join(f))?));
    }
    let (first, last) = history.smoothed_ends(50);
    let manifest = DynManifest {
        config_hash: hex::encode(cfg.dyn_hash()?),
        latent_shape: latents.shape().to_vec(),
        steps: history.steps.len(),
        first_loss: first,
        final_loss: last,
        latent_residual_std: residual,
        test_rollout_rel_error: rollout,
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- filter

/// Prior ensemble for Burgers: amplitudes uniform on the training range and
/// the matching initial conditions.
pub fn burgers_prior(setup: &BurgersSetup, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let s = &setup.solver;
    let mut states = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_stream(seed, stream_id(Purpose::Initial, 0, i as u64));
        let a = s.q_lo + (s.q_hi - s.q_lo) * crate::rng::uniform(&mut rng);
        states.push(s.initial_condition(a));
        params.push(if setup.parameterized { vec![a] } else { Vec::new() });
    }
    (states, params)
}

fn param_jitter(cfg: &ExperimentConfig, setup: &BurgersSetup) -> Result<GaussianNoise> {
    let range = setup.solver.q_hi - setup.solver.q_lo;
    GaussianNoise::isotropic(cfg.param_dim(), cfg.filter.param_jitter_frac * range)
}

pub fn hf_burgers_dynamics(cfg: &ExperimentConfig) -> Result<HfDynamics<BurgersModel>> {
    let setup = burgers_setup(cfg)?;
    let s = &setup.solver;
    HfDynamics::new(
        BurgersModel { cfg: s.clone() },
        GaussianNoise::isotropic(s.nx, cfg.filter.state_noise_std)?,
        param_jitter(cfg, setup)?,
        ObservationOperator::new(s.sensor_indices(), s.nx)?,
        s.obs_std,
    )
}

pub fn latent_burgers_dynamics<S: Surrogate>(
    cfg: &ExperimentConfig,
    surrogate: S,
    default_latent_std: f64,
) -> Result<LatentDynamics<S>> {
    let setup = burgers_setup(cfg)?;
    let s = &setup.solver;
    let l = surrogate.latent_dim();
    let stride = cfg.stepper.time_stride;
    let mut d = LatentDynamics::new(
        surrogate,
        GaussianNoise::isotropic(l, cfg.filter.latent_noise_std.unwrap_or(default_latent_std))?,
        param_jitter(cfg, setup)?,
        ObservationOperator::new(s.sensor_indices(), s.nx)?,
        s.obs_std,
    )?;
    d.steps_per_obs = s.obs_stride / stride;
    Ok(d)
}

pub fn filter_config(cfg: &ExperimentConfig) -> FilterConfig {
    FilterConfig {
        n_particles: cfg.filter.particles,
        ess_threshold: cfg.filter.ess_threshold,
        seed: cfg.seed,
        workers: cfg.filter.workers,
    }
}

/// Runs the configured filter in memory.
pub fn run_mode(
    cfg: &ExperimentConfig,
    mode: FilterMode,
    observations: &[Vec<f64>],
    bundle: Option<&ModelBundle>,
) -> Result<FilterResult> {
    let fc = filter_config(cfg);
    match (&cfg.model, mode) {
        (ModelConfig::LinearGaussian(s), FilterMode::Hf) => {
            let ssm = s.ssm();
            let d = ssm_dynamics(&ssm)?;
            run_filter(&d, ssm_initial_particles(&ssm, fc.n_particles, cfg.seed), observations, &fc, false)
        }
        (ModelConfig::LinearGaussian(_), FilterMode::Latent) => {
            Err(config_err!("latent filtering needs a Burgers model"))
        }
        (ModelConfig::Burgers(setup), FilterMode::Hf) => {
            let d = hf_burgers_dynamics(cfg)?;
            let (q, m) = burgers_prior(setup, fc.n_particles, cfg.seed);
            let init = q.into_iter().zip(m).map(|(q, m)| Particle::new(q, m)).collect();
            run_filter(&d, init, observations, &fc, false)
        }
        (ModelConfig::Burgers(setup), FilterMode::Latent) => {
            let bundle = bundle.ok_or_else(|| config_err!("latent filtering needs a trained model bundle"))?;
            let d = latent_burgers_dynamics(cfg, bundle, bundle.latent_residual_std)?;
            let (q, m) = burgers_prior(setup, fc.n_particles, cfg.seed);
            run_dlspf(&d, &q, &m, observations, &fc)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterManifest {
    pub config_hash: String,
    pub mode: FilterMode,
    pub particles: usize,
    pub seed: u64,
    pub n_obs: usize,
    pub ess: Vec<f64>,
    pub ess_after: Vec<f64>,
    pub resampled: Vec<bool>,
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterTimings {
    pub workers: usize,
    pub step: f64,
    pub decode: f64,
    pub weight: f64,
    pub resample: f64,
    pub total: f64,
}

fn stack_snapshots(r: &FilterResult, f: impl Fn(&crate::filter::Snapshot) -> Option<&Tensor>) -> Result<Option<Tensor>> {
    let parts: Vec<&Tensor> = r.snapshots.iter().filter_map(&f).collect();
    if parts.len() != r.snapshots.len() || parts.is_empty() {
        return Ok(None);
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    Ok(Some(Tensor::new(&shape, parts.iter().flat_map(|t| t.data().iter().copied()).collect())?))
}

/// Ensemble series of the physical snapshots (all indices, including the prior).
pub fn physical_series(r: &FilterResult) -> Result<EnsembleSeries> {
    let data = stack_snapshots(r, |s| Some(&s.physical))?.ok_or_else(|| shape_err!("filter result is empty"))?;
    let n = data.shape()[1];
    let w = Tensor::new(&[r.snapshots.len(), n], r.snapshots.iter().flat_map(|s| s.weights.clone()).collect())?;
    EnsembleSeries::new(data, Some(w))
}

/// Per step mean, standard deviation and 2.5/97.5 percentiles: `[T, 4, D]`.
pub fn summarize(series: &EnsembleSeries) -> Result<Tensor> {
    let (t, d) = (series.steps(), series.dim());
    let mut out = Vec::with_capacity(t * 4 * d);
    for s in 0..t {
        let w = series.weights_at(s);
        let cols: Vec<Vec<f64>> = (0..d).map(|c| series.column(s, c)).collect();
        let mean: Vec<f64> = cols.iter().map(|c| c.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        out.extend(&mean);
        out.extend(cols.iter().zip(&mean).map(|(c, mu)| c.iter().zip(&w).map(|(a, b)| b * (a - mu).powi(2)).sum::<f64>().sqrt()));
        out.extend(cols.iter().map(|c| crate::metrics::quantile(c, Some(&w), 0.025)));
        out.extend(cols.iter().map(|c| crate::metrics::quantile(c, Some(&w), 0.975)));
    }
    Tensor::new(&[t, 4, d], out)
}

/// Observations and truth for the configured test case:
/// `(observations, truth at observation times [n_obs, D], truth parameters)`.
pub fn load_case(cfg: &ExperimentConfig, layout: &Layout) -> Result<(Vec<Vec<f64>>, Tensor, Vec<f64>)> {
    let data: SimulateManifest = read_json(&layout.data().join("manifest.json"))?;
    check_hash(&hex::encode(cfg.data_hash()?), &data.config_hash, "dataset")?;
    let obs = load_tensor(&layout.data().join("observations.ltsf"))?;
    let (n_obs_all, n_o) = (obs.shape()[1], obs.shape()[2]);
    let n_obs = cfg.filter.n_obs.unwrap_or(n_obs_all).min(n_obs_all);
    let (case, truth, params) = match &cfg.model {
        ModelConfig::Burgers(setup) => {
            let i = cfg.filter.test_index;
            let test = load_tensor(&layout.data().join("test.ltsf"))?;
            let traj = trajectory(&test, i)?;
            let nx = setup.solver.nx;
            let rows: Vec<f64> =
                data.obs_steps[..n_obs].iter().flat_map(|&t| traj.row(t).to_vec()).collect();
            let amp = load_tensor(&layout.data().join("test_params.ltsf"))?.row(i).to_vec();
            (i, Tensor::new(&[n_obs, nx], rows)?, amp)
        }
        ModelConfig::LinearGaussian(_) => {
            let truth = load_tensor(&layout.data().join("truth.ltsf"))?;
            (0, Tensor::new(&[n_obs, 1], truth.data()[1..=n_obs].to_vec())?, Vec::new())
        }
    };
    let y = (0..n_obs).map(|t| obs.data()[(case * n_obs_all + t) * n_o..(case * n_obs_all + t + 1) * n_o].to_vec()).collect();
    Ok((y, truth, params))
}

pub fn cmd_filter(cfg: &ExperimentConfig, mode: FilterMode, out: &Path) -> Result<(FilterManifest, FilterTimings)> {
    cfg.validate()?;
    let layout = Layout::new(out);
    let (obs, _, _) = load_case(cfg, &layout)?;
    let bundle = match mode {
        FilterMode::Latent => {
            let b = ModelBundle::load(&layout.ae(), &layout.dynamics())?;
            check_hash(&hex::encode(cfg.dyn_hash()?), &hex::encode(b.config_hash), "model bundle")?;
            Some(b)
        }
        FilterMode::Hf => None,
    };
    let t0 = Instant::now();
    let result = run_mode(cfg, mode, &obs, bundle.as_ref())?;
    let total = t0.elapsed().as_secs_f64();

    let dir = layout.filter(mode);
    let mut files = BTreeMap::new();
    let series = physical_series(&result)?;
    save_hashed(&dir.join("ensemble.ltsf"), &series.data, &mut files)?;
    save_hashed(&dir.join("weights.ltsf"), series.weights.as_ref().expect("weights are stored"), &mut files)?;
    save_hashed(&dir.join("summary.ltsf"), &summarize(&series)?, &mut files)?;
    if cfg.param_dim() > 0 {
        if let Some(p) = stack_snapshots(&result, |s| Some(&s.params))? {
            save_hashed(&dir.join("params.ltsf"), &p, &mut files)?;
        }
    }
    if let Some(z) = stack_snapshots(&result, |s| s.latent.as_ref())? {
        save_hashed(&dir.join("latent.ltsf"), &z, &mut files)?;
    }
    let resampled: Vec<f64> = result.resampled.iter().map(|&r| f64::from(u8::from(r))).collect();
    let csv = series_csv(&[("ess", &result.ess), ("ess_after", &result.ess_after), ("resampled", &resampled)]);
    atomic_write(&dir.join("ess.csv"), csv.as_bytes())?;
    files.insert("ess.csv".into(), sha_hex(csv.as_bytes()));
    let manifest = FilterManifest {
        config_hash: cfg.hash_hex()?,
        mode,
        particles: cfg.filter.particles,
        seed: cfg.seed,
        n_obs: obs.len(),
        ess: result.ess.clone(),
        ess_after: result.ess_after.clone(),
        resampled: result.resampled.clone(),
        files,
    };
    let t = &result.timings;
    let timings = FilterTimings {
        workers: cfg.filter.workers,
        step: t.step,
        decode: t.decode,
        weight: t.weight,
        resample: t.resample,
        total,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("timings.json"), &timings)?;
    Ok((manifest, timings))
}

// ---------------------------------------------------------------- evaluate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Central-moment error of the latent ensemble against the high-fidelity one.
    pub amrmse: f64,
    /// Mean NLL of the high-fidelity particles under the latent ensemble's Gaussian fit.
    pub nll_vs_hf: f64,
    pub wasserstein1_params: Option<f64>,
    /// Latent RMSE over high-fidelity RMSE.
    pub rmse_ratio: f64,
    /// High-fidelity over latent filter wall-clock.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanCheck {
    pub mean_rel_l2: f64,
    pub std_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub runs: BTreeMap<String, MetricReport>,
    #[serde(default)]
    pub param_error: BTreeMap<String, f64>,
    pub comparison: Option<Comparison>,
    pub kalman: Option<KalmanCheck>,
}

fn load_run(dir: &Path) -> Result<(EnsembleSeries, Option<Tensor>)> {
    let data = load_tensor(&dir.join("ensemble.ltsf"))?;
    let w = load_tensor(&dir.join("weights.ltsf"))?;
    let p = dir.join("params.ltsf");
    let params = if p.exists() { Some(load_tensor(&p)?) } else { None };
    Ok((EnsembleSeries::new(data, Some(w))?, params))
}

/// Drops the prior (index 0) from a series.
pub fn posterior_part(s: &EnsembleSeries) -> Result<EnsembleSeries> {
    let (t, n, d) = (s.steps(), s.members(), s.dim());
    if t < 2 {
        return Err(shape_err!("series holds no assimilated steps"));
    }
    let data = Tensor::new(&[t - 1, n, d], s.data.data()[n * d..].to_vec())?;
    let w = s.weights.as_ref().map(|w| Tensor::new(&[t - 1, n], w.data()[n..].to_vec())).transpose()?;
    EnsembleSeries::new(data, w)
}

/// Metrics of a posterior series (prior dropped) against `truth [T, D]`.
pub fn run_report(
    post: &EnsembleSeries,
    truth: &Tensor,
    sensors: &[usize],
    cfg: &ExperimentConfig,
) -> Result<MetricReport> {
    let mean = post.mean();
    let obs_truth = Tensor::new(
        &[truth.shape()[0], sensors.len()],
        (0..truth.shape()[0]).flat_map(|t| sensors.iter().map(move |&i| (t, i))).map(|(t, i)| truth.row(t)[i]).collect(),
    )?;
    let window = cfg.metrics.window.min(truth.shape()[0]);
    let report = MetricReport {
        rmse: rmse(mean.data(), truth.data())?,
        rrmse: rrmse(mean.data(), truth.data())?,
        amrmse: None,
        nll: (post.members() >= crate::metrics::MIN_MOMENT_ENSEMBLE).then(|| nll_gaussian(post, truth)).transpose()?,
        picp: Some(picp(&post.select(sensors)?, &obs_truth, cfg.metrics.picp_lo, cfg.metrics.picp_hi)?),
        wasserstein1: None,
        windowed_rrmse: windowed_rrmse(&mean, truth, window)?,
    };
    Ok(report)
}

fn final_params(p: &Tensor, w: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (t, n) = (p.shape()[0], p.shape()[1]);
    let d = p.shape()[2];
    let vals = (0..n).map(|i| p.data()[((t - 1) * n + i) * d]).collect();
    (vals, w.data()[(t - 1) * n..].to_vec())
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let layout = Layout::new(out);
    let (obs, truth, true_params) = load_case(cfg, &layout)?;
    let sensors: Vec<usize> = match &cfg.model {
        ModelConfig::Burgers(s) => s.solver.sensor_indices(),
        ModelConfig::LinearGaussian(_) => vec![0],
    };
    let mut runs = BTreeMap::new();
    let mut loaded = BTreeMap::new();
    let mut param_error = BTreeMap::new();
    let mut series = String::new();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for mode in [FilterMode::Hf, FilterMode::Latent] {
        let dir = layout.filter(mode);
        if !dir.join("manifest.json").exists() {
            continue;
        }
        let m: FilterManifest = read_json(&dir.join("manifest.json"))?;
        let (s, params) = load_run(&dir)?;
        let post = posterior_part(&s)?;
        if post.steps() != truth.shape()[0] {
            return Err(shape_err!("run has {} posterior steps, truth {}", post.steps(), truth.shape()[0]));
        }
        let report = run_report(&post, &truth, &sensors, cfg)?;
        if let (Some(p), false) = (&params, true_params.is_empty()) {
            let (vals, w) = final_params(p, s.weights.as_ref().expect("weights"));
            let est: f64 = vals.iter().zip(&w).map(|(a, b)| a * b).sum();
            param_error.insert(mode.name().to_string(), (est - true_params[0]).abs() / true_params[0].abs());
        }
        let per_step: Vec<f64> = (0..truth.shape()[0])
            .map(|t| rmse(post.mean().row(t), truth.row(t)))
            .collect::<Result<_>>()?;
        columns.push((format!("{}_rmse", mode.name()), per_step));
        columns.push((format!("{}_windowed_rrmse", mode.name()), report.windowed_rrmse.clone()));
        columns.push((format!("{}_ess", mode.name()), m.ess.clone()));
        runs.insert(mode.name().to_string(), report);
        loaded.insert(mode, (post, params, dir));
    }
    if runs.is_empty() {
        return Err(config_err!("no filter runs found under {}", out.display()));
    }
    let comparison = match (loaded.get(&FilterMode::Hf), loaded.get(&FilterMode::Latent)) {
        (Some((hf, hp, hdir)), Some((lat, lp, ldir))) => {
            let a = amrmse(lat, hf)?;
            if let Some(r) = runs.get_mut("latent") {
                r.amrmse = Some(a);
            }
            let w1 = match (hp, lp) {
                (Some(hp), Some(lp)) => {
                    let hw = load_tensor(&hdir.join("weights.ltsf"))?;
                    let lw = load_tensor(&ldir.join("weights.ltsf"))?;
                    let (hv, hwv) = final_params(hp, &hw);
                    let (lv, lwv) = final_params(lp, &lw);
                    let uniform = |w: &[f64]| w.iter().all(|v| (v - w[0]).abs() < 1e-15);
                    Some(if uniform(&hwv) && uniform(&lwv) {
                        wasserstein1_1d(&lv, &hv)?
                    } else {
                        weighted_wasserstein1_1d(&lv, &lwv, &hv, &hwv, 1000)?
                    })
                }
                _ => None,
            };
            if let Some(r) = runs.get_mut("latent") {
                r.wasserstein1 = w1;
            }
            let ht: Option<FilterTimings> = read_json(&hdir.join("timings.json")).ok();
            let lt: Option<FilterTimings> = read_json(&ldir.join("timings.json")).ok();
            Some(Comparison {
                amrmse: a,
                nll_vs_hf: nll_against_ensemble(lat, hf)?,
                wasserstein1_params: w1,
                rmse_ratio: runs["latent"].rmse / runs["hf"].rmse,
                speedup: ht.zip(lt).map(|(h, l)| h.total / l.total),
            })
        }
        _ => None,
    };
    let kalman = match (&cfg.model, loaded.get(&FilterMode::Hf)) {
        (ModelConfig::LinearGaussian(s), Some((post, _, _))) => Some(kalman_check(s, &obs, post)?),
        _ => None,
    };
    for r in runs.values() {
        r.validate()?;
    }
    let cols: Vec<(&str, &[f64])> = columns.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    series.push_str(&series_csv(&cols));
    let report = EvalReport { config_hash: cfg.hash_hex()?, runs, param_error, comparison, kalman };
    let dir = layout.eval();
    write_json(&dir.join("report.json"), &report)?;
    atomic_write(&dir.join("series.csv"), series.as_bytes())?;
    Ok(report)
}

/// Compares a scalar particle posterior with the exact Kalman filter.
pub fn kalman_check(s: &ScalarSsmSetup, obs: &[Vec<f64>], post: &EnsembleSeries) -> Result<KalmanCheck> {
    let ys: Vec<_> = obs.iter().map(|y| nalgebra::DVector::from_vec(y.clone())).collect();
    let kf = kalman_filter(&s.ssm(), &ys)?;
    let mean = post.mean();
    let km: Vec<f64> = kf.means.iter().map(|m| m[0]).collect();
    let ks: Vec<f64> = kf.covs.iter().map(|p| p[(0, 0)].sqrt()).collect();
    let ps: Vec<f64> = (0..post.steps())
        .map(|t| {
            let w = post.weights_at(t);
            let c = post.column(t, 0);
            let mu = mean.row(t)[0];
            c.iter().zip(&w).map(|(x, w)| w * (x - mu).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    Ok(KalmanCheck { mean_rel_l2: rrmse(mean.data(), &km)?, std_rel_err: rrmse(&ps, &ks)? })
}
