//! Experiment configuration and its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::models::{BurgersConfig, LinearGaussianSsm};
use crate::nn::{AeConfig, StepperConfig, StepperTrainConfig, WaeTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurgersSetup {
    pub solver: BurgersConfig,
    /// Filter the amplitude `Q` jointly with the state.
    #[serde(default)]
    pub parameterized: bool,
}

/// Scalar `x_n = a x_{n-1} + w`, `y_n = x_n + v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarSsmSetup {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
    pub steps: usize,
}

impl ScalarSsmSetup {
    pub fn ssm(&self) -> LinearGaussianSsm {
        LinearGaussianSsm::scalar(self.a, self.q, self.r, self.m0, self.p0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Burgers(BurgersSetup),
    LinearGaussian(ScalarSsmSetup),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Every this-many solver steps becomes an autoencoder training snapshot.
    pub snapshot_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 256, n_test: 20, snapshot_stride: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSection {
    pub particles: usize,
    #[serde(default)]
    pub ess_threshold: Option<f64>,
    /// Model noise of the high-fidelity filter, per assimilation interval.
    pub state_noise_std: f64,
    /// Latent model noise; estimated from the stepper's one-step residuals when absent.
    #[serde(default)]
    pub latent_noise_std: Option<f64>,
    /// Parameter jitter as a fraction of the parameter's prior range.
    pub param_jitter_frac: f64,
    /// Test trajectory used as the truth.
    #[serde(default)]
    pub test_index: usize,
    /// Number of assimilated observations; all available when absent.
    #[serde(default)]
    pub n_obs: Option<usize>,
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            particles: 100,
            ess_threshold: None,
            state_noise_std: 0.005,
            latent_noise_std: None,
            param_jitter_frac: 0.01,
            test_index: 0,
            n_obs: None,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub picp_lo: f64,
    pub picp_hi: f64,
    pub window: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { picp_lo: 2.5, picp_hi: 97.5, window: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub ae: AeConfig,
    #[serde(default)]
    pub ae_train: WaeTrainConfig,
    pub stepper: StepperConfig,
    #[serde(default)]
    pub stepper_train: StepperTrainConfig,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    /// Burgers at desk scale: 128 nodes, latent dimension 16.
    pub fn burgers_desk() -> Self {
        let solver = BurgersConfig::default();
        let mut stepper = StepperConfig::new(16, 2, 0);
        stepper.time_stride = solver.obs_stride;
        ExperimentConfig {
            name: "burgers-desk".into(),
            seed: 0,
            ae: AeConfig::two_layer(1, solver.nx, 16, 0),
            model: ModelConfig::Burgers(BurgersSetup { solver, parameterized: false }),
            data: DataConfig::default(),
            ae_train: WaeTrainConfig::default(),
            stepper,
            stepper_train: StepperTrainConfig::default(),
            filter: FilterSection::default(),
            metrics: MetricsConfig::default(),
        }
    }

    pub fn linear_gaussian() -> Self {
        let mut c = Self::burgers_desk();
        c.name = "linear-gaussian".into();
        c.model = ModelConfig::LinearGaussian(ScalarSsmSetup { a: 0.9, q: 1.0, r: 1.0, m0: 0.0, p0: 1.0, steps: 100 });
        c.filter.particles = 5000;
        c
    }

    pub fn burgers(&self) -> Option<&BurgersSetup> {
        match &self.model {
            ModelConfig::Burgers(b) => Some(b),
            ModelConfig::LinearGaussian(_) => None,
        }
    }

    /// Number of parameters carried by each particle.
    pub fn param_dim(&self) -> usize {
        match &self.model {
            ModelConfig::Burgers(b) => usize::from(b.parameterized),
            ModelConfig::LinearGaussian(_) => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter.particles == 0 || self.filter.workers == 0 {
            return Err(config_err!("filter needs at least one particle and one worker"));
        }
        if !(self.filter.state_noise_std >= 0.0) || !(self.filter.param_jitter_frac >= 0.0) {
            return Err(config_err!("noise levels must be non-negative"));
        }
        if let Some(s) = self.filter.latent_noise_std {
            if !(s >= 0.0) {
                return Err(config_err!("latent noise std must be non-negative"));
            }
        }
        if !(0.0..=100.0).contains(&self.metrics.picp_lo) || !(self.metrics.picp_lo..=100.0).contains(&self.metrics.picp_hi) {
            return Err(config_err!("coverage band must satisfy 0 <= lo <= hi <= 100"));
        }
        match &self.model {
            ModelConfig::LinearGaussian(s) => s.ssm().validate(),
            ModelConfig::Burgers(b) => {
                b.solver.validate()?;
                self.ae.validate()?;
                self.stepper.validate()?;
                if self.ae.channels != 1 || self.ae.length != b.solver.nx {
                    return Err(config_err!("autoencoder must take one channel of {} nodes", b.solver.nx));
                }
                if self.ae.latent_dim != self.stepper.latent_dim {
                    return Err(config_err!(
                        "autoencoder latent dimension {} differs from stepper latent dimension {}",
                        self.ae.latent_dim,
                        self.stepper.latent_dim
                    ));
                }
                let p = self.param_dim();
                if self.ae.param_dim != p || self.stepper.param_dim != p {
                    return Err(config_err!("autoencoder and stepper must take {p} parameters"));
                }
                if b.solver.obs_stride % self.stepper.time_stride != 0 {
                    return Err(config_err!("stepper stride must divide the observation stride"));
                }
                if self.data.n_train == 0 || self.data.n_test == 0 || self.data.snapshot_stride == 0 {
                    return Err(config_err!("dataset sizes and snapshot stride must be positive"));
                }
                if self.filter.test_index >= self.data.n_test {
                    return Err(config_err!("test index {} outside {} test trajectories", self.filter.test_index, self.data.n_test));
                }
                Ok(())
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form, without the worker count, which
    /// never changes results.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let mut v = serde_json::to_value(self)?;
        if let Some(f) = v.get_mut("filter").and_then(|f| f.as_object_mut()) {
            f.remove("workers");
        }
        Ok(canonical_hash(&v))
    }

    pub fn hash_hex(&self) -> Result<String> {
        Ok(hex::encode(self.hash()?))
    }

    fn section_hash(&self, keys: &[&str]) -> Result<[u8; 32]> {
        let full = serde_json::to_value(self)?;
        let picked: serde_json::Map<String, serde_json::Value> =
            keys.iter().map(|k| (k.to_string(), full[*k].clone())).collect();
        Ok(canonical_hash(&serde_json::Value::Object(picked)))
    }

    /// Hash of everything that determines the simulated data.
    pub fn data_hash(&self) -> Result<[u8; 32]> {
        self.section_hash(&["seed", "model", "data"])
    }

    /// Hash of everything that determines the trained autoencoder.
    pub fn ae_hash(&self) -> Result<[u8; 32]> {
        self.section_hash(&["seed", "model", "data", "ae", "ae_train"])
    }

    /// Hash of everything that determines the trained stepper.
    pub fn dyn_hash(&self) -> Result<[u8; 32]> {
        self.section_hash(&["seed", "model", "data", "ae", "ae_train", "stepper", "stepper_train"])
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(v: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key, so a round trip through
    // `Value` already sorts; compact output drops insignificant whitespace
    let sorted: serde_json::Value = serde_json::from_str(&v.to_string()).expect("valid JSON");
    sorted.to_string()
}

pub fn canonical_hash(v: &serde_json::Value) -> [u8; 32] {
    Sha256::digest(canonical_json(v).as_bytes()).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::burgers_desk().validate().unwrap();
        ExperimentConfig::linear_gaussian().validate().unwrap();
    }

    #[test]
    fn hash_ignores_formatting_and_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": {"y": [1, 2], "x": null}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":{"x":null,"y":[1,2]},"b":1}"#).unwrap();
        assert_eq!(canonical_hash(&a), canonical_hash(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"a":{"x":null,"y":[1,3]},"b":1}"#).unwrap();
        assert_ne!(canonical_hash(&a), canonical_hash(&c));
    }

    #[test]
    fn json_round_trip_keeps_hash() {
        let c = ExperimentConfig::burgers_desk();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c.hash().unwrap(), back.hash().unwrap());
        let mut d = c.clone();
        d.filter.workers = 8;
        assert_eq!(c.hash().unwrap(), d.hash().unwrap());
        d.filter.particles += 1;
        assert_ne!(c.hash().unwrap(), d.hash().unwrap());
    }

    #[test]
    fn stage_hashes_ignore_later_sections() {
        let c = ExperimentConfig::burgers_desk();
        let mut d = c.clone();
        d.filter.particles = 7;
        d.stepper_train.epochs += 1;
        assert_eq!(c.ae_hash().unwrap(), d.ae_hash().unwrap());
        assert_ne!(c.dyn_hash().unwrap(), d.dyn_hash().unwrap());
        d.data.n_train += 1;
        assert_ne!(c.data_hash().unwrap(), d.data_hash().unwrap());
    }

    #[test]
    fn latent_mismatch_is_rejected() {
        let mut c = ExperimentConfig::burgers_desk();
        c.stepper.latent_dim = 8;
        assert!(c.validate().is_err());
    }
}
