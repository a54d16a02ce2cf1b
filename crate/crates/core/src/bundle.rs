//! Trained encoder, decoder and stepper with their normalization, acting in
//! physical units.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::filter::Surrogate;
use crate::io::{atomic_write, Checkpoint};
use crate::nn::{AeConfig, Autoencoder, LatentStepper, NormStats, StepperConfig};
use crate::rng::{rng_stream, stream_id, Purpose};
use crate::tensor::Tensor;

pub const ENCODER_FILE: &str = "encoder.ltck";
pub const DECODER_FILE: &str = "decoder.ltck";
pub const STEPPER_FILE: &str = "stepper.ltck";
pub const NORM_FILE: &str = "norm.json";
pub const BUNDLE_FILE: &str = "bundle.json";

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub ae: Autoencoder,
    pub stepper: LatentStepper,
    pub norm: NormStats,
    /// Hash of the configuration that produced the autoencoder.
    pub ae_hash: [u8; 32],
    /// Hash of the configuration that produced the stepper.
    pub config_hash: [u8; 32],
    /// One-step latent residual RMS measured on the training data.
    pub latent_residual_std: f64,
}

/// Everything needed to rebuild the networks before loading weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleMeta {
    pub ae: AeConfig,
    pub stepper: StepperConfig,
    pub config_hash: String,
    pub latent_residual_std: f64,
}

/// Saves the autoencoder half of a bundle.
pub fn save_autoencoder(dir: &Path, ae: &Autoencoder, norm: &NormStats, hash: [u8; 32]) -> Result<()> {
    Checkpoint::new("encoder", hash, ae.encoder.store.named())?.save(&dir.join(ENCODER_FILE))?;
    Checkpoint::new("decoder", hash, ae.decoder.store.named())?.save(&dir.join(DECODER_FILE))?;
    atomic_write(&dir.join(NORM_FILE), serde_json::to_string_pretty(norm)?.as_bytes())?;
    atomic_write(&dir.join("ae_config.json"), serde_json::to_string_pretty(ae.cfg())?.as_bytes())
}

fn check_kind(c: &Checkpoint, kind: &str) -> Result<()> {
    if c.kind != kind {
        return Err(crate::DlspfError::Format(format!("expected a {kind} checkpoint, found {}", c.kind)));
    }
    Ok(())
}

pub fn load_autoencoder(dir: &Path) -> Result<(Autoencoder, NormStats, [u8; 32])> {
    let cfg: AeConfig = serde_json::from_str(&fs::read_to_string(dir.join("ae_config.json"))?)?;
    let norm: NormStats = serde_json::from_str(&fs::read_to_string(dir.join(NORM_FILE))?)?;
    norm.validate()?;
    let mut ae = Autoencoder::new(&cfg, &mut rng_stream(0, stream_id(Purpose::Init, 0, 0)))?;
    let enc = Checkpoint::load(&dir.join(ENCODER_FILE))?;
    let dec = Checkpoint::load(&dir.join(DECODER_FILE))?;
    check_kind(&enc, "encoder")?;
    check_kind(&dec, "decoder")?;
    ae.encoder.store.load_named(&enc.tensors)?;
    ae.decoder.store.load_named(&dec.tensors)?;
    Ok((ae, norm, enc.config_hash))
}

impl ModelBundle {
    pub fn new(
        ae: Autoencoder,
        stepper: LatentStepper,
        norm: NormStats,
        ae_hash: [u8; 32],
        config_hash: [u8; 32],
    ) -> Result<Self> {
        if ae.latent_dim() != stepper.cfg.latent_dim {
            return Err(config_err!(
                "autoencoder latent dimension {} differs from stepper latent dimension {}",
                ae.latent_dim(),
                stepper.cfg.latent_dim
            ));
        }
        if ae.cfg().param_dim != stepper.cfg.param_dim || norm.param_min.len() != ae.cfg().param_dim {
            return Err(config_err!("parameter dimensions disagree across bundle components"));
        }
        if norm.channels() != ae.cfg().channels {
            return Err(config_err!("normalization has {} channels, autoencoder {}", norm.channels(), ae.cfg().channels));
        }
        Ok(ModelBundle { ae, stepper, norm, ae_hash, config_hash, latent_residual_std: 0.0 })
    }

    /// Writes the stepper checkpoint and bundle metadata next to the autoencoder files.
    pub fn save(&self, ae_dir: &Path, dyn_dir: &Path) -> Result<()> {
        save_autoencoder(ae_dir, &self.ae, &self.norm, self.ae_hash)?;
        Checkpoint::new("stepper", self.config_hash, self.stepper.store.named())?.save(&dyn_dir.join(STEPPER_FILE))?;
        let meta = BundleMeta {
            ae: self.ae.cfg().clone(),
            stepper: self.stepper.cfg.clone(),
            config_hash: hex::encode(self.config_hash),
            latent_residual_std: self.latent_residual_std,
        };
        atomic_write(&dyn_dir.join(BUNDLE_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(ae_dir: &Path, dyn_dir: &Path) -> Result<Self> {
        let (ae, norm, ae_hash) = load_autoencoder(ae_dir)?;
        let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(dyn_dir.join(BUNDLE_FILE))?)?;
        let mut stepper = LatentStepper::new(&meta.stepper, &mut rng_stream(0, stream_id(Purpose::Init, 1, 0)))?;
        let ck = Checkpoint::load(&dyn_dir.join(STEPPER_FILE))?;
        check_kind(&ck, "stepper")?;
        stepper.store.load_named(&ck.tensors)?;
        let mut b = ModelBundle::new(ae, stepper, norm, ae_hash, ck.config_hash)?;
        b.latent_residual_std = meta.latent_residual_std;
        Ok(b)
    }

    fn normalized_params(&self, params: &Tensor) -> Result<Option<Tensor>> {
        let d = self.ae.cfg().param_dim;
        if params.ndim() != 2 || params.shape()[1] != d {
            return Err(shape_err!("parameters must be [B, {d}], got {:?}", params.shape()));
        }
        if d == 0 {
            return Ok(None);
        }
        let mut m = params.clone();
        for row in m.data_mut().chunks_mut(d) {
            self.norm.normalize_params(row);
        }
        Ok(Some(m))
    }
}

impl Surrogate for ModelBundle {
    fn state_dim(&self) -> usize {
        self.ae.cfg().state_len()
    }

    fn latent_dim(&self) -> usize {
        self.ae.latent_dim()
    }

    fn param_dim(&self) -> usize {
        self.ae.cfg().param_dim
    }

    fn window(&self) -> usize {
        self.stepper.cfg.window()
    }

    fn encode(&self, states: &Tensor, _params: &Tensor) -> Result<Tensor> {
        let d = self.state_dim();
        if states.ndim() != 2 || states.shape()[1] != d {
            return Err(shape_err!("states must be [B, {d}], got {:?}", states.shape()));
        }
        let mut x = states.clone();
        for row in x.data_mut().chunks_mut(d) {
            self.norm.normalize_state(row);
        }
        self.ae.encoder.encode(&x)
    }

    fn step(&self, windows: &Tensor, params: &Tensor) -> Result<Tensor> {
        let m = self.normalized_params(params)?;
        self.stepper.step(windows, m.as_ref())
    }

    fn decode(&self, z: &Tensor, params: &Tensor) -> Result<Tensor> {
        let m = self.normalized_params(params)?;
        let mut q = self.ae.decoder.decode(z, m.as_ref())?;
        let d = self.state_dim();
        for row in q.data_mut().chunks_mut(d) {
            self.norm.denormalize_state(row);
        }
        Ok(q)
    }
}
