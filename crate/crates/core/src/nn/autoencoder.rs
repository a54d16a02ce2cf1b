//! Encoder and decoder built from patch transformer layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::AttentionConfig;
use super::layers::{Init, Linear};
use super::params::{Ctx, ParamStore};
use super::vit::{PatchSpec, VitLayer};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Activation, Tape, Tensor, Var};

/// One reduction layer of the encoder; the decoder mirrors it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub num_patches: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub out_channels: usize,
    pub out_patch_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub channels: usize,
    pub length: usize,
    pub latent_dim: usize,
    #[serde(default)]
    pub param_dim: usize,
    pub layers: Vec<LayerPlan>,
    #[serde(default)]
    pub activation: Activation,
}

impl AeConfig {
    /// Two layers, each halving the length and widening the channels.
    pub fn two_layer(channels: usize, length: usize, latent_dim: usize, param_dim: usize) -> Self {
        let p = 8;
        let l1 = length / 2;
        let l2 = length / 4;
        AeConfig {
            channels,
            length,
            latent_dim,
            param_dim,
            layers: vec![
                LayerPlan { num_patches: p, embed_dim: 32, num_heads: 2, ff_dim: 64, out_channels: 4, out_patch_len: l1 / p },
                LayerPlan { num_patches: p, embed_dim: 32, num_heads: 2, ff_dim: 64, out_channels: 8, out_patch_len: l2 / p },
            ],
            activation: Activation::Gelu,
        }
    }

    /// Patch specs of the encoder layers in application order.
    pub fn encoder_specs(&self) -> Result<Vec<PatchSpec>> {
        let (mut c, mut n) = (self.channels, self.length);
        let mut specs = Vec::with_capacity(self.layers.len());
        for plan in &self.layers {
            let spec = PatchSpec {
                num_patches: plan.num_patches,
                in_channels: c,
                in_length: n,
                embed_dim: plan.embed_dim,
                out_channels: plan.out_channels,
                out_patch_len: plan.out_patch_len,
            };
            spec.validate()?;
            c = spec.out_channels;
            n = spec.out_length();
            specs.push(spec);
        }
        Ok(specs)
    }

    /// `(channels, length)` after the last reduction layer.
    pub fn bottleneck(&self) -> Result<(usize, usize)> {
        Ok(self
            .encoder_specs()?
            .last()
            .map(|s| (s.out_channels, s.out_length()))
            .unwrap_or((self.channels, self.length)))
    }

    pub fn state_len(&self) -> usize {
        self.channels * self.length
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.channels == 0 || self.length == 0 {
            return Err(config_err!("autoencoder dimensions must be positive"));
        }
        self.encoder_specs()?;
        for plan in &self.layers {
            self.attention(plan).validate()?;
        }
        Ok(())
    }

    fn attention(&self, plan: &LayerPlan) -> AttentionConfig {
        AttentionConfig {
            embed_dim: plan.embed_dim,
            num_heads: plan.num_heads,
            ff_dim: plan.ff_dim,
            dropout: 0.0,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: AeConfig,
    pub store: ParamStore,
    pub layers: Vec<VitLayer>,
    pub head: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &AeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for (i, (spec, plan)) in cfg.encoder_specs()?.into_iter().zip(&cfg.layers).enumerate() {
            layers.push(VitLayer::new(&mut store, &format!("enc.vit{i}"), spec, &cfg.attention(plan), rng)?);
        }
        let (c, n) = cfg.bottleneck()?;
        let head = Linear::new(&mut store, "enc.head", c * n, cfg.latent_dim, Init::Glorot, rng);
        Ok(Encoder { cfg: cfg.clone(), store, layers, head })
    }

    /// `[B, C, N] -> [B, latent_dim]`
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.cfg.channels || shape[2] != self.cfg.length {
            return Err(shape_err!(
                "encoder expects [B, {}, {}], got {:?}",
                self.cfg.channels,
                self.cfg.length,
                shape
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(ctx, h)?;
        }
        let flat = h.shape()[1] * h.shape()[2];
        self.head.forward(ctx, h.reshape(&[shape[0], flat])?)
    }

    /// Encodes a batch of normalized states `[B, C·N]` (or `[B, C, N]`).
    pub fn encode(&self, states: &Tensor) -> Result<Tensor> {
        let b = states.shape()[0];
        let x = states.reshape(&[b, self.cfg.channels, self.cfg.length])?;
        let tape = Tape::inference();
        let ctx = self.store.bind(&tape);
        let z = self.forward(&ctx, tape.constant(x))?;
        Ok((*z.value()).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: AeConfig,
    pub store: ParamStore,
    pub lift: Linear,
    pub layers: Vec<VitLayer>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &AeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (c, n) = cfg.bottleneck()?;
        let lift = Linear::new(&mut store, "dec.lift", cfg.latent_dim + cfg.param_dim, c * n, Init::Glorot, rng);
        let specs = cfg.encoder_specs()?;
        let mut layers = Vec::new();
        for (i, (spec, plan)) in specs.iter().zip(&cfg.layers).enumerate().rev() {
            layers.push(VitLayer::new(&mut store, &format!("dec.vit{i}"), spec.mirrored(), &cfg.attention(plan), rng)?);
        }
        Ok(Decoder { cfg: cfg.clone(), store, lift, layers })
    }

    /// `z: [B, latent_dim]`, `m: [B, param_dim]` -> `[B, C, N]`
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, z: Var<'t>, m: Option<Var<'t>>) -> Result<Var<'t>> {
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.cfg.latent_dim {
            return Err(shape_err!("decoder expects [B, {}], got {:?}", self.cfg.latent_dim, zs));
        }
        let b = zs[0];
        let input = match (m, self.cfg.param_dim) {
            (None, 0) => z,
            (Some(m), d) if d > 0 => {
                if m.shape() != [b, d] {
                    return Err(shape_err!("decoder parameters must be [{b}, {d}], got {:?}", m.shape()));
                }
                Var::concat(&[z, m], 1)?
            }
            (None, d) => return Err(config_err!("decoder needs {d} parameters, none given")),
            (Some(_), _) => return Err(config_err!("decoder takes no parameters")),
        };
        let (c, n) = self.cfg.bottleneck()?;
        let mut h = self.lift.forward(ctx, input)?.reshape(&[b, c, n])?;
        for layer in &self.layers {
            h = layer.forward(ctx, h)?;
        }
        Ok(h)
    }

    /// Decodes `[B, latent_dim]` latents to normalized states `[B, C·N]`.
    pub fn decode(&self, z: &Tensor, m: Option<&Tensor>) -> Result<Tensor> {
        let b = z.shape()[0];
        let tape = Tape::inference();
        let ctx = self.store.bind(&tape);
        let mv = m.map(|m| tape.constant(m.clone()));
        let out = self.forward(&ctx, tape.constant(z.clone()), mv)?;
        out.value().reshape(&[b, self.cfg.state_len()])
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(cfg: &AeConfig, rng: &mut R) -> Result<Self> {
        Ok(Autoencoder { encoder: Encoder::new(cfg, rng)?, decoder: Decoder::new(cfg, rng)? })
    }

    pub fn cfg(&self) -> &AeConfig {
        &self.encoder.cfg
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.cfg.latent_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    #[test]
    fn latent_and_state_shapes() {
        let cfg = AeConfig::two_layer(1, 128, 16, 0);
        let ae = Autoencoder::new(&cfg, &mut rng_stream(1, 0)).unwrap();
        let x = Tensor::uniform(&[5, 128], 0.0, 1.0, &mut rng_stream(2, 0));
        let z = ae.encoder.encode(&x).unwrap();
        assert_eq!(z.shape(), &[5, 16]);
        assert_eq!(z, ae.encoder.encode(&x).unwrap());
        let y = ae.decoder.decode(&z, None).unwrap();
        assert_eq!(y.shape(), &[5, 128]);
    }

    #[test]
    fn parameter_input_is_checked() {
        let cfg = AeConfig::two_layer(1, 64, 4, 1);
        let dec = Decoder::new(&cfg, &mut rng_stream(1, 0)).unwrap();
        let z = Tensor::zeros(&[2, 4]);
        assert!(dec.decode(&z, None).is_err());
        assert!(dec.decode(&z, Some(&Tensor::zeros(&[2, 1]))).is_ok());
        let plain = Decoder::new(&AeConfig::two_layer(1, 64, 4, 0), &mut rng_stream(1, 0)).unwrap();
        assert!(plain.decode(&z, Some(&Tensor::zeros(&[2, 1]))).is_err());
    }

    #[test]
    fn desk_scale_state_maps_to_sixteen_latents() {
        let cfg = AeConfig::two_layer(1, 256, 16, 0);
        let enc = Encoder::new(&cfg, &mut rng_stream(1, 0)).unwrap();
        let z = enc.encode(&Tensor::zeros(&[1, 256])).unwrap();
        assert_eq!(z.shape(), &[1, 16]);
    }
}
