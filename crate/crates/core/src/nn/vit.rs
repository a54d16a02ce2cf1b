//! Patch-based transformer layers that change channel count and length.
//!
//! A layer splits `[C, N]` into `p` contiguous patches of `[C, N/p]`, embeds
//! each flattened patch, lets the patches attend to each other, and projects
//! each patch token to `[C', N'_p]` before stitching the patches back together.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{positional_encoding, AttentionConfig, EncoderBlock};
use super::layers::{Init, Linear};
use super::params::{Ctx, ParamStore};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub num_patches: usize,
    pub in_channels: usize,
    pub in_length: usize,
    pub embed_dim: usize,
    pub out_channels: usize,
    pub out_patch_len: usize,
}

impl PatchSpec {
    pub fn patch_len(&self) -> usize {
        self.in_length / self.num_patches
    }

    pub fn out_length(&self) -> usize {
        self.num_patches * self.out_patch_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_patches == 0 || !self.in_length.is_multiple_of(self.num_patches) {
            return Err(config_err!(
                "length {} is not divisible into {} patches",
                self.in_length,
                self.num_patches
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.out_patch_len == 0 || self.embed_dim == 0 {
            return Err(config_err!("patch spec has a zero extent: {:?}", self));
        }
        Ok(())
    }

    /// The spec that maps this layer's output shape back to its input shape.
    pub fn mirrored(&self) -> PatchSpec {
        PatchSpec {
            num_patches: self.num_patches,
            in_channels: self.out_channels,
            in_length: self.out_length(),
            embed_dim: self.embed_dim,
            out_channels: self.in_channels,
            out_patch_len: self.patch_len(),
        }
    }
}

/// Splits `[C, N]` into `p` contiguous `[C, N/p]` patches.
pub fn patchify(x: &Tensor, p: usize) -> Result<Vec<Tensor>> {
    if x.ndim() != 2 {
        return Err(shape_err!("patchify expects [C, N], got {:?}", x.shape()));
    }
    let (c, n) = (x.shape()[0], x.shape()[1]);
    if p == 0 || n % p != 0 {
        return Err(config_err!("length {n} is not divisible into {p} patches"));
    }
    let np = n / p;
    (0..p)
        .map(|i| {
            let data = (0..c).flat_map(|ch| x.data()[ch * n + i * np..ch * n + (i + 1) * np].iter().copied()).collect();
            Tensor::new(&[c, np], data)
        })
        .collect()
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Tensor]) -> Result<Tensor> {
    let first = patches.first().ok_or_else(|| shape_err!("no patches"))?;
    let (c, np) = (first.shape()[0], first.shape()[1]);
    if patches.iter().any(|t| t.shape() != first.shape()) {
        return Err(shape_err!("patches differ in shape"));
    }
    let n = np * patches.len();
    let mut data = vec![0.0; c * n];
    for (i, t) in patches.iter().enumerate() {
        for ch in 0..c {
            data[ch * n + i * np..ch * n + (i + 1) * np].copy_from_slice(&t.data()[ch * np..(ch + 1) * np]);
        }
    }
    Tensor::new(&[c, n], data)
}

#[derive(Clone, Debug)]
pub struct VitLayer {
    pub spec: PatchSpec,
    pub embed: Linear,
    pub positions: Tensor,
    pub block: EncoderBlock,
    pub project: Linear,
}

impl VitLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: PatchSpec,
        attn: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if attn.embed_dim != spec.embed_dim {
            return Err(config_err!("attention width {} != patch embedding {}", attn.embed_dim, spec.embed_dim));
        }
        attn.validate()?;
        let patch_in = spec.in_channels * spec.patch_len();
        let patch_out = spec.out_channels * spec.out_patch_len;
        Ok(VitLayer {
            embed: Linear::new(store, &format!("{name}.embed"), patch_in, spec.embed_dim, Init::Glorot, rng),
            positions: positional_encoding(spec.num_patches, spec.embed_dim),
            block: EncoderBlock::new(store, &format!("{name}.block"), attn, Init::Glorot, rng),
            project: Linear::new(store, &format!("{name}.project"), spec.embed_dim, patch_out, Init::Glorot, rng),
            spec,
        })
    }

    /// `[B, C_in, N_in] -> [B, C_out, N_out]`
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = &self.spec;
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != s.in_channels || shape[2] != s.in_length {
            return Err(shape_err!(
                "vit layer expects [B, {}, {}], got {:?}",
                s.in_channels,
                s.in_length,
                shape
            ));
        }
        let (b, p, np) = (shape[0], s.num_patches, s.patch_len());
        let tokens = x
            .reshape(&[b, s.in_channels, p, np])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, p, s.in_channels * np])?;
        let pos = ctx.tape().constant(self.positions.clone());
        let e = self.embed.forward(ctx, tokens)?.add(pos)?;
        let e = self.block.forward(ctx, e, false)?;
        self.project
            .forward(ctx, e)?
            .reshape(&[b, p, s.out_channels, s.out_patch_len])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, s.out_channels, s.out_length()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use crate::tensor::Tape;

    #[test]
    fn patchify_shapes_and_round_trip() {
        let x = Tensor::new(&[2, 8], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].shape(), &[2, 4]);
        assert_eq!(p[0].data(), &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(unpatchify(&p).unwrap(), x);
        let one = patchify(&x, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], x);
        assert!(patchify(&x, 3).is_err());
    }

    #[test]
    fn reduction_and_expansion_shapes() {
        let spec = PatchSpec {
            num_patches: 8,
            in_channels: 1,
            in_length: 256,
            embed_dim: 16,
            out_channels: 4,
            out_patch_len: 16,
        };
        assert_eq!(spec.patch_len(), 32);
        assert_eq!(spec.out_length(), 128);
        let attn = AttentionConfig::new(16, 2, 32);
        let mut store = ParamStore::new();
        let mut rng = rng_stream(0, 0);
        let down = VitLayer::new(&mut store, "down", spec.clone(), &attn, &mut rng).unwrap();
        let up = VitLayer::new(&mut store, "up", spec.mirrored(), &attn, &mut rng).unwrap();
        let tape = Tape::inference();
        let ctx = store.bind(&tape);
        let x = tape.constant(Tensor::randn(&[3, 1, 256], 1.0, &mut rng));
        let h = down.forward(&ctx, x).unwrap();
        assert_eq!(h.shape(), vec![3, 4, 128]);
        let y = up.forward(&ctx, h).unwrap();
        assert_eq!(y.shape(), vec![3, 1, 256]);
    }
}
