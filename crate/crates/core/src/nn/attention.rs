//! Scaled dot-product attention, multi-head attention, sinusoidal positions
//! and the pre-norm transformer encoder block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{FeedForward, Init, LayerNorm, Linear};
use super::params::{Ctx, ParamStore};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Activation, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Hidden width of the position-wise feed-forward network.
    pub ff_dim: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, num_heads: usize, ff_dim: usize) -> Self {
        AttentionConfig { embed_dim, num_heads, ff_dim, dropout: 0.0, activation: Activation::Gelu }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(config_err!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim,
                self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// `softmax(Q Kᵀ / √d) V` over the trailing two axes; leading axes are batch.
pub fn scaled_dot_product_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    causal: bool,
) -> Result<Var<'t>> {
    let weights = attention_weights(q, k, causal)?;
    weights.bmm(v, false)
}

/// The attention map `softmax(Q Kᵀ / √d)`.
pub fn attention_weights<'t>(q: Var<'t>, k: Var<'t>, causal: bool) -> Result<Var<'t>> {
    let d = *q.shape().last().ok_or_else(|| shape_err!("attention on a 0-d tensor"))?;
    q.bmm(k, true)?.scale(1.0 / (d as f64).sqrt())?.softmax(causal)
}

/// Sinusoidal encoding: row `p`, channel `2i` is `sin(p / 10000^(2i/d))`,
/// channel `2i+1` the matching cosine.
pub fn positional_encoding(k: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; k * d];
    for p in 0..k {
        for c in 0..d {
            let i2 = (c - c % 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d as f64);
            data[p * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[k, d], data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        let d = cfg.embed_dim;
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), d, d, Init::Glorot, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, Init::Glorot, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, Init::Glorot, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, out_init, rng),
            num_heads: cfg.num_heads,
        }
    }

    /// `x_q: [B, T, d]`, `x_kv: [B, S, d]` -> `[B, T, d]`. Passing the same
    /// tensor twice gives self-attention.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x_q: Var<'t>,
        x_kv: Var<'t>,
        causal: bool,
    ) -> Result<Var<'t>> {
        let (sq, skv) = (x_q.shape(), x_kv.shape());
        if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] || sq[2] != skv[2] {
            return Err(shape_err!("attention inputs {:?} and {:?}", sq, skv));
        }
        let (b, t, d) = (sq[0], sq[1], sq[2]);
        let s = skv[1];
        let h = self.num_heads;
        if d % h != 0 {
            return Err(shape_err!("embedding {d} not divisible by {h} heads"));
        }
        let dh = d / h;
        let split = |x: Var<'t>, len: usize| -> Result<Var<'t>> {
            x.reshape(&[b, len, h, dh])?.permute(&[0, 2, 1, 3])
        };
        let q = split(self.query.forward(ctx, x_q)?, t)?;
        let k = split(self.key.forward(ctx, x_kv)?, s)?;
        let v = split(self.value.forward(ctx, x_kv)?, s)?;
        let ctx_heads = scaled_dot_product_attention(q, k, v, causal)?;
        let merged = ctx_heads.permute(&[0, 2, 1, 3])?.reshape(&[b, t, d])?;
        self.output.forward(ctx, merged)
    }
}

/// Pre-norm encoder block: `h = x + MHA(LN(x))`, `out = h + FFN(LN(h))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        let d = cfg.embed_dim;
        EncoderBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, out_init, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.ff_dim, cfg.activation, out_init, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, causal: bool) -> Result<Var<'t>> {
        let n = self.norm_attn.forward(ctx, x)?;
        let a = self.attn.forward(ctx, n, n, causal)?;
        let h = x.add(ctx.dropout(a, self.dropout)?)?;
        let n = self.norm_ff.forward(ctx, h)?;
        let f = self.ff.forward(ctx, n)?;
        h.add(ctx.dropout(f, self.dropout)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use crate::tensor::Tape;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut rng_stream(seed, 0))
    }

    #[test]
    fn single_position_returns_values() {
        let tape = Tape::new();
        let q = tape.constant(rand_tensor(&[1, 4], 1));
        let k = tape.constant(rand_tensor(&[1, 4], 2));
        let v = tape.constant(rand_tensor(&[1, 4], 3));
        let out = scaled_dot_product_attention(q, k, v, false).unwrap();
        assert_eq!(*out.value(), *v.value());
    }

    #[test]
    fn zero_query_averages_values() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[3, 2]));
        let k = tape.constant(rand_tensor(&[3, 2], 4));
        let vt = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let v = tape.constant(vt);
        let out = scaled_dot_product_attention(q, k, v, false).unwrap();
        for row in out.value().data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let tape = Tape::new();
        let q = tape.constant(rand_tensor(&[2, 5, 3], 5));
        let k = tape.constant(rand_tensor(&[2, 5, 3], 6));
        for causal in [false, true] {
            let w = attention_weights(q, k, causal).unwrap();
            for row in w.value().data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(16, 8);
        for (c, v) in pe.row(0).iter().enumerate() {
            assert_eq!(*v, if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(AttentionConfig::new(6, 4, 8).validate().is_err());
        assert!(AttentionConfig::new(8, 4, 8).validate().is_ok());
    }

    #[test]
    fn zero_output_projections_make_block_identity() {
        let cfg = AttentionConfig::new(8, 2, 16);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "b", &cfg, Init::Zeros, &mut rng_stream(0, 0));
        let tape = Tape::new();
        let ctx = store.bind(&tape);
        let x = tape.constant(rand_tensor(&[2, 4, 8], 9));
        let y = block.forward(&ctx, x, false).unwrap();
        assert_eq!(*y.value(), *x.value());
    }
}
