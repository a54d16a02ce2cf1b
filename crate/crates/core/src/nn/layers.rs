use rand::Rng;

use super::params::{Ctx, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Activation, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Glorot-uniform weights, zero bias.
    Glorot,
    /// All zeros (used for residual-branch output projections).
    Zeros,
}

/// Affine map over the last axis: `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Glorot => {
                let a = (6.0 / (din + dout) as f64).sqrt();
                Tensor::uniform(&[din, dout], -a, a, rng)
            }
            Init::Zeros => Tensor::zeros(&[din, dout]),
        };
        let w = store.add(&format!("{name}.weight"), w, true);
        let b = store.add(&format!("{name}.bias"), Tensor::zeros(&[dout]), false);
        Linear { w, b, din, dout }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(ctx.p(self.w))?.add(ctx.p(self.b))
    }
}

/// Applies `activation(x · W + b)`.
pub fn dense<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, activation: Activation) -> Result<Var<'t>> {
    x.matmul(w)?.add(b)?.activation(activation)
}

/// Standardizes the last axis, then scales and shifts it.
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    x.normalize(eps)?.mul(gamma)?.add(beta)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::ones(&[dim]), false);
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), false);
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta), self.eps)
    }
}

/// Two-layer position-wise network `W2 · act(W1 · x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, Init::Glorot, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, out_init, rng),
            activation,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(ctx, x)?.activation(self.activation)?;
        self.down.forward(ctx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn dense_identity_and_zero_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap());
        let w = tape.constant(Tensor::eye(3));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = dense(x, w, b, Activation::Identity).unwrap();
        assert_eq!(*y.value(), *x.value());

        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        for act in [Activation::Identity, Activation::Gelu, Activation::Relu, Activation::Tanh] {
            let y = dense(zero, w, b, act).unwrap();
            assert!(y.value().data().iter().all(|v| *v == 0.0));
        }
        let bad = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(dense(x, bad, b, Activation::Identity).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::from_vec(vec![5.0; 4]));
        let y = layer_norm(c, g, b, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-12));

        // mean 0, biased variance 1
        let v = vec![1.0, -1.0, 1.0, -1.0];
        let x = tape.constant(Tensor::from_vec(v.clone()));
        let y = layer_norm(x, g, b, 1e-12).unwrap();
        for (a, e) in y.value().data().iter().zip(&v) {
            assert!((a - e).abs() < 1e-6);
        }
    }
}
