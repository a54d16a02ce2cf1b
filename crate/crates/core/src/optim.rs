//! Adam, warm-up cosine learning rates and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, DlspfError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>], lr: f64) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    pub fn for_store(store: &ParamStore, lr: f64) -> Self {
        let shapes: Vec<Vec<usize>> = store.ids().map(|id| store.get(id).shape().to_vec()).collect();
        Self::new(&shapes, lr)
    }

    fn check(&self, shapes: &[&[usize]], grads: &[Tensor]) -> Result<()> {
        if shapes.len() != grads.len() || shapes.len() != self.m.len() {
            return Err(shape_err!(
                "adam: {} params, {} grads, {} moment slots",
                shapes.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for (i, (s, g)) in shapes.iter().zip(grads).enumerate() {
            if *s != g.shape() || *s != self.m[i].shape() {
                return Err(shape_err!("adam slot {i}: param {:?}, grad {:?}", s, g.shape()));
            }
            if !g.all_finite() {
                return Err(DlspfError::NonFinite(format!("gradient {i} is not finite; update rejected")));
            }
        }
        Ok(())
    }

    fn apply(&mut self, i: usize, param: &mut [f64], grad: &[f64]) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        for j in 0..param.len() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            param[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
        }
    }
}

/// One bias-corrected Adam update of plain tensors.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
    state.check(&shapes, grads)?;
    state.step += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.apply(i, p.data_mut(), g.data());
    }
    Ok(())
}

/// One Adam update applied in place to every parameter of a store.
pub fn adam_step_store(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    let shapes: Vec<Vec<usize>> = store.ids().map(|id| store.get(id).shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    state.check(&refs, grads)?;
    state.step += 1;
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        state.apply(i, store.get_mut(id).data_mut(), grads[i].data());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(config_err!("learning rates need 0 <= min_lr <= base_lr, base_lr > 0"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(config_err!("warmup {} exceeds total {}", self.warmup_steps, self.total_steps));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `base_lr` over the warm-up, then cosine decay to
/// `min_lr` at `total_steps`; later steps stay at `min_lr`.
pub fn lr_at(s: &LrSchedule, step: usize) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return s.min_lr;
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    let progress = (step - s.warmup_steps) as f64 / span;
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
