//! Transformer time stepper on latent states with memory and a parameter token.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{positional_encoding, AttentionConfig, EncoderBlock};
use super::layers::{Init, LayerNorm, Linear};
use super::params::{Ctx, ParamStore};
use super::wae::{LossComponents, TrainHistory};
use crate::error::{config_err, shape_err, DlspfError, Result};
use crate::optim::{adam_step_store, clip_grad_norm, lr_at, AdamState, LrSchedule};
use crate::rng::{rng_stream, stream_id, Purpose};
use crate::tensor::{Activation, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepperConfig {
    pub latent_dim: usize,
    /// Number of past states used in addition to the current one.
    pub memory: usize,
    /// Unrolled steps in the training loss.
    pub unroll: usize,
    #[serde(default)]
    pub param_dim: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Predict `z_n + Δ` instead of `z_{n+1}` directly.
    #[serde(default = "yes")]
    pub residual: bool,
    /// Solver steps per latent step.
    #[serde(default = "one")]
    pub time_stride: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl StepperConfig {
    pub fn new(latent_dim: usize, memory: usize, param_dim: usize) -> Self {
        StepperConfig {
            latent_dim,
            memory,
            unroll: 4,
            param_dim,
            embed_dim: 32,
            num_blocks: 2,
            num_heads: 2,
            ff_dim: 64,
            residual: true,
            time_stride: 1,
            activation: Activation::Gelu,
        }
    }

    pub fn window(&self) -> usize {
        self.memory + 1
    }

    /// Tokens seen by the attention stack.
    pub fn context_len(&self) -> usize {
        self.window() + usize::from(self.param_dim > 0)
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            dropout: 0.0,
            activation: self.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.unroll == 0 || self.time_stride == 0 || self.num_blocks == 0 {
            return Err(config_err!("stepper needs positive latent_dim, unroll, time_stride and blocks"));
        }
        self.attention().validate()
    }
}

#[derive(Clone, Debug)]
pub struct LatentStepper {
    pub cfg: StepperConfig,
    pub store: ParamStore,
    pub param_encoder: Option<Linear>,
    pub lift: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    positions: Tensor,
}

/// Left-pads `history` to `window` entries by repeating its earliest state.
pub fn pad_history(history: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    let first = history.first().cloned().unwrap_or_default();
    let mut out = vec![first; window.saturating_sub(history.len())];
    out.extend_from_slice(&history[history.len().saturating_sub(window)..]);
    out
}

impl LatentStepper {
    pub fn new<R: Rng + ?Sized>(cfg: &StepperConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let e = cfg.embed_dim;
        let param_encoder =
            (cfg.param_dim > 0).then(|| Linear::new(&mut store, "dyn.param", cfg.param_dim, e, Init::Glorot, rng));
        let lift = Linear::new(&mut store, "dyn.lift", cfg.latent_dim, e, Init::Glorot, rng);
        let attn = cfg.attention();
        let blocks =
            (0..cfg.num_blocks).map(|i| EncoderBlock::new(&mut store, &format!("dyn.block{i}"), &attn, Init::Glorot, rng)).collect();
        let norm = LayerNorm::new(&mut store, "dyn.norm", e);
        let head = Linear::new(&mut store, "dyn.head", e, cfg.latent_dim, Init::Glorot, rng);
        Ok(LatentStepper {
            positions: positional_encoding(cfg.context_len(), e),
            cfg: cfg.clone(),
            store,
            param_encoder,
            lift,
            blocks,
            norm,
            head,
        })
    }

    /// The parameter token `g(m)`: `[B, N_m] -> [B, embed_dim]`.
    pub fn param_token<'t>(&self, ctx: &Ctx<'t>, m: Var<'t>) -> Result<Var<'t>> {
        let g = self.param_encoder.as_ref().ok_or_else(|| config_err!("stepper takes no parameters"))?;
        let s = m.shape();
        if s.len() != 2 || s[1] != self.cfg.param_dim {
            return Err(shape_err!("parameters must be [B, {}], got {:?}", self.cfg.param_dim, s));
        }
        g.forward(ctx, m)
    }

    /// `history: [B, k+1, latent]`, `m: [B, N_m]` -> `[B, latent]`
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, history: Var<'t>, m: Option<Var<'t>>) -> Result<Var<'t>> {
        let c = &self.cfg;
        let s = history.shape();
        if s.len() != 3 || s[1] != c.window() || s[2] != c.latent_dim {
            return Err(shape_err!("history must be [B, {}, {}], got {:?}", c.window(), c.latent_dim, s));
        }
        let b = s[0];
        let mut tokens = self.lift.forward(ctx, history)?;
        match (m, &self.param_encoder) {
            (Some(m), Some(_)) => {
                let g = self.param_token(ctx, m)?.reshape(&[b, 1, c.embed_dim])?;
                tokens = Var::concat(&[g, tokens], 1)?;
            }
            (None, None) => {}
            (None, Some(_)) => return Err(config_err!("stepper needs {} parameters", c.param_dim)),
            (Some(_), None) => return Err(config_err!("stepper takes no parameters")),
        }
        let mut h = tokens.add(ctx.tape().constant(self.positions.clone()))?;
        for block in &self.blocks {
            h = block.forward(ctx, h, true)?;
        }
        let t = c.context_len();
        let last = h.slice(1, t - 1, 1)?.reshape(&[b, c.embed_dim])?;
        let out = self.head.forward(ctx, self.norm.forward(ctx, last)?)?;
        if c.residual {
            out.add(history.slice(1, c.window() - 1, 1)?.reshape(&[b, c.latent_dim])?)
        } else {
            Ok(out)
        }
    }

    /// One step for a batch of windows `[B, k+1, latent]`.
    pub fn step(&self, history: &Tensor, m: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::inference();
        let ctx = self.store.bind(&tape);
        let out = self.forward(&ctx, tape.constant(history.clone()), m.map(|m| tape.constant(m.clone())))?;
        Ok((*out.value()).clone())
    }

    /// Recursive prediction from one (possibly short) history.
    ///
    /// Returns the padded window followed by `steps` predictions, so the
    /// trajectory holds `k + 1 + steps` states.
    pub fn rollout(&self, history: &[Vec<f64>], m: Option<&[f64]>, steps: usize) -> Result<Vec<Vec<f64>>> {
        let w = self.cfg.window();
        let l = self.cfg.latent_dim;
        if history.is_empty() || history.iter().any(|z| z.len() != l) {
            return Err(shape_err!("rollout history must hold latent vectors of length {l}"));
        }
        let mut traj = pad_history(history, w);
        let mt = m.map(|m| Tensor::new(&[1, m.len()], m.to_vec())).transpose()?;
        for _ in 0..steps {
            let window: Vec<f64> = traj[traj.len() - w..].concat();
            let next = self.step(&Tensor::new(&[1, w, l], window)?, mt.as_ref())?;
            traj.push(next.into_data());
        }
        Ok(traj)
    }

    /// Batched [`LatentStepper::rollout`]: `history: [B, k+1, latent]` -> `[B, k+1+steps, latent]`.
    pub fn rollout_batch(&self, history: &Tensor, m: Option<&Tensor>, steps: usize) -> Result<Tensor> {
        let (b, w, l) = (history.shape()[0], self.cfg.window(), self.cfg.latent_dim);
        let mut traj: Vec<Vec<f64>> = (0..b).map(|i| history.data()[i * w * l..(i + 1) * w * l].to_vec()).collect();
        let mut window = history.clone();
        for _ in 0..steps {
            let next = self.step(&window, m)?;
            let mut data = Vec::with_capacity(b * w * l);
            for i in 0..b {
                let z = &next.data()[i * l..(i + 1) * l];
                traj[i].extend_from_slice(z);
                data.extend_from_slice(&window.data()[i * w * l + l..(i + 1) * w * l]);
                data.extend_from_slice(z);
            }
            window = Tensor::new(&[b, w, l], data)?;
        }
        Tensor::new(&[b, w + steps, l], traj.concat())
    }
}

/// Unrolled loss: Σᵢ mean‖fⁱ(window) − target_i‖² without teacher forcing, plus `alpha·R`.
pub fn unrolled_loss<'t>(
    st: &LatentStepper,
    ctx: &Ctx<'t>,
    history: Var<'t>,
    targets: Var<'t>,
    m: Option<Var<'t>>,
    alpha: f64,
) -> Result<Var<'t>> {
    let ts = targets.shape();
    let s = ts[1];
    let mut window = history;
    let mut total = ctx.tape().constant(Tensor::scalar(0.0));
    for i in 0..s {
        let pred = st.forward(ctx, window, m)?;
        let target = targets.slice(1, i, 1)?.reshape(&[ts[0], ts[2]])?;
        total = total.add(pred.sub(target)?.square()?.mean()?)?;
        if i + 1 < s {
            let w = st.cfg.window();
            let kept = if w > 1 { Some(window.slice(1, 1, w - 1)?) } else { None };
            let p = pred.reshape(&[ts[0], 1, ts[2]])?;
            window = match kept {
                Some(k) => Var::concat(&[k, p], 1)?,
                None => p,
            };
        }
    }
    if alpha > 0.0 {
        total = total.add(ctx.l2()?.scale(alpha)?)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepperTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for StepperTrainConfig {
    fn default() -> Self {
        StepperTrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            min_lr: 1e-5,
            warmup_steps: 100,
            alpha: 0.0,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

/// Training windows drawn from latent trajectories subsampled by `time_stride`.
pub struct LatentWindows {
    /// `[n_traj, T, latent]` after subsampling
    pub traj: Tensor,
    pub params: Option<Tensor>,
    /// `(trajectory, current index)` pairs with `unroll` future states available
    pub index: Vec<(usize, usize)>,
}

impl LatentWindows {
    pub fn new(latents: &Tensor, params: Option<&Tensor>, cfg: &StepperConfig) -> Result<Self> {
        let s = latents.shape();
        if s.len() != 3 || s[2] != cfg.latent_dim {
            return Err(config_err!(
                "latent trajectories {:?} do not match stepper latent_dim {}",
                s,
                cfg.latent_dim
            ));
        }
        let (n, t, l) = (s[0], s[1], s[2]);
        let kept: Vec<usize> = (0..t).step_by(cfg.time_stride).collect();
        let tk = kept.len();
        let mut data = Vec::with_capacity(n * tk * l);
        for i in 0..n {
            for &j in &kept {
                data.extend_from_slice(&latents.data()[(i * t + j) * l..(i * t + j + 1) * l]);
            }
        }
        if tk <= cfg.unroll {
            return Err(config_err!("{tk} latent steps leave no room for unroll {}", cfg.unroll));
        }
        let index = (0..n).flat_map(|i| (0..tk - cfg.unroll).map(move |j| (i, j))).collect();
        Ok(LatentWindows { traj: Tensor::new(&[n, tk, l], data)?, params: params.cloned(), index })
    }

    fn state(&self, i: usize, j: usize) -> &[f64] {
        let (t, l) = (self.traj.shape()[1], self.traj.shape()[2]);
        &self.traj.data()[(i * t + j) * l..(i * t + j + 1) * l]
    }

    /// `(history [B, k+1, L], targets [B, s, L], params [B, N_m])` for the given samples.
    pub fn batch(&self, picks: &[(usize, usize)], cfg: &StepperConfig) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let (w, s, l) = (cfg.window(), cfg.unroll, cfg.latent_dim);
        let mut hist = Vec::with_capacity(picks.len() * w * l);
        let mut targ = Vec::with_capacity(picks.len() * s * l);
        for &(i, j) in picks {
            for back in (0..w).rev() {
                hist.extend_from_slice(self.state(i, j.saturating_sub(back)));
            }
            for f in 1..=s {
                targ.extend_from_slice(self.state(i, j + f));
            }
        }
        let b = picks.len();
        let params = match &self.params {
            Some(p) => {
                let d = p.shape()[1];
                let data = picks.iter().flat_map(|&(i, _)| p.data()[i * d..(i + 1) * d].iter().copied()).collect();
                Some(Tensor::new(&[b, d], data)?)
            }
            None => None,
        };
        Ok((Tensor::new(&[b, w, l], hist)?, Tensor::new(&[b, s, l], targ)?, params))
    }
}

/// Trains the stepper on latent trajectories `[n_traj, n_steps+1, latent]`.
pub fn train_stepper(
    st: &mut LatentStepper,
    latents: &Tensor,
    params: Option<&Tensor>,
    cfg: &StepperTrainConfig,
) -> Result<TrainHistory> {
    if (st.cfg.param_dim > 0) != params.is_some() {
        return Err(config_err!("parameter input must be given iff param_dim > 0"));
    }
    let data = LatentWindows::new(latents, params, &st.cfg)?;
    let n = data.index.len();
    if cfg.batch_size == 0 || n < cfg.batch_size {
        return Err(config_err!("batch size {} must be in [1, {n}]", cfg.batch_size));
    }
    let per_epoch = n / cfg.batch_size;
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps.min(per_epoch * cfg.epochs),
        total_steps: per_epoch * cfg.epochs,
        min_lr: cfg.min_lr,
    };
    schedule.validate()?;
    let mut opt = AdamState::for_store(&st.store, cfg.lr);
    let mut history = TrainHistory::default();
    let mut order = data.index.clone();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_stream(cfg.seed, stream_id(Purpose::Training, epoch as u64, 1)));
        let mut acc = 0.0;
        for picks in order.chunks_exact(cfg.batch_size) {
            let (h, t, m) = data.batch(picks, &st.cfg)?;
            let tape = Tape::new();
            let ctx = st.store.bind(&tape);
            let diverged = |e: DlspfError| match e {
                DlspfError::NonFinite(msg) => DlspfError::Divergence(format!("step {step}: {msg}")),
                other => other,
            };
            let loss = unrolled_loss(
                st,
                &ctx,
                tape.constant(h),
                tape.constant(t),
                m.map(|m| tape.constant(m)),
                cfg.alpha,
            )
            .map_err(diverged)?;
            let value = loss.item();
            let grads = tape.backward(loss).map_err(diverged)?;
            let mut g: Vec<Tensor> = ctx.vars().iter().map(|v| grads.get_or_zeros(*v)).collect();
            drop(ctx);
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(&mut g, max);
            }
            opt.lr = lr_at(&schedule, step);
            adam_step_store(&mut st.store, &g, &mut opt).map_err(diverged)?;
            history.steps.push(LossComponents { recon: value, total: value, ..Default::default() });
            acc += value;
            step += 1;
        }
        let mean = acc / per_epoch as f64;
        history.epochs.push(LossComponents { recon: mean, total: mean, ..Default::default() });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    fn small(param_dim: usize) -> LatentStepper {
        let mut cfg = StepperConfig::new(4, 2, param_dim);
        cfg.embed_dim = 8;
        cfg.ff_dim = 16;
        LatentStepper::new(&cfg, &mut rng_stream(11, 0)).unwrap()
    }

    #[test]
    fn step_shape_and_determinism() {
        let st = small(0);
        let h = Tensor::randn(&[3, 3, 4], 1.0, &mut rng_stream(1, 0));
        let a = st.step(&h, None).unwrap();
        assert_eq!(a.shape(), &[3, 4]);
        assert_eq!(a, st.step(&h, None).unwrap());
        assert!(st.step(&h, Some(&Tensor::zeros(&[3, 1]))).is_err());
    }

    #[test]
    fn rollout_length_and_single_step() {
        let st = small(1);
        let z0 = vec![vec![0.1, -0.2, 0.3, 0.0]];
        let m = [0.4];
        let tr = st.rollout(&z0, Some(&m), 5).unwrap();
        assert_eq!(tr.len(), 3 + 5);
        assert_eq!(tr[0], tr[2]);
        let one = st.rollout(&z0, Some(&m), 1).unwrap();
        let window = Tensor::new(&[1, 3, 4], pad_history(&z0, 3).concat()).unwrap();
        let direct = st.step(&window, Some(&Tensor::new(&[1, 1], vec![0.4]).unwrap())).unwrap();
        assert_eq!(one[3], direct.data());
        let batch = st
            .rollout_batch(&window, Some(&Tensor::new(&[1, 1], vec![0.4]).unwrap()), 5)
            .unwrap();
        assert_eq!(batch.data(), tr.concat().as_slice());
    }

    #[test]
    fn single_unroll_is_one_step_mse() {
        let st = small(0);
        let mut rng = rng_stream(2, 0);
        let h = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let t = Tensor::randn(&[2, 1, 4], 1.0, &mut rng);
        let pred = st.step(&h, None).unwrap();
        let mse = pred.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 8.0;
        let tape = Tape::new();
        let ctx = st.store.bind(&tape);
        let l = unrolled_loss(&st, &ctx, tape.constant(h.clone()), tape.constant(t), None, 0.0).unwrap();
        assert!((l.item() - mse).abs() < 1e-14);

        // perfect targets give zero loss
        let mut targets = Vec::new();
        let traj = st.rollout_batch(&h, None, 3).unwrap();
        for i in 0..2 {
            targets.extend_from_slice(&traj.data()[i * 24 + 12..(i + 1) * 24]);
        }
        let tt = Tensor::new(&[2, 3, 4], targets).unwrap();
        let l = unrolled_loss(&st, &ctx, tape.constant(h), tape.constant(tt), None, 0.0).unwrap();
        assert!(l.item().abs() < 1e-24);
    }

    #[test]
    fn window_beyond_memory_is_ignored() {
        let st = small(0);
        let base = vec![vec![0.5, 0.1, -0.3, 0.2], vec![0.0, 0.2, 0.1, -0.1], vec![0.3, 0.3, 0.0, 0.1]];
        let mut longer = vec![vec![9.0, 9.0, 9.0, 9.0]];
        longer.extend(base.clone());
        let a = st.rollout(&base, None, 2).unwrap();
        let b = st.rollout(&longer, None, 2).unwrap();
        assert_eq!(a[3..], b[3..]);
    }
}
