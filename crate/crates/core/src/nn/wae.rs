//! Wasserstein autoencoder loss, min-max normalization and the training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::autoencoder::Autoencoder;
use super::params::Ctx;
use crate::error::{config_err, shape_err, DlspfError, Result};
use crate::optim::{adam_step_store, clip_grad_norm, lr_at, AdamState, LrSchedule};
use crate::rng::{rng_stream, stream_id, Purpose};
use crate::tensor::{Tape, Tensor, Var};

/// Multiquadratics kernel `C / (C + ‖a − b‖²)`.
pub fn kernel(a: &[f64], b: &[f64], c: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    c / (c + d)
}

fn kernel_matrix<'t>(a: Var<'t>, b: Var<'t>, c: f64) -> Result<Var<'t>> {
    a.pairwise_sq_dist(b)?.add_scalar(c)?.recip()?.scale(c)
}

/// Unbiased MMD² between the rows of `z` and `x` (both `[N, d]`):
/// off-diagonal within-set kernel means minus twice the cross-kernel mean.
pub fn mmd<'t>(z: Var<'t>, x: Var<'t>, c: f64) -> Result<Var<'t>> {
    let (zs, xs) = (z.shape(), x.shape());
    if zs.len() != 2 || zs != xs {
        return Err(shape_err!("mmd needs equal [N, d] sets, got {:?} and {:?}", zs, xs));
    }
    let n = zs[0];
    if n < 2 {
        return Err(config_err!("mmd needs at least 2 samples, got {n}"));
    }
    let nf = n as f64;
    // diagonal kernel entries are exactly 1
    let within = kernel_matrix(z, z, c)?.sum()?.add(kernel_matrix(x, x, c)?.sum()?)?.add_scalar(-2.0 * nf)?;
    let cross = kernel_matrix(z, x, c)?.sum()?;
    within.scale(1.0 / (nf * (nf - 1.0)))?.sub(cross.scale(2.0 / (nf * nf))?)
}

/// [`mmd`] on plain tensors.
pub fn mmd_value(z: &Tensor, x: &Tensor, c: f64) -> Result<f64> {
    let tape = Tape::inference();
    Ok(mmd(tape.constant(z.clone()), tape.constant(x.clone()), c)?.item())
}

/// Biased (V-statistic) MMD², which keeps the diagonal terms and is never negative.
pub fn mmd_biased(z: &Tensor, x: &Tensor, c: f64) -> Result<f64> {
    if z.ndim() != 2 || z.shape() != x.shape() || z.shape()[0] == 0 {
        return Err(shape_err!("mmd needs equal [N, d] sets, got {:?} and {:?}", z.shape(), x.shape()));
    }
    let n = z.shape()[0];
    let mean_k = |a: &Tensor, b: &Tensor| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += kernel(a.row(i), b.row(j), c);
            }
        }
        s / (n * n) as f64
    };
    Ok(mean_k(z, z) + mean_k(x, x) - 2.0 * mean_k(z, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaeLossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Kernel constant; `None` means `2 · latent_dim`.
    #[serde(default)]
    pub kernel_c: Option<f64>,
}

impl Default for WaeLossWeights {
    fn default() -> Self {
        WaeLossWeights { alpha: 1e-6, beta: 1e-2, lambda: 1e-2, kernel_c: None }
    }
}

impl WaeLossWeights {
    pub fn kernel_constant(&self, latent_dim: usize) -> f64 {
        self.kernel_c.unwrap_or(2.0 * latent_dim as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let c_ok = self.kernel_c.is_none_or(|c| c > 0.0);
        if self.alpha < 0.0 || self.beta < 0.0 || self.lambda < 0.0 || !c_ok {
            return Err(config_err!("loss weights must be non-negative and C positive: {:?}", self));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub recon: f64,
    pub reg: f64,
    pub mmd: f64,
    pub consistency: f64,
    pub total: f64,
}

/// Mean over batch and latent entries of `(z − enc(dec(z, m)))²`.
pub fn consistency_loss<'t>(
    ae: &Autoencoder,
    enc: &Ctx<'t>,
    dec: &Ctx<'t>,
    z: Var<'t>,
    m: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let q = ae.decoder.forward(dec, z, m)?;
    let back = ae.encoder.forward(enc, q)?;
    back.sub(z)?.square()?.mean()
}

/// One batch of the regularized loss.
///
/// `x: [B, C, N]` normalized states, `prior_z: [B, latent]` standard-normal
/// draws, `prior_m` parameters paired with the prior draws.
#[allow(clippy::too_many_arguments)]
pub fn wae_total_loss<'t>(
    ae: &Autoencoder,
    enc: &Ctx<'t>,
    dec: &Ctx<'t>,
    x: Var<'t>,
    m: Option<Var<'t>>,
    prior_z: Var<'t>,
    prior_m: Option<Var<'t>>,
    w: &WaeLossWeights,
) -> Result<(Var<'t>, LossComponents)> {
    let tape = enc.tape();
    let z = ae.encoder.forward(enc, x)?;
    let recon_x = ae.decoder.forward(dec, z, m)?;
    let recon = recon_x.sub(x)?.square()?.mean()?;
    let mut total = recon;
    let zero = || tape.constant(Tensor::scalar(0.0));
    let reg = if w.alpha > 0.0 { enc.l2()?.add(dec.l2()?)? } else { zero() };
    let div = if w.beta > 0.0 { mmd(z, prior_z, w.kernel_constant(ae.latent_dim()))? } else { zero() };
    let cons = if w.lambda > 0.0 { consistency_loss(ae, enc, dec, prior_z, prior_m)? } else { zero() };
    total = total.add(reg.scale(w.alpha)?)?.add(div.scale(w.beta)?)?.add(cons.scale(w.lambda)?)?;
    let comps = LossComponents {
        recon: recon.item(),
        reg: reg.item(),
        mmd: div.item(),
        consistency: cons.item(),
        total: total.item(),
    };
    Ok((total, comps))
}

/// Per-channel (or per-parameter) ranges of the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_min: Vec<f64>,
    pub state_max: Vec<f64>,
    #[serde(default)]
    pub param_min: Vec<f64>,
    #[serde(default)]
    pub param_max: Vec<f64>,
}

pub fn minmax_normalize(v: f64, min: f64, max: f64) -> f64 {
    if max > min {
        (v - min) / (max - min)
    } else {
        0.5
    }
}

pub fn minmax_denormalize(v: f64, min: f64, max: f64) -> f64 {
    if max > min {
        min + v * (max - min)
    } else {
        min
    }
}

impl NormStats {
    /// Ranges of `states: [.., C·N]` laid out channel-major and of `params: [.., N_m]`.
    pub fn fit(states: &[f64], channels: usize, length: usize, params: Option<(&[f64], usize)>) -> Result<Self> {
        let width = channels * length;
        if width == 0 || states.is_empty() || !states.len().is_multiple_of(width) {
            return Err(shape_err!("{} values do not tile states of width {width}", states.len()));
        }
        let mut state_min = vec![f64::INFINITY; channels];
        let mut state_max = vec![f64::NEG_INFINITY; channels];
        for row in states.chunks(width) {
            for c in 0..channels {
                for &v in &row[c * length..(c + 1) * length] {
                    state_min[c] = state_min[c].min(v);
                    state_max[c] = state_max[c].max(v);
                }
            }
        }
        let (mut param_min, mut param_max) = (Vec::new(), Vec::new());
        if let Some((p, d)) = params {
            if d > 0 {
                param_min = vec![f64::INFINITY; d];
                param_max = vec![f64::NEG_INFINITY; d];
                for row in p.chunks(d) {
                    for (j, &v) in row.iter().enumerate() {
                        param_min[j] = param_min[j].min(v);
                        param_max[j] = param_max[j].max(v);
                    }
                }
            }
        }
        Ok(NormStats { state_min, state_max, param_min, param_max })
    }

    pub fn channels(&self) -> usize {
        self.state_min.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.state_min.len() == self.state_max.len()
            && self.param_min.len() == self.param_max.len()
            && self.state_min.iter().zip(&self.state_max).all(|(a, b)| b >= a)
            && self.param_min.iter().zip(&self.param_max).all(|(a, b)| b >= a);
        if ok {
            Ok(())
        } else {
            Err(config_err!("normalization ranges need max >= min per channel"))
        }
    }

    fn map_states(&self, x: &mut [f64], f: fn(f64, f64, f64) -> f64) {
        let c = self.channels();
        let width = x.len() / c;
        for (i, v) in x.iter_mut().enumerate() {
            let ch = (i / width) % c;
            *v = f(*v, self.state_min[ch], self.state_max[ch]);
        }
    }

    /// Normalizes one state vector laid out `[C, N]` in place.
    pub fn normalize_state(&self, x: &mut [f64]) {
        self.map_states(x, minmax_normalize)
    }

    pub fn denormalize_state(&self, x: &mut [f64]) {
        self.map_states(x, minmax_denormalize)
    }

    pub fn normalize_params(&self, m: &mut [f64]) {
        for (j, v) in m.iter_mut().enumerate() {
            *v = minmax_normalize(*v, self.param_min[j], self.param_max[j]);
        }
    }

    pub fn denormalize_params(&self, m: &mut [f64]) {
        for (j, v) in m.iter_mut().enumerate() {
            *v = minmax_denormalize(*v, self.param_min[j], self.param_max[j]);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub weights: WaeLossWeights,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for WaeTrainConfig {
    fn default() -> Self {
        WaeTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            min_lr: 1e-5,
            warmup_steps: 100,
            weights: WaeLossWeights::default(),
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<LossComponents>,
    pub epochs: Vec<LossComponents>,
}

impl TrainHistory {
    /// Mean total loss over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> (f64, f64) {
        let n = self.steps.len();
        let w = window.min(n).max(1);
        let mean = |s: &[LossComponents]| s.iter().map(|c| c.total).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.steps[..w.min(n)]), mean(&self.steps[n.saturating_sub(w)..]))
    }
}

/// Draws `rows` standard-normal latents and, when the model takes parameters,
/// parameters uniform on the normalized training range `[0, 1]`.
pub fn prior_draws(seed: u64, step: u64, rows: usize, latent: usize, param_dim: usize) -> (Tensor, Option<Tensor>) {
    let mut rng = rng_stream(seed, stream_id(Purpose::Prior, step, 0));
    let z = Tensor::randn(&[rows, latent], 1.0, &mut rng);
    let m = (param_dim > 0).then(|| Tensor::uniform(&[rows, param_dim], 0.0, 1.0, &mut rng));
    (z, m)
}

fn gather(src: &Tensor, idx: &[usize]) -> Tensor {
    let w = src.len() / src.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&src.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(&[idx.len(), w], data).expect("rows have equal width")
}

fn divergence(e: DlspfError, step: usize) -> DlspfError {
    match e {
        DlspfError::NonFinite(msg) => DlspfError::Divergence(format!("step {step}: {msg}")),
        other => other,
    }
}

/// Trains `ae` on normalized states `[n, C·N]` and optional normalized parameters `[n, N_m]`.
pub fn train_autoencoder(
    ae: &mut Autoencoder,
    states: &Tensor,
    params: Option<&Tensor>,
    cfg: &WaeTrainConfig,
) -> Result<TrainHistory> {
    cfg.weights.validate()?;
    let ac = ae.cfg().clone();
    let n = states.shape()[0];
    if states.len() != n * ac.state_len() {
        return Err(shape_err!("states {:?} do not match state length {}", states.shape(), ac.state_len()));
    }
    if (ac.param_dim > 0) != params.is_some() {
        return Err(config_err!("parameter input must be given iff param_dim > 0"));
    }
    if cfg.batch_size < 2 || n < cfg.batch_size {
        return Err(config_err!("batch size {} must be in [2, {n}]", cfg.batch_size));
    }
    let per_epoch = n / cfg.batch_size;
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps.min(per_epoch * cfg.epochs),
        total_steps: per_epoch * cfg.epochs,
        min_lr: cfg.min_lr,
    };
    schedule.validate()?;
    let mut opt_enc = AdamState::for_store(&ae.encoder.store, cfg.lr);
    let mut opt_dec = AdamState::for_store(&ae.decoder.store, cfg.lr);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_stream(cfg.seed, stream_id(Purpose::Training, epoch as u64, 0)));
        let mut acc = LossComponents::default();
        for batch in order.chunks_exact(cfg.batch_size) {
            let lr = lr_at(&schedule, step);
            let b = batch.len();
            let x = gather(states, batch).reshape(&[b, ac.channels, ac.length])?;
            let m = params.map(|p| gather(p, batch));
            let (pz, pm) = prior_draws(cfg.seed, step as u64, b, ac.latent_dim, ac.param_dim);

            let tape = Tape::new();
            let enc = ae.encoder.store.bind(&tape);
            let dec = ae.decoder.store.bind(&tape);
            let (loss, comps) = wae_total_loss(
                ae,
                &enc,
                &dec,
                tape.constant(x),
                m.map(|m| tape.constant(m)),
                tape.constant(pz),
                pm.map(|m| tape.constant(m)),
                &cfg.weights,
            )
            .map_err(|e| divergence(e, step))?;
            if !comps.total.is_finite() {
                return Err(DlspfError::Divergence(format!("step {step}: loss {}", comps.total)));
            }
            let grads = tape.backward(loss).map_err(|e| divergence(e, step))?;
            let mut all: Vec<Tensor> = enc.vars().iter().chain(dec.vars()).map(|v| grads.get_or_zeros(*v)).collect();
            let gd = all.split_off(enc.vars().len());
            let mut ge = all;
            drop(enc);
            drop(dec);
            let mut gd = gd;
            if let Some(max) = cfg.clip_norm {
                let mut joint: Vec<Tensor> = ge.drain(..).chain(gd.drain(..)).collect();
                clip_grad_norm(&mut joint, max);
                gd = joint.split_off(ae.encoder.store.len());
                ge = joint;
            }
            opt_enc.lr = lr;
            opt_dec.lr = lr;
            adam_step_store(&mut ae.encoder.store, &ge, &mut opt_enc).map_err(|e| divergence(e, step))?;
            adam_step_store(&mut ae.decoder.store, &gd, &mut opt_dec).map_err(|e| divergence(e, step))?;

            history.steps.push(comps);
            acc.recon += comps.recon;
            acc.reg += comps.reg;
            acc.mmd += comps.mmd;
            acc.consistency += comps.consistency;
            acc.total += comps.total;
            step += 1;
        }
        let k = per_epoch as f64;
        history.epochs.push(LossComponents {
            recon: acc.recon / k,
            reg: acc.reg / k,
            mmd: acc.mmd / k,
            consistency: acc.consistency / k,
            total: acc.total / k,
        });
    }
    Ok(history)
}

/// Relative L2 reconstruction error `‖dec(enc(x)) − x‖ / ‖x‖` over a batch.
pub fn reconstruction_error(ae: &Autoencoder, states: &Tensor, params: Option<&Tensor>) -> Result<f64> {
    let z = ae.encoder.encode(states)?;
    let y = ae.decoder.decode(&z, params)?;
    let num: f64 = y.data().iter().zip(states.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((num / states.sq_norm()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AeConfig;
    use crate::rng::rng_stream;

    #[test]
    fn kernel_examples() {
        assert_eq!(kernel(&[0.3, 0.1], &[0.3, 0.1], 1.0), 1.0);
        assert_eq!(kernel(&[0.0], &[1.0], 1.0), 0.5);
    }

    #[test]
    fn mmd_worked_example() {
        let z = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let v = mmd_value(&z, &z, 1.0).unwrap();
        assert!((v - (-0.5)).abs() < 1e-15);
        assert!(mmd_value(&Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1]), 1.0).is_err());
    }

    #[test]
    fn biased_mmd_is_non_negative() {
        let mut rng = rng_stream(3, 0);
        let z = Tensor::randn(&[10, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[10, 3], 1.0, &mut rng);
        assert!(mmd_biased(&z, &x, 6.0).unwrap() >= 0.0);
        assert!(mmd_biased(&z, &z, 6.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(minmax_normalize(3.0, 2.0, 4.0), 0.5);
        assert_eq!(minmax_normalize(2.0, 2.0, 4.0), 0.0);
        assert_eq!(minmax_normalize(4.0, 2.0, 4.0), 1.0);
        assert_eq!(minmax_normalize(7.0, 1.0, 1.0), 0.5);
        assert_eq!(minmax_denormalize(0.5, 1.0, 1.0), 1.0);
        let stats = NormStats::fit(&[-1.0, 0.2, 1.5, 0.0], 1, 4, None).unwrap();
        let mut v = vec![0.3, -0.7, 1.1, 1.5];
        let orig = v.clone();
        stats.normalize_state(&mut v);
        stats.denormalize_state(&mut v);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_weights_give_pure_reconstruction() {
        let cfg = AeConfig::two_layer(1, 32, 4, 0);
        let ae = Autoencoder::new(&cfg, &mut rng_stream(5, 0)).unwrap();
        let x = Tensor::uniform(&[4, 1, 32], 0.0, 1.0, &mut rng_stream(6, 0));
        let (pz, _) = prior_draws(0, 0, 4, 4, 0);
        let w0 = WaeLossWeights { alpha: 0.0, beta: 0.0, lambda: 0.0, kernel_c: None };
        let tape = Tape::new();
        let enc = ae.encoder.store.bind(&tape);
        let dec = ae.decoder.store.bind(&tape);
        let (_, c) =
            wae_total_loss(&ae, &enc, &dec, tape.constant(x.clone()), None, tape.constant(pz.clone()), None, &w0)
                .unwrap();
        let err = reconstruction_error(&ae, &x.reshape(&[4, 32]).unwrap(), None).unwrap();
        assert_eq!(c.total, c.recon);
        assert!((c.recon - err * err * x.sq_norm() / 128.0).abs() < 1e-12);

        let w = WaeLossWeights { alpha: 0.3, beta: 0.7, lambda: 1.3, kernel_c: Some(2.0) };
        let (_, c) = wae_total_loss(&ae, &enc, &dec, tape.constant(x), None, tape.constant(pz), None, &w).unwrap();
        let sum = c.recon + 0.3 * c.reg + 0.7 * c.mmd + 1.3 * c.consistency;
        assert!((c.total - sum).abs() < 1e-12);
        assert!(c.recon >= 0.0 && c.reg >= 0.0 && c.consistency >= 0.0 && c.mmd >= -2.0);
    }
}
