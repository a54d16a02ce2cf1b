//! Viscous Burgers equation `q_t = ν q_xx − q q_x` on `[0, L]` with zero
//! Dirichlet boundaries, central differences in space and RK4 in time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, DlspfError, Result};
use crate::rng::{rng_stream, stream_id, Purpose};
use crate::tensor::Tensor;

pub const BLOW_UP: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurgersConfig {
    pub length: f64,
    pub nx: usize,
    pub nu: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub q_lo: f64,
    pub q_hi: f64,
    pub sensors: Vec<f64>,
    pub obs_std: f64,
    pub obs_stride: usize,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        BurgersConfig {
            length: 2.0,
            nx: 128,
            nu: 1.0 / 150.0,
            dt: 0.001,
            n_steps: 300,
            q_lo: 0.5,
            q_hi: 1.5,
            sensors: vec![0.0, 0.286, 0.571, 0.857, 1.143, 1.429, 1.714, 2.0],
            obs_std: 0.1,
            obs_stride: 10,
        }
    }
}

impl BurgersConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 3 || !(self.dt > 0.0) || !(self.length > 0.0) || self.nu < 0.0 {
            return Err(config_err!("burgers needs nx >= 3, dt > 0, L > 0, nu >= 0"));
        }
        if self.q_lo > self.q_hi {
            return Err(config_err!("amplitude range [{}, {}] is empty", self.q_lo, self.q_hi));
        }
        if self.obs_stride == 0 || !(self.obs_std > 0.0) {
            return Err(config_err!("observation stride and noise std must be positive"));
        }
        for &x in &self.sensors {
            if !(0.0..=self.length).contains(&x) {
                return Err(config_err!("sensor at {x} outside [0, {}]", self.length));
            }
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.nx - 1) as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.nx).map(|i| i as f64 * self.dx()).collect()
    }

    /// Nearest grid node of every sensor.
    pub fn sensor_indices(&self) -> Vec<usize> {
        self.sensors.iter().map(|&x| ((x / self.dx()).round() as usize).min(self.nx - 1)).collect()
    }

    pub fn initial_condition(&self, amplitude: f64) -> Vec<f64> {
        let mut q: Vec<f64> =
            self.grid().iter().map(|&x| amplitude * (2.0 * std::f64::consts::PI * x / self.length).sin()).collect();
        q[0] = 0.0;
        q[self.nx - 1] = 0.0;
        q
    }

    /// Observation times (solver step indices), starting after the initial state.
    pub fn observation_steps(&self) -> Vec<usize> {
        (self.obs_stride..=self.n_steps).step_by(self.obs_stride).collect()
    }
}

/// `ν q_xx` at interior nodes.
pub fn diffusion(q: &[f64], dx: f64, nu: f64, out: &mut [f64]) {
    let n = q.len();
    let c = nu / (dx * dx);
    out[0] = 0.0;
    out[n - 1] = 0.0;
    for i in 1..n - 1 {
        out[i] = c * (q[i + 1] - 2.0 * q[i] + q[i - 1]);
    }
}

/// `q q_x` in the skew-symmetric split `(q q_x + (q²)_x) / 3` at interior nodes.
pub fn advection(q: &[f64], dx: f64, out: &mut [f64]) {
    let n = q.len();
    let c = 1.0 / (6.0 * dx);
    out[0] = 0.0;
    out[n - 1] = 0.0;
    for i in 1..n - 1 {
        let (l, m, r) = (q[i - 1], q[i], q[i + 1]);
        out[i] = c * (m * (r - l) + (r * r - l * l));
    }
}

/// `dq/dt = ν q_xx − q q_x`, zero at the boundary nodes.
pub fn burgers_rhs(q: &[f64], dx: f64, nu: f64, out: &mut [f64]) {
    let n = q.len();
    let cd = nu / (dx * dx);
    let ca = 1.0 / (6.0 * dx);
    out[0] = 0.0;
    out[n - 1] = 0.0;
    for i in 1..n - 1 {
        let (l, m, r) = (q[i - 1], q[i], q[i + 1]);
        out[i] = cd * (r - 2.0 * m + l) - ca * (m * (r - l) + (r * r - l * l));
    }
}

/// Scratch buffers for allocation-free RK4 steps.
#[derive(Clone, Debug)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Rk4 { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }

    /// Classical fourth-order Runge-Kutta step in place.
    pub fn step(&mut self, q: &mut [f64], dt: f64, rhs: impl Fn(&[f64], &mut [f64])) {
        let n = q.len();
        rhs(q, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = q[i] + 0.5 * dt * self.k1[i];
        }
        rhs(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = q[i] + 0.5 * dt * self.k2[i];
        }
        rhs(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = q[i] + dt * self.k3[i];
        }
        rhs(&self.tmp, &mut self.k4);
        for i in 0..n {
            q[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// One RK4 step of `dq/dt = rhs(q)`.
pub fn rk_step(q: &[f64], dt: f64, rhs: impl Fn(&[f64], &mut [f64])) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(config_err!("dt must be positive"));
    }
    let mut out = q.to_vec();
    Rk4::new(q.len()).step(&mut out, dt, rhs);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(DlspfError::NonFinite("rk step produced a non-finite state".into()))
    }
}

/// Advances `q` by `steps` Burgers steps in place.
pub fn advance(cfg: &BurgersConfig, q: &mut [f64], steps: usize, ws: &mut Rk4) -> Result<()> {
    let (dx, nu) = (cfg.dx(), cfg.nu);
    for _ in 0..steps {
        ws.step(q, cfg.dt, |x, out| burgers_rhs(x, dx, nu, out));
    }
    check_state(q)
}

pub fn check_state(q: &[f64]) -> Result<()> {
    let max = q.iter().fold(0.0f64, |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) });
    if max.is_nan() || max > BLOW_UP {
        return Err(DlspfError::Numerical(format!("burgers state blew up (max |q| = {max})")));
    }
    Ok(())
}

/// Trajectory `[n_steps + 1, nx]` from an arbitrary initial state.
pub fn simulate_from(cfg: &BurgersConfig, q0: &[f64]) -> Result<Tensor> {
    cfg.validate()?;
    let mut q = q0.to_vec();
    let mut out = Vec::with_capacity((cfg.n_steps + 1) * cfg.nx);
    out.extend_from_slice(&q);
    let mut ws = Rk4::new(cfg.nx);
    for _ in 0..cfg.n_steps {
        advance(cfg, &mut q, 1, &mut ws)?;
        out.extend_from_slice(&q);
    }
    Tensor::new(&[cfg.n_steps + 1, cfg.nx], out)
}

/// Trajectory from `q(x, 0) = Q sin(2πx/L)`.
pub fn simulate_burgers(cfg: &BurgersConfig, amplitude: f64) -> Result<Tensor> {
    simulate_from(cfg, &cfg.initial_condition(amplitude))
}

/// Discrete energy `Σ q² dx`.
pub fn energy(q: &[f64], dx: f64) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>() * dx
}

#[derive(Clone, Debug)]
pub struct BurgersDataset {
    /// `[n, n_steps + 1, nx]`
    pub states: Tensor,
    pub amplitudes: Vec<f64>,
}

/// Amplitude of trajectory `index` within split `split`.
pub fn draw_amplitude(cfg: &BurgersConfig, seed: u64, split: u64, index: u64) -> f64 {
    let mut rng = rng_stream(seed, stream_id(Purpose::Dataset, split, index));
    cfg.q_lo + (cfg.q_hi - cfg.q_lo) * crate::rng::uniform(&mut rng)
}

/// `n` trajectories with i.i.d. uniform amplitudes; `split` separates train and test draws.
pub fn generate_dataset(cfg: &BurgersConfig, n: usize, seed: u64, split: u64) -> Result<BurgersDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(config_err!("dataset needs at least one trajectory"));
    }
    let amplitudes: Vec<f64> = (0..n).map(|i| draw_amplitude(cfg, seed, split, i as u64)).collect();
    let trajs = amplitudes
        .par_iter()
        .map(|&a| simulate_burgers(cfg, a).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    Ok(BurgersDataset { states: Tensor::new(&[n, cfg.n_steps + 1, cfg.nx], trajs.concat())?, amplitudes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rhs_examples() {
        let mut out = vec![0.0; 5];
        burgers_rhs(&[0.0; 5], 0.1, 0.01, &mut out);
        assert!(out.iter().all(|v| *v == 0.0));
        let mut out = vec![0.0; 3];
        burgers_rhs(&[0.0, 1.0, 0.0], 1.0, 1.0 / 150.0, &mut out);
        assert!((out[1] + 2.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn rhs_splits_into_odd_and_even_terms() {
        let q: Vec<f64> = (0..9).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let neg: Vec<f64> = q.iter().map(|v| -v).collect();
        let (dx, nu) = (0.2, 0.05);
        let (mut d, mut a, mut r, mut rn) = (vec![0.0; 9], vec![0.0; 9], vec![0.0; 9], vec![0.0; 9]);
        diffusion(&q, dx, nu, &mut d);
        advection(&q, dx, &mut a);
        burgers_rhs(&q, dx, nu, &mut r);
        burgers_rhs(&neg, dx, nu, &mut rn);
        for i in 0..9 {
            assert!((r[i] - (d[i] - a[i])).abs() < 1e-12);
            assert!((rn[i] - (-d[i] - a[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn rk4_examples() {
        let q = rk_step(&[1.0, -2.0], 0.01, |_, out| out.fill(0.0)).unwrap();
        assert_eq!(q, vec![1.0, -2.0]);
        let dt: f64 = 0.001;
        let q = rk_step(&[1.0], dt, |x, out| out[0] = -x[0]).unwrap();
        let exact = 1.0 - dt + dt * dt / 2.0 - dt.powi(3) / 6.0 + dt.powi(4) / 24.0;
        assert!((q[0] - exact).abs() < 1e-15);
        assert!((q[0] - 0.9990005).abs() < 1e-7);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |dt: f64| (rk_step(&[1.0], dt, |x, out| out[0] = -x[0]).unwrap()[0] - (-dt).exp()).abs();
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 32.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn initial_condition_and_shape() {
        let cfg = BurgersConfig { n_steps: 20, nx: 129, ..Default::default() };
        let q0 = cfg.initial_condition(1.3);
        assert!(q0[64].abs() < 1e-12);
        assert!((q0[32] - 1.3).abs() < 1e-12);
        let t = simulate_burgers(&cfg, 1.3).unwrap();
        assert_eq!(t.shape(), &[21, 129]);
        assert_eq!(simulate_burgers(&BurgersConfig::default(), 1.0).unwrap().shape(), &[301, 128]);
    }

    #[test]
    fn energy_does_not_grow() {
        let cfg = BurgersConfig::default();
        for a in [0.5, 1.0, 1.5] {
            let t = simulate_burgers(&cfg, a).unwrap();
            let mut prev = f64::INFINITY;
            for row in t.data().chunks(cfg.nx) {
                let e = energy(row, cfg.dx());
                assert!(e <= prev + 1e-12);
                prev = e;
            }
        }
    }

    #[test]
    fn sensors_map_to_nodes() {
        let cfg = BurgersConfig::default();
        let idx = cfg.sensor_indices();
        assert_eq!(idx.len(), 8);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[7], 127);
        for (i, &x) in idx.iter().zip(&cfg.sensors) {
            assert!((*i as f64 * cfg.dx() - x).abs() <= cfg.dx() / 2.0);
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let cfg = BurgersConfig { n_steps: 10, ..Default::default() };
        let a = generate_dataset(&cfg, 3, 9, 0).unwrap();
        let b = generate_dataset(&cfg, 3, 9, 0).unwrap();
        assert_eq!(a.states, b.states);
        for (i, &amp) in a.amplitudes.iter().enumerate() {
            assert!((0.5..=1.5).contains(&amp));
            let row = &a.states.data()[i * 11 * 128..i * 11 * 128 + 128];
            let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max <= amp + 1e-12 && max > 0.5 * 0.99);
        }
    }
}
