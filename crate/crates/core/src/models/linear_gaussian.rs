//! Linear-Gaussian state-space model `x_n = A x_{n-1} + w`, `y_n = H x_n + v`
//! and its exact Kalman filter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{shape_err, DlspfError, Result};
use crate::rng::{fill_standard_normal, rng_stream, stream_id, Purpose};

#[derive(Clone, Debug)]
pub struct LinearGaussianSsm {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl LinearGaussianSsm {
    pub fn scalar(a: f64, q: f64, r: f64, m0: f64, p0: f64) -> Self {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        LinearGaussianSsm { a: s(a), h: s(1.0), q: s(q), r: s(r), m0: DVector::from_element(1, m0), p0: s(p0) }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim();
        let o = self.obs_dim();
        let sq = |m: &DMatrix<f64>, n: usize| m.nrows() == n && m.ncols() == n;
        if !sq(&self.a, d) || self.h.ncols() != d || !sq(&self.q, d) || !sq(&self.r, o) || !sq(&self.p0, d) || self.m0.len() != d
        {
            return Err(shape_err!("inconsistent linear-Gaussian model dimensions"));
        }
        for (name, m) in [("Q", &self.q), ("R", &self.r), ("P0", &self.p0)] {
            if (m - m.transpose()).abs().max() > 1e-12 {
                return Err(DlspfError::Config(format!("{name} is not symmetric")));
            }
            if m.clone().symmetric_eigenvalues().iter().any(|&e| e < -1e-12) {
                return Err(DlspfError::Config(format!("{name} is not positive semi-definite")));
            }
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
        let n = cov.nrows();
        let mut e = vec![0.0; n];
        fill_standard_normal(rng, &mut e);
        // eigen-decomposition handles singular covariances
        let eig = cov.clone().symmetric_eigen();
        let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        &eig.eigenvectors * scale * DVector::from_vec(e)
    }

    /// Draws a state path `x_0..x_n` and observations `y_1..y_n`.
    pub fn simulate(&self, steps: usize, seed: u64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut rng = rng_stream(seed, stream_id(Purpose::Observation, 0, 0));
        let mut x = &self.m0 + Self::draw(&self.p0, &mut rng);
        let mut xs = vec![x.clone()];
        let mut ys = Vec::with_capacity(steps);
        for _ in 0..steps {
            x = &self.a * &x + Self::draw(&self.q, &mut rng);
            ys.push(&self.h * &x + Self::draw(&self.r, &mut rng));
            xs.push(x.clone());
        }
        (xs, ys)
    }
}

#[derive(Clone, Debug)]
pub struct KalmanOutput {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

/// Filtering posteriors `p(x_n | y_1..y_n)` for `n = 1..`.
pub fn kalman_filter(ssm: &LinearGaussianSsm, observations: &[DVector<f64>]) -> Result<KalmanOutput> {
    ssm.validate()?;
    let mut m = ssm.m0.clone();
    let mut p = ssm.p0.clone();
    let mut out = KalmanOutput { means: Vec::new(), covs: Vec::new() };
    for (n, y) in observations.iter().enumerate() {
        if y.len() != ssm.obs_dim() {
            return Err(shape_err!("observation {n} has length {}, expected {}", y.len(), ssm.obs_dim()));
        }
        m = &ssm.a * &m;
        p = &ssm.a * &p * ssm.a.transpose() + &ssm.q;
        let s = &ssm.h * &p * ssm.h.transpose() + &ssm.r;
        let s_inv = s
            .clone()
            .try_inverse()
            .filter(|_| s.determinant().abs() > 1e-300)
            .ok_or_else(|| DlspfError::Numerical(format!("singular innovation covariance at step {}", n + 1)))?;
        let k = &p * ssm.h.transpose() * s_inv;
        m = &m + &k * (y - &ssm.h * &m);
        let i = DMatrix::identity(ssm.state_dim(), ssm.state_dim());
        p = (&i - &k * &ssm.h) * &p;
        p = (&p + p.transpose()) * 0.5;
        out.means.push(m.clone());
        out.covs.push(p.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_identity_observation_recovers_the_observation() {
        let ssm = LinearGaussianSsm {
            a: DMatrix::identity(2, 2) * 0.5,
            h: DMatrix::identity(2, 2),
            q: DMatrix::zeros(2, 2),
            r: DMatrix::zeros(2, 2),
            m0: DVector::zeros(2),
            p0: DMatrix::identity(2, 2),
        };
        let y = DVector::from_vec(vec![0.3, -1.2]);
        let out = kalman_filter(&ssm, std::slice::from_ref(&y)).unwrap();
        assert!((&out.means[0] - &y).norm() < 1e-12);
        // all uncertainty is gone, so a second update has a singular innovation
        assert!(kalman_filter(&ssm, &[y.clone(), y]).is_err());
    }

    #[test]
    fn static_state_variance_shrinks() {
        let ssm = LinearGaussianSsm::scalar(1.0, 0.0, 0.25, 0.0, 1.0);
        let ys: Vec<_> = (0..10).map(|i| DVector::from_element(1, 0.1 * i as f64)).collect();
        let out = kalman_filter(&ssm, &ys).unwrap();
        let mut prev = 1.0;
        for p in &out.covs {
            assert!(p[(0, 0)] < prev);
            prev = p[(0, 0)];
        }
    }

    /// Posterior on a dense grid by direct numerical integration.
    #[test]
    fn matches_grid_filter() {
        let (a, q, r) = (0.9, 0.1f64.powi(2), 0.5f64.powi(2));
        let ssm = LinearGaussianSsm::scalar(a, q, r, 0.0, 1.0);
        let (_, ys) = ssm.simulate(20, 4);
        let kf = kalman_filter(&ssm, &ys).unwrap();

        let n = 4001;
        let (lo, hi) = (-6.0, 6.0);
        let dx = (hi - lo) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
        let gauss = |x: f64, v: f64| (-0.5 * x * x / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let mut dens: Vec<f64> = xs.iter().map(|&x| gauss(x, 1.0)).collect();
        for (t, y) in ys.iter().enumerate() {
            let pred: Vec<f64> = xs
                .iter()
                .map(|&x| xs.iter().zip(&dens).map(|(&x0, d)| d * gauss(x - a * x0, q)).sum::<f64>() * dx)
                .collect();
            let post: Vec<f64> = xs.iter().zip(&pred).map(|(&x, p)| p * gauss(y[0] - x, r)).collect();
            let z: f64 = post.iter().sum::<f64>() * dx;
            dens = post.iter().map(|p| p / z).collect();
            let mean: f64 = xs.iter().zip(&dens).map(|(x, d)| x * d).sum::<f64>() * dx;
            let var: f64 = xs.iter().zip(&dens).map(|(x, d)| (x - mean).powi(2) * d).sum::<f64>() * dx;
            assert!((mean - kf.means[t][0]).abs() < 1e-6, "step {t}");
            assert!((var - kf.covs[t][(0, 0)]).abs() < 1e-6, "step {t}");
        }
    }
}
