//! Monte Carlo convergence and importance-ratio diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, DlspfError, Result};
use crate::rng::{rng_stream, stream_id, Purpose, StreamRng};

/// Least-squares slope and intercept of `ln e` against `ln n`.
pub fn fit_loglog_slope(ns: &[f64], errors: &[f64]) -> Result<(f64, f64)> {
    if ns.len() != errors.len() || ns.len() < 2 {
        return Err(config_err!("slope fit needs at least two matching points"));
    }
    if ns.iter().chain(errors).any(|v| !(*v > 0.0)) {
        return Err(config_err!("slope fit needs positive counts and errors"));
    }
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(config_err!("slope fit needs distinct particle counts"));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceFit {
    pub particle_counts: Vec<usize>,
    /// Root-mean-square error over seeds, per particle count.
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
}

/// Runs `estimator(n, seed)` for every count and seed, aggregates the errors
/// as a root mean square over seeds and fits the log-log slope.
pub fn mc_convergence_test(
    estimator: impl Fn(usize, u64) -> Result<f64>,
    particle_counts: &[usize],
    seeds: &[u64],
) -> Result<ConvergenceFit> {
    if seeds.is_empty() {
        return Err(config_err!("convergence test needs seeds"));
    }
    let mut errors = Vec::with_capacity(particle_counts.len());
    for &n in particle_counts {
        let mut sq = 0.0;
        for &s in seeds {
            sq += estimator(n, s)?.powi(2);
        }
        errors.push((sq / seeds.len() as f64).sqrt());
    }
    let ns: Vec<f64> = particle_counts.iter().map(|&n| n as f64).collect();
    let (slope, intercept) = fit_loglog_slope(&ns, &errors)?;
    Ok(ConvergenceFit { particle_counts: particle_counts.to_vec(), errors, slope, intercept })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRatioDiagnostic {
    pub ratio: f64,
    /// Largest likelihood over the prior samples.
    pub sup: f64,
    /// Monte Carlo mean of the likelihood under the prior.
    pub integral: f64,
    pub samples: usize,
}

/// `sup h / ∫ h f`, both estimated from `n_samples` prior draws.
pub fn estimate_importance_ratio(
    likelihood: impl Fn(&[f64]) -> f64,
    mut prior: impl FnMut(&mut StreamRng) -> Vec<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<ImportanceRatioDiagnostic> {
    if n_samples < 100 {
        return Err(config_err!("importance ratio needs at least 100 samples"));
    }
    let mut rng = rng_stream(seed, stream_id(Purpose::Misc, 0, 0));
    let (mut sup, mut sum) = (0.0f64, 0.0);
    for _ in 0..n_samples {
        let h = likelihood(&prior(&mut rng));
        sup = sup.max(h);
        sum += h;
    }
    let integral = sum / n_samples as f64;
    if !(integral > 0.0) {
        return Err(DlspfError::Numerical("likelihood integrates to zero under the prior".into()));
    }
    Ok(ImportanceRatioDiagnostic { ratio: sup / integral, sup, integral, samples: n_samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    #[test]
    fn exact_power_law_slope() {
        let ns = [100.0, 1000.0, 10000.0];
        let e: Vec<f64> = ns.iter().map(|n: &f64| n.powf(-0.5)).collect();
        let (s, _) = fit_loglog_slope(&ns, &e).unwrap();
        assert!((s + 0.5).abs() < 1e-12);
    }

    #[test]
    fn flat_likelihood_has_unit_ratio() {
        let d = estimate_importance_ratio(|_| 0.3, |r| vec![standard_normal(r)], 200, 1).unwrap();
        assert!((d.ratio - 1.0).abs() < 1e-12);
    }

    fn gauss(x: f64, y: f64, s: f64) -> f64 {
        (-(x - y).powi(2) / (2.0 * s * s)).exp()
    }

    #[test]
    fn narrower_likelihood_has_larger_ratio() {
        let wide = estimate_importance_ratio(|u| gauss(u[0], 0.5, 1.0), |r| vec![standard_normal(r)], 5000, 4).unwrap();
        let narrow = estimate_importance_ratio(|u| gauss(u[0], 0.5, 0.1), |r| vec![standard_normal(r)], 5000, 4).unwrap();
        assert!(narrow.ratio > wide.ratio);
    }

    #[test]
    fn matches_grid_quadrature() {
        let (y, s) = (0.3, 0.4);
        let d = estimate_importance_ratio(|u| gauss(u[0], y, s), |r| vec![standard_normal(r)], 20000, 9).unwrap();
        let n = 20001;
        let dx = 16.0 / (n - 1) as f64;
        let integral: f64 = (0..n)
            .map(|i| {
                let x = -8.0 + i as f64 * dx;
                gauss(x, y, s) * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt() * dx
            })
            .sum();
        let exact = 1.0 / integral;
        assert!((d.ratio - exact).abs() / exact < 0.1, "{} vs {exact}", d.ratio);
    }
}
