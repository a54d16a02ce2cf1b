//! Error, calibration and distribution metrics for filtered ensembles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, DlspfError, Result};
use crate::tensor::Tensor;

/// Standard deviations below this are floored in [`nll_gaussian`].
pub const NLL_STD_FLOOR: f64 = 1e-6;

/// Smallest ensemble for which moments are computed.
pub const MIN_MOMENT_ENSEMBLE: usize = 5;

/// An ensemble per time step: `data: [T, N, D]`, optional `weights: [T, N]`.
#[derive(Clone, Debug)]
pub struct EnsembleSeries {
    pub data: Tensor,
    pub weights: Option<Tensor>,
}

impl EnsembleSeries {
    pub fn new(data: Tensor, weights: Option<Tensor>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(shape_err!("ensemble series must be [T, N, D] with N > 0, got {:?}", s));
        }
        if let Some(w) = &weights {
            if w.shape() != [s[0], s[1]] {
                return Err(shape_err!("weights {:?} do not match ensemble {:?}", w.shape(), s));
            }
        }
        Ok(EnsembleSeries { data, weights })
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn members(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    /// Values of component `d` at time `t` across members.
    pub fn column(&self, t: usize, d: usize) -> Vec<f64> {
        let (n, dim) = (self.members(), self.dim());
        (0..n).map(|i| self.data.data()[(t * n + i) * dim + d]).collect()
    }

    /// Member weights at time `t` (uniform when none are stored).
    pub fn weights_at(&self, t: usize) -> Vec<f64> {
        let n = self.members();
        match &self.weights {
            Some(w) => w.data()[t * n..(t + 1) * n].to_vec(),
            None => vec![1.0 / n as f64; n],
        }
    }

    /// Weighted mean per time step: `[T, D]`.
    pub fn mean(&self) -> Tensor {
        let (t, d) = (self.steps(), self.dim());
        let mut out = Vec::with_capacity(t * d);
        for s in 0..t {
            let w = self.weights_at(s);
            for c in 0..d {
                out.push(weighted_mean(&self.column(s, c), &w));
            }
        }
        Tensor::new(&[t, d], out).expect("consistent shape")
    }

    /// Keeps components `indices` of every member.
    pub fn select(&self, indices: &[usize]) -> Result<EnsembleSeries> {
        let (t, n, d) = (self.steps(), self.members(), self.dim());
        if indices.iter().any(|&i| i >= d) {
            return Err(shape_err!("component index out of range for dimension {d}"));
        }
        let mut out = Vec::with_capacity(t * n * indices.len());
        for row in self.data.data().chunks(d) {
            out.extend(indices.iter().map(|&i| row[i]));
        }
        EnsembleSeries::new(Tensor::new(&[t, n, indices.len()], out)?, self.weights.clone())
    }
}

fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()
}

/// Scalar summaries of a state used as test functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestFunction {
    Mean,
    /// Raw moment of the given order over components.
    Moment(u32),
    Component(usize),
}

impl TestFunction {
    pub fn name(&self) -> String {
        match self {
            TestFunction::Mean => "mean".into(),
            TestFunction::Moment(k) => format!("moment{k}"),
            TestFunction::Component(i) => format!("component{i}"),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = x.len().max(1) as f64;
        match *self {
            TestFunction::Mean => x.iter().sum::<f64>() / n,
            TestFunction::Moment(k) => x.iter().map(|v| v.powi(k as i32)).sum::<f64>() / n,
            TestFunction::Component(i) => x[i],
        }
    }
}

fn check_same(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("series lengths {} and {} differ or are empty", a.len(), b.len()));
    }
    Ok(())
}

/// Root mean square of `estimate − truth` over all entries.
pub fn rmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_same(estimate, truth)?;
    Ok((estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64).sqrt())
}

/// `‖estimate − truth‖₂ / ‖truth‖₂`.
pub fn rrmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_same(estimate, truth)?;
    let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(DlspfError::Numerical("relative error against a zero truth".into()));
    }
    Ok(estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm)
}

/// RRMSE over every window of `window` consecutive rows of `[T, D]` series.
pub fn windowed_rrmse(estimate: &Tensor, truth: &Tensor, window: usize) -> Result<Vec<f64>> {
    if estimate.shape() != truth.shape() || truth.ndim() != 2 {
        return Err(shape_err!("windowed RRMSE needs equal [T, D] series"));
    }
    let (t, d) = (truth.shape()[0], truth.shape()[1]);
    if window == 0 || window > t {
        return Err(config_err!("window {window} must lie in [1, {t}]"));
    }
    (0..=t - window)
        .map(|s| {
            let r = s * d..(s + window) * d;
            rrmse(&estimate.data()[r.clone()], &truth.data()[r])
        })
        .collect()
}

/// Weighted central moments of orders 2, 3 and 4.
pub fn central_moments(x: &[f64], w: &[f64]) -> [f64; 3] {
    let mu = weighted_mean(x, w);
    let total: f64 = w.iter().sum();
    let mut m = [0.0; 3];
    for (v, wi) in x.iter().zip(w) {
        let d = v - mu;
        m[0] += wi * d * d;
        m[1] += wi * d * d * d;
        m[2] += wi * d * d * d * d;
    }
    m.map(|v| v / total)
}

/// Mean over orders 2–4 of the RMSE between the central moments of two
/// ensembles, taken over every time and component.
pub fn amrmse(a: &EnsembleSeries, b: &EnsembleSeries) -> Result<f64> {
    if a.steps() != b.steps() || a.dim() != b.dim() {
        return Err(shape_err!("ensembles disagree on time steps or dimension"));
    }
    if a.members() < MIN_MOMENT_ENSEMBLE || b.members() < MIN_MOMENT_ENSEMBLE {
        return Err(config_err!("moment comparison needs at least {MIN_MOMENT_ENSEMBLE} members"));
    }
    let mut sq = [0.0; 3];
    for t in 0..a.steps() {
        let (wa, wb) = (a.weights_at(t), b.weights_at(t));
        for d in 0..a.dim() {
            let ma = central_moments(&a.column(t, d), &wa);
            let mb = central_moments(&b.column(t, d), &wb);
            for k in 0..3 {
                sq[k] += (ma[k] - mb[k]).powi(2);
            }
        }
    }
    let count = (a.steps() * a.dim()) as f64;
    Ok(sq.iter().map(|s| (s / count).sqrt()).sum::<f64>() / 3.0)
}

/// Quantile `p ∈ [0, 1]`. Unweighted samples interpolate linearly between
/// order statistics; weighted samples use the inverse of the weighted CDF.
pub fn quantile(x: &[f64], weights: Option<&[f64]>, p: f64) -> f64 {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    match weights {
        None => {
            let h = p * (x.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(x.len() - 1);
            x[idx[lo]] + (h - lo as f64) * (x[idx[hi]] - x[idx[lo]])
        }
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            for &i in &idx {
                acc += w[i] / total;
                if acc >= p - 1e-12 {
                    return x[i];
                }
            }
            x[idx[idx.len() - 1]]
        }
    }
}

fn is_uniform(w: &[f64]) -> bool {
    w.iter().all(|v| (v - w[0]).abs() <= 1e-15)
}

/// Fraction of `(t, d)` points where `truth [T, D]` lies inside the
/// `[lo, hi]` percentile band of the ensemble.
pub fn picp(ens: &EnsembleSeries, truth: &Tensor, lo: f64, hi: f64) -> Result<f64> {
    if truth.shape() != [ens.steps(), ens.dim()] {
        return Err(shape_err!("truth {:?} does not match ensemble steps/dim", truth.shape()));
    }
    if !(0.0..=100.0).contains(&lo) || !(lo..=100.0).contains(&hi) {
        return Err(config_err!("percentile band [{lo}, {hi}] is invalid"));
    }
    let mut inside = 0usize;
    for t in 0..ens.steps() {
        let w = ens.weights_at(t);
        let wopt = (!is_uniform(&w)).then_some(w.as_slice());
        for d in 0..ens.dim() {
            let col = ens.column(t, d);
            let (a, b) = (quantile(&col, wopt, lo / 100.0), quantile(&col, wopt, hi / 100.0));
            let y = truth.data()[t * ens.dim() + d];
            if a <= y && y <= b {
                inside += 1;
            }
        }
    }
    Ok(inside as f64 / (ens.steps() * ens.dim()) as f64)
}

/// Negative log density of `reference [T, D]` under a per-component Gaussian
/// fit of the ensemble, summed over components and averaged over time.
pub fn nll_gaussian(ens: &EnsembleSeries, reference: &Tensor) -> Result<f64> {
    if reference.shape() != [ens.steps(), ens.dim()] {
        return Err(shape_err!("reference {:?} does not match ensemble steps/dim", reference.shape()));
    }
    if ens.members() < MIN_MOMENT_ENSEMBLE {
        return Err(config_err!("Gaussian fit needs at least {MIN_MOMENT_ENSEMBLE} members"));
    }
    let mut total = 0.0;
    for t in 0..ens.steps() {
        let w = ens.weights_at(t);
        for d in 0..ens.dim() {
            let col = ens.column(t, d);
            let mu = weighted_mean(&col, &w);
            let var = weighted_mean(&col.iter().map(|v| (v - mu).powi(2)).collect::<Vec<_>>(), &w);
            let var = var.max(NLL_STD_FLOOR * NLL_STD_FLOOR);
            let y = reference.data()[t * ens.dim() + d];
            total += 0.5 * (2.0 * std::f64::consts::PI * var).ln() + (y - mu).powi(2) / (2.0 * var);
        }
    }
    Ok(total / ens.steps() as f64)
}

/// [`nll_gaussian`] averaged over the members of a reference ensemble.
pub fn nll_against_ensemble(ens: &EnsembleSeries, reference: &EnsembleSeries) -> Result<f64> {
    if reference.steps() != ens.steps() || reference.dim() != ens.dim() {
        return Err(shape_err!("reference ensemble disagrees on steps or dimension"));
    }
    let (t, n, d) = (reference.steps(), reference.members(), reference.dim());
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for i in 0..n {
        let mut point = Vec::with_capacity(t * d);
        let mut wi = 0.0;
        for s in 0..t {
            point.extend_from_slice(&reference.data.data()[(s * n + i) * d..(s * n + i + 1) * d]);
            wi += reference.weights_at(s)[i];
        }
        let wi = wi / t as f64;
        acc += wi * nll_gaussian(ens, &Tensor::new(&[t, d], point)?)?;
        wsum += wi;
    }
    Ok(acc / wsum)
}

/// Wasserstein-1 distance between two empirical distributions on the line,
/// `∫₀¹ |F_a⁻¹(u) − F_b⁻¹(u)| du`.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(config_err!("Wasserstein distance needs non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next = ((i + 1) as f64 / na).min((j + 1) as f64 / nb);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if ((i + 1) as f64 / na) <= next + 1e-15 {
            i += 1;
        }
        if ((j + 1) as f64 / nb) <= next + 1e-15 {
            j += 1;
        }
    }
    Ok(total)
}

/// Weighted samples are resolved by their inverse CDF on a grid of `n` levels.
pub fn weighted_wasserstein1_1d(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64], n: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() || n == 0 {
        return Err(config_err!("Wasserstein distance needs non-empty samples"));
    }
    Ok((0..n)
        .map(|k| {
            let p = (k as f64 + 0.5) / n as f64;
            (quantile(a, Some(wa), p) - quantile(b, Some(wb), p)).abs()
        })
        .sum::<f64>()
        / n as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub rrmse: f64,
    /// Against a comparison ensemble, when one is given.
    pub amrmse: Option<f64>,
    pub nll: Option<f64>,
    pub picp: Option<f64>,
    /// Of the parameter posterior, when parameters are filtered.
    pub wasserstein1: Option<f64>,
    pub windowed_rrmse: Vec<f64>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let finite = [Some(self.rmse), Some(self.rrmse), self.amrmse, self.nll, self.picp, self.wasserstein1]
            .iter()
            .flatten()
            .chain(&self.windowed_rrmse)
            .all(|v| v.is_finite());
        if !finite {
            return Err(DlspfError::NonFinite("metric report holds non-finite values".into()));
        }
        if let Some(p) = self.picp {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("coverage {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// CSV with a `step` column followed by the named series.
pub fn series_csv(columns: &[(&str, &[f64])]) -> String {
    let mut out = String::from("step");
    for (name, _) in columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let rows = columns.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for r in 0..rows {
        let _ = write!(out, "{r}");
        for (_, c) in columns {
            out.push(',');
            if let Some(v) = c.get(r) {
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[2.0, 3.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rrmse(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein1_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1_1d(&[3.0, 1.0], &[1.0, 3.0]).unwrap(), 0.0);
        // {0} vs {0, 1}: half the mass moves by one
        assert!((wasserstein1_1d(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(wasserstein1_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn unequal_sizes_agree_with_replicated_samples() {
        let a = [0.3, -1.0, 2.5];
        let b = [0.0, 1.0];
        let a6: Vec<f64> = a.iter().flat_map(|v| [*v, *v]).collect();
        let b6: Vec<f64> = b.iter().flat_map(|v| [*v, *v, *v]).collect();
        let direct = wasserstein1_1d(&a, &b).unwrap();
        let equal = wasserstein1_1d(&a6, &b6).unwrap();
        assert!((direct - equal).abs() < 1e-12);
    }

    #[test]
    fn windowed_examples() {
        let truth = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let est = truth.map(|v| 1.1 * v);
        let w = windowed_rrmse(&est, &truth, 2).unwrap();
        assert!(w.iter().all(|v| (v - 0.1).abs() < 1e-12));
        let full = windowed_rrmse(&est, &truth, 4).unwrap();
        assert_eq!(full.len(), 1);
        assert!((full[0] - rrmse(est.data(), truth.data()).unwrap()).abs() < 1e-15);
        assert!(windowed_rrmse(&est, &truth, 5).is_err());
    }

    #[test]
    fn picp_examples() {
        let members: Vec<f64> = (0..41).map(|i| i as f64).collect();
        let ens = EnsembleSeries::new(Tensor::new(&[1, 41, 1], members).unwrap(), None).unwrap();
        assert_eq!(picp(&ens, &Tensor::new(&[1, 1], vec![20.0]).unwrap(), 2.5, 97.5).unwrap(), 1.0);
        assert_eq!(picp(&ens, &Tensor::new(&[1, 1], vec![100.0]).unwrap(), 2.5, 97.5).unwrap(), 0.0);
    }

    #[test]
    fn nll_at_mode() {
        let ens = EnsembleSeries::new(Tensor::new(&[1, 6, 1], vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]).unwrap(), None).unwrap();
        let v = nll_gaussian(&ens, &Tensor::new(&[1, 1], vec![0.0]).unwrap()).unwrap();
        assert!((v - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn series_csv_layout() {
        let csv = series_csv(&[("ess", &[3.0, 2.0]), ("rmse", &[0.5])]);
        assert_eq!(csv, "step,ess,rmse\n0,3,0.5\n1,2,\n");
    }
}
