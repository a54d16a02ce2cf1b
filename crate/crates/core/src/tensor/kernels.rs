use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Products smaller than this many multiply-adds use the plain loop kernel.
const SMALL_GEMM: usize = 8 * 1024;

/// Row-major `C (m×n) (+)= op(A) · op(B)`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`). With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };

    if m * k * n < SMALL_GEMM {
        if !accumulate {
            c.fill(0.0);
        }
        if !trans_a && !trans_b {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        } else {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        let av = a[(i as isize * rsa + p as isize * csa) as usize];
                        let bv = b[(p as isize * rsb + j as isize * csb) as usize];
                        s += av * bv;
                    }
                    c[i * n + j] += s;
                }
            }
        }
        return;
    }

    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe exactly the row-major buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err!("invalid permutation {:?} for shape {:?}", perm, shape));
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return Ok((out_shape, out));
    }
    // Odometer over the output index; the innermost axis is copied in a tight loop.
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    while out.len() < total {
        let mut o = offset;
        for _ in 0..inner {
            out.push(data[o]);
            o += inner_stride;
        }
        // advance axes nd-2 .. 0
        let mut ax = nd as isize - 2;
        while ax >= 0 {
            let a = ax as usize;
            idx[a] += 1;
            offset += strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            offset -= strides[a] * out_shape[a];
            idx[a] = 0;
            ax -= 1;
        }
    }
    Ok((out_shape, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Gelu,
    Relu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

/// Softmax over contiguous rows of length `n`. With `causal`, rows are grouped
/// into `n×n` blocks and row `i` of a block only sees columns `0..=i`.
pub(crate) fn softmax_rows(data: &[f64], n: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (r, (row, orow)) in data.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let visible = if causal { (r % n) + 1 } else { n };
        let max = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..visible {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in &mut orow[..visible] {
            *v /= sum;
        }
    }
    out
}

/// Standardizes contiguous rows of length `n`: `(x - mean) / sqrt(var + eps)`.
/// Returns the standardized values and the per-row `1/sqrt(var + eps)`.
pub(crate) fn normalize_rows(data: &[f64], n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = data.len() / n;
    let mut out = vec![0.0; data.len()];
    let mut inv = Vec::with_capacity(rows);
    for (row, orow) in data.chunks(n).zip(out.chunks_mut(n)) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let s = 1.0 / (var + eps).sqrt();
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        inv.push(s);
    }
    (out, inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_layouts_and_sizes() {
        for &(m, k, n) in &[(3, 4, 5), (40, 33, 31), (1, 64, 200)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 11) as f64) * 0.5).collect();
            let want = naive(m, k, n, &a, &b);
            let at = transpose(m, k, &a);
            let bt = transpose(k, n, &b);
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let aa = if ta { &at } else { &a };
                let bb = if tb { &bt } else { &b };
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-9, "{m}x{k}x{n} {ta} {tb}");
                }
                gemm(m, k, n, aa, ta, bb, tb, &mut c, true);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - 2.0 * y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (s, out) = permute_data(&shape, &data, &[2, 0, 1]).unwrap();
        assert_eq!(s, vec![4, 2, 3]);
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    assert_eq!(out[i * 6 + j * 3 + k], data[j * 12 + k * 4 + i]);
                }
            }
        }
        assert!(permute_data(&shape, &data, &[0, 0, 1]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&[0.0, 0.0, 0.0], 3, false);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&[0.0, 3f64.ln()], 2, false);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let causal = softmax_rows(&[1.0, 2.0, 3.0, 4.0], 2, true);
        assert_eq!(causal[0], 1.0);
        assert_eq!(causal[1], 0.0);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.5] {
            for act in [Activation::Gelu, Activation::Tanh, Activation::Identity] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8);
            }
        }
    }
}
