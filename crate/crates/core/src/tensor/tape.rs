use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::kernels::{gemm, normalize_rows, permute_data, softmax_rows, Activation};
use super::Tensor;
use crate::error::{shape_err, DlspfError, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// rhs shape is a suffix of lhs shape and is broadcast over the leading axes
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Recip(usize),
    Act(usize, Activation),
    /// `x[.., k] · w[k, n]`
    MatMul(usize, usize),
    /// `a[B.., m, k] · b[B.., k, n]` or `a · bᵀ` with `b[B.., n, k]`
    Bmm { a: usize, b: usize, trans_b: bool },
    Softmax { x: usize },
    Normalize { x: usize, inv_std: Vec<f64> },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Slice { x: usize, axis: usize, start: usize, len: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Sum(usize),
    /// `D[i, j] = ‖a_i − b_j‖²` for `a[n, d]`, `b[m, d]`
    PairwiseSqDist(usize, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; node ids are therefore a
/// topological order and the backward sweep simply walks them in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.borrow().len()).finish()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape when it did not influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that never tracks gradients (forward evaluation only).
    pub fn inference() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.push(Arc::new(t), Op::Leaf, self.grad_enabled)
    }

    pub fn param(&self, t: Arc<Tensor>) -> Var<'_> {
        self.push(t, Op::Leaf, self.grad_enabled)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(Arc::new(t), Op::Leaf, false)
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(DlspfError::NonFinite(format!("{} produced non-finite output", op_name(&op))));
        }
        let rg = inputs.iter().any(|&i| self.rg(i));
        Ok(self.push(Arc::new(value), op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", nodes[loss.id].value.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            let val = |i: usize| nodes[i].value.clone();
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g.reshape(y.shape())?);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.data(), 1.0);
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.data(), 1.0);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.data(), 1.0);
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.data(), -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        let ga: Vec<f64> = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                        accumulate(&mut grads, *a, &ga, 1.0);
                    }
                    if needs(*b) {
                        let gb: Vec<f64> = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                        accumulate(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::AddBcast(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.data(), 1.0);
                    }
                    if needs(*b) {
                        let n = val(*b).len();
                        let mut gb = vec![0.0; n];
                        for chunk in g.data().chunks(n) {
                            for (o, v) in gb.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::MulBcast(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let n = bv.len();
                    if needs(*a) {
                        let ga: Vec<f64> = g
                            .data()
                            .chunks(n)
                            .flat_map(|c| c.iter().zip(bv.data()).map(|(g, b)| g * b))
                            .collect();
                        accumulate(&mut grads, *a, &ga, 1.0);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; n];
                        for (gc, ac) in g.data().chunks(n).zip(av.data().chunks(n)) {
                            for ((o, g), a) in gb.iter_mut().zip(gc).zip(ac) {
                                *o += g * a;
                            }
                        }
                        accumulate(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::Scale(a, c) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.data(), *c);
                    }
                }
                Op::AddScalar(a) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, g.data(), 1.0);
                    }
                }
                Op::Square(a) => {
                    let av = val(*a);
                    let ga: Vec<f64> = g.data().iter().zip(av.data()).map(|(g, a)| 2.0 * a * g).collect();
                    accumulate(&mut grads, *a, &ga, 1.0);
                }
                Op::Recip(a) => {
                    let ga: Vec<f64> = g.data().iter().zip(y.data()).map(|(g, y)| -g * y * y).collect();
                    accumulate(&mut grads, *a, &ga, 1.0);
                }
                Op::Act(a, act) => {
                    let av = val(*a);
                    let ga: Vec<f64> =
                        g.data().iter().zip(av.data()).map(|(g, x)| g * act.derivative(*x)).collect();
                    accumulate(&mut grads, *a, &ga, 1.0);
                }
                Op::MatMul(x, w) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (k, n) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.len() / k;
                    if needs(*x) {
                        let mut gx = vec![0.0; rows * k];
                        gemm(rows, n, k, g.data(), false, wv.data(), true, &mut gx, false);
                        accumulate(&mut grads, *x, &gx, 1.0);
                    }
                    if needs(*w) {
                        let mut gw = vec![0.0; k * n];
                        gemm(k, rows, n, xv.data(), true, g.data(), false, &mut gw, false);
                        accumulate(&mut grads, *w, &gw, 1.0);
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let nd = av.ndim();
                    let (m, k) = (av.shape()[nd - 2], av.shape()[nd - 1]);
                    let n = if *trans_b { bv.shape()[nd - 2] } else { bv.shape()[nd - 1] };
                    let batch = av.len() / (m * k);
                    if needs(*a) {
                        let mut ga = vec![0.0; av.len()];
                        for bi in 0..batch {
                            let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                            let bs = &bv.data()[bi * k * n..(bi + 1) * k * n];
                            // a · b  => ga = g · bᵀ ; a · bᵀ => ga = g · b
                            gemm(m, n, k, gs, false, bs, !*trans_b, &mut ga[bi * m * k..(bi + 1) * m * k], false);
                        }
                        accumulate(&mut grads, *a, &ga, 1.0);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; bv.len()];
                        for bi in 0..batch {
                            let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                            let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                            let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                            if *trans_b {
                                // gb (n×k) = gᵀ · a
                                gemm(n, m, k, gs, true, as_, false, out, false);
                            } else {
                                // gb (k×n) = aᵀ · g
                                gemm(k, m, n, as_, true, gs, false, out, false);
                            }
                        }
                        accumulate(&mut grads, *b, &gb, 1.0);
                    }
                }
                Op::Softmax { x, .. } => {
                    let n = *y.shape().last().unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for ((gr, yr), o) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((o, g), y) in o.iter_mut().zip(gr).zip(yr) {
                            *o = y * (g - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &gx, 1.0);
                }
                Op::Normalize { x, inv_std } => {
                    let n = *y.shape().last().unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for (((gr, yr), o), s) in
                        g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)).zip(inv_std)
                    {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for ((o, g), y) in o.iter_mut().zip(gr).zip(yr) {
                            *o = s * (g - mg - y * mgy);
                        }
                    }
                    accumulate(&mut grads, *x, &gx, 1.0);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g.data(), 1.0),
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, ga) = permute_data(y.shape(), g.data(), &inv)?;
                    accumulate(&mut grads, *a, &ga, 1.0);
                }
                Op::Slice { x, axis, start, len } => {
                    let xv = val(*x);
                    let (outer, full, inner) = split_axis(xv.shape(), *axis);
                    let mut gx = vec![0.0; xv.len()];
                    for o in 0..outer {
                        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                        let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                        dst.copy_from_slice(src);
                    }
                    accumulate(&mut grads, *x, &gx, 1.0);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(y.shape(), *axis);
                    let mut offset = 0;
                    for &i in inputs {
                        let len = val(i).shape()[*axis];
                        if needs(i) {
                            let mut gi = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                gi.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            accumulate(&mut grads, i, &gi, 1.0);
                        }
                        offset += len;
                    }
                }
                Op::Sum(a) => {
                    let n = val(*a).len();
                    let ga = vec![g.data()[0]; n];
                    accumulate(&mut grads, *a, &ga, 1.0);
                }
                Op::PairwiseSqDist(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, d) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[0];
                    let mut ga = vec![0.0; n * d];
                    let mut gb = vec![0.0; m * d];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * g.data()[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                let diff = av.data()[i * d + c] - bv.data()[j * d + c];
                                ga[i * d + c] += gij * diff;
                                gb[j * d + c] -= gij * diff;
                            }
                        }
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, &ga, 1.0);
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, &gb, 1.0);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: &[f64], scale: f64) {
    match &mut grads[id] {
        Some(t) => {
            for (o, v) in t.data_mut().iter_mut().zip(g) {
                *o += scale * v;
            }
        }
        slot @ None => {
            let data = if scale == 1.0 { g.to_vec() } else { g.iter().map(|v| scale * v).collect() };
            *slot = Some(Tensor::from_vec(data));
        }
    }
}

/// `(outer, extent, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) | Op::AddBcast(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) | Op::MulBcast(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Square(..) => "square",
        Op::Recip(..) => "recip",
        Op::Act(..) => "activation",
        Op::MatMul(..) => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Softmax { .. } => "softmax",
        Op::Normalize { .. } => "normalize",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::Slice { .. } => "slice",
        Op::Concat { .. } => "concat",
        Op::Sum(..) => "sum",
        Op::PairwiseSqDist(..) => "pairwise_sq_dist",
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// Elementwise sum; `other` may also be a suffix-shaped tensor broadcast
    /// over the leading axes (bias, positional encodings).
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() == b.shape() {
            let out = a.zip_map(&b, |x, y| x + y)?;
            self.tape.emit(out, Op::Add(self.id, other.id), &[self.id, other.id])
        } else if is_suffix(b.shape(), a.shape()) {
            let n = b.len();
            let data = a.data().chunks(n).flat_map(|c| c.iter().zip(b.data()).map(|(x, y)| x + y)).collect();
            let out = Tensor::new(a.shape(), data)?;
            self.tape.emit(out, Op::AddBcast(self.id, other.id), &[self.id, other.id])
        } else {
            Err(shape_err!("add {:?} + {:?}", a.shape(), b.shape()))
        }
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = self.value().zip_map(&other.value(), |x, y| x - y)?;
        self.tape.emit(out, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    /// Elementwise product with the same broadcasting rule as [`Var::add`].
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() == b.shape() {
            let out = a.zip_map(&b, |x, y| x * y)?;
            self.tape.emit(out, Op::Mul(self.id, other.id), &[self.id, other.id])
        } else if is_suffix(b.shape(), a.shape()) {
            let n = b.len();
            let data = a.data().chunks(n).flat_map(|c| c.iter().zip(b.data()).map(|(x, y)| x * y)).collect();
            let out = Tensor::new(a.shape(), data)?;
            self.tape.emit(out, Op::MulBcast(self.id, other.id), &[self.id, other.id])
        } else {
            Err(shape_err!("mul {:?} * {:?}", a.shape(), b.shape()))
        }
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| c * x);
        self.tape.emit(out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x + c);
        self.tape.emit(out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn square(&self) -> Result<Var<'t>> {
        let out = self.value().map(|x| x * x);
        self.tape.emit(out, Op::Square(self.id), &[self.id])
    }

    pub fn recip(&self) -> Result<Var<'t>> {
        let out = self.value().map(|x| 1.0 / x);
        self.tape.emit(out, Op::Recip(self.id), &[self.id])
    }

    pub fn activation(&self, act: Activation) -> Result<Var<'t>> {
        if act == Activation::Identity {
            return Ok(*self);
        }
        let out = self.value().map(|x| act.apply(x));
        self.tape.emit(out, Op::Act(self.id, act), &[self.id])
    }

    /// `self[.., k] · w[k, n] -> [.., n]`
    pub fn matmul(&self, w: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w);
        let (x, wv) = (self.value(), w.value());
        let xs = x.shape();
        if wv.ndim() != 2 || xs.is_empty() || *xs.last().unwrap() != wv.shape()[0] {
            return Err(shape_err!("matmul {:?} x {:?}", xs, wv.shape()));
        }
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        let rows = x.len() / k;
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, x.data(), false, wv.data(), false, &mut out, false);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        self.tape.emit(Tensor::new(&shape, out)?, Op::MatMul(self.id, w.id), &[self.id, w.id])
    }

    /// Batched product over matching leading axes; `trans_b` multiplies by `bᵀ`.
    pub fn bmm(&self, b: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&b);
        let (av, bv) = (self.value(), b.value());
        let (sa, sb) = (av.shape(), bv.shape());
        let nd = sa.len();
        if nd < 2 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] {
            return Err(shape_err!("bmm {:?} x {:?}", sa, sb));
        }
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if trans_b { (sb[nd - 1], sb[nd - 2]) } else { (sb[nd - 2], sb[nd - 1]) };
        if k != kb {
            return Err(shape_err!("bmm inner extents {:?} x {:?}", sa, sb));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[bi * m * k..(bi + 1) * m * k],
                false,
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let mut shape = sa.to_vec();
        shape[nd - 1] = n;
        self.tape
            .emit(Tensor::new(&shape, out)?, Op::Bmm { a: self.id, b: b.id, trans_b }, &[self.id, b.id])
    }

    /// Softmax over the last axis. `causal` requires square trailing blocks.
    pub fn softmax(&self, causal: bool) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let n = *s.last().ok_or_else(|| shape_err!("softmax of a 0-d tensor"))?;
        if causal && (s.len() < 2 || s[s.len() - 2] != n) {
            return Err(shape_err!("causal softmax needs square trailing axes, got {:?}", s));
        }
        let out = Tensor::new(s, softmax_rows(x.data(), n, causal))?;
        self.tape.emit(out, Op::Softmax { x: self.id }, &[self.id])
    }

    /// Zero-mean, unit-variance standardization of the last axis.
    pub fn normalize(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| shape_err!("normalize of a 0-d tensor"))?;
        let (data, inv_std) = normalize_rows(x.data(), n, eps);
        let out = Tensor::new(x.shape(), data)?;
        self.tape.emit(out, Op::Normalize { x: self.id, inv_std }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape.emit(out, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let out = self.value().permute(perm)?;
        self.tape.emit(out, Op::Permute(self.id, perm.to_vec()), &[self.id])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(shape_err!("slice axis {axis} [{start}, {}) of {:?}", start + len, s));
        }
        let (outer, full, inner) = split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.tape.emit(Tensor::new(&shape, data)?, Op::Slice { x: self.id, axis, start, len }, &[self.id])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape();
        if axis >= s0.len() {
            return Err(shape_err!("concat axis {axis} of {:?}", s0));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(shape_err!("concat {:?} with {:?}", s0, s));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0.to_vec();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.emit(Tensor::new(&shape, data)?, Op::Concat { inputs: ids.clone(), axis }, &ids)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.emit(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Squared euclidean distances between the rows of `self[n, d]` and `other[m, d]`.
    pub fn pairwise_sq_dist(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(shape_err!("pairwise distance {:?} vs {:?}", a.shape(), b.shape()));
        }
        let (n, d, m) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ai = &a.data()[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &b.data()[j * d..(j + 1) * d];
                out[i * m + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.tape.emit(Tensor::new(&[n, m], out)?, Op::PairwiseSqDist(self.id, other.id), &[self.id, other.id])
    }
}
