//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every operation appends a node whose inputs already exist on the tape, so
//! the node list is always in topological order and `backward` is a single
//! reverse sweep. Broadcasting is limited to trailing singleton dimensions of
//! the right-hand operand.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed real linear map applied independently to every row of a matrix.
///
/// The tape needs the adjoint for the backward pass; self-adjoint operators
/// can simply forward to `apply`.
pub trait RowOperator: Send + Sync {
    fn apply(&self, row: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, row: &[f64], out: &mut [f64]);
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        dilation: usize,
    },
    ConcatRows(Vec<Var>),
    BroadcastCols(Var),
    Sum(Var),
    RowMap(Var, Arc<dyn RowOperator>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable input whose gradient will be collected.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(dim_err!("matmul needs rank-2 operands"));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(dim_err!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Number of consecutive `a` elements sharing one `b` element, or an error
    /// when `b` is not `a`'s shape with some trailing dimensions set to 1.
    fn broadcast_block(a: &Tensor, b: &Tensor) -> Result<usize> {
        if a.rank() != b.rank() {
            return Err(dim_err!("rank mismatch {:?} vs {:?}", a.shape(), b.shape()));
        }
        let mut prefix = a.rank();
        while prefix > 0 && b.shape()[prefix - 1] == 1 && a.shape()[prefix - 1] != 1 {
            prefix -= 1;
        }
        if a.shape()[..prefix] != b.shape()[..prefix]
            || b.shape()[prefix..].iter().any(|&d| d != 1)
        {
            return Err(dim_err!(
                "cannot broadcast {:?} onto {:?}",
                b.shape(),
                a.shape()
            ));
        }
        Ok(a.shape()[prefix..].iter().product())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let block = Self::broadcast_block(ta, tb)?;
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i / block])
            .collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let block = Self::broadcast_block(ta, tb)?;
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tb.data()[i / block])
            .collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x * s).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| x * sigmoid(x)).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Silu(a), ng)
    }

    /// Same-padded dilated 1-D convolution along columns.
    ///
    /// `input` is `[c_in, t]`, `weight` is `[c_out, c_in, k]` with odd `k`,
    /// `bias` is `[c_out, 1]`. Out-of-range taps read zeros.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 2 || w.rank() != 3 {
            return Err(dim_err!("conv1d expects [c_in, t] input and [c_out, c_in, k] weight"));
        }
        let (c_in, t) = (x.rows(), x.cols());
        let (c_out, wk_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wk_in != c_in {
            return Err(dim_err!("conv1d weight expects {wk_in} input channels, got {c_in}"));
        }
        if k % 2 == 0 || dilation == 0 {
            return Err(dim_err!("conv1d needs odd kernel and positive dilation"));
        }
        if b.shape() != [c_out, 1] {
            return Err(dim_err!("conv1d bias must be [{c_out}, 1], got {:?}", b.shape()));
        }
        let mut out = vec![0.0; c_out * t];
        for (o, row) in out.chunks_mut(t).enumerate() {
            row.fill(b.data()[o]);
        }
        let cols = im2col(x.data(), c_in, t, k, dilation);
        matmul_into(w.data(), &cols, &mut out, c_out, c_in * k, t);
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![c_out, t], out)?,
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            },
            ng,
        ))
    }

    /// Stacks rank-2 operands with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(dim_err!("concat of nothing"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(dim_err!("concat_rows column mismatch"));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Repeats a `[r, 1]` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.cols() != 1 {
            return Err(dim_err!("broadcast_cols expects [r, 1], got {:?}", ta.shape()));
        }
        let r = ta.rows();
        let mut out = Vec::with_capacity(r * cols);
        for &v in ta.data() {
            out.extend(std::iter::repeat_n(v, cols));
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(vec![r, cols], out)?, Op::BroadcastCols(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Applies a fixed linear operator to every row of a rank-2 value.
    pub fn row_map(&mut self, a: Var, op: Arc<dyn RowOperator>) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(dim_err!("row_map expects rank 2"));
        }
        let cols = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (src, dst) in ta.data().chunks(cols).zip(out.chunks_mut(cols)) {
            op.apply(src, dst);
        }
        let shape = ta.shape().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::RowMap(a, op), ng))
    }

    /// Reverse sweep from a scalar `loss`; afterwards [`Tape::grad`] returns
    /// dLoss/dValue for every recorded value that depends on a parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, len: usize) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    /// Adds `buf` into the gradient of `v`, taking ownership when empty.
    fn give(&mut self, v: Var, buf: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => add_into(g, &buf),
            slot => *slot = Some(buf),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Split borrows: inputs always precede idx.
        let (before, rest) = self.nodes.split_at(idx);
        let node = &rest[0];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&before[a.0].value, &before[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (a, b) = (*a, *b);
                let need_a = before[a.0].needs_grad;
                let need_b = before[b.0].needs_grad;
                let da = need_a.then(|| {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(g, tb.data(), &mut da, m, n, k);
                    da
                });
                let db = need_b.then(|| {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(ta.data(), g, &mut db, k, m, n);
                    db
                });
                if let Some(da) = da {
                    self.give(a, da);
                }
                if let Some(db) = db {
                    self.give(b, db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let la = before[a.0].value.len();
                let lb = before[b.0].value.len();
                let block = la / lb;
                if before[a.0].needs_grad {
                    self.give(a, g.to_vec());
                }
                if let Some(gb) = self.acc(b, lb) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i / block] += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = before[a.0].value.data().to_vec();
                let vb = before[b.0].value.data().to_vec();
                let block = va.len() / vb.len();
                if let Some(ga) = self.acc(a, va.len()) {
                    for (i, v) in g.iter().enumerate() {
                        ga[i] += v * vb[i / block];
                    }
                }
                if let Some(gb) = self.acc(b, vb.len()) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i / block] += v * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                if let Some(ga) = self.acc(a, g.len()) {
                    for (d, v) in ga.iter_mut().zip(g) {
                        *d += s * v;
                    }
                }
            }
            Op::Silu(a) => {
                let a = *a;
                let x = before[a.0].value.data().to_vec();
                if let Some(ga) = self.acc(a, g.len()) {
                    for i in 0..g.len() {
                        let s = sigmoid(x[i]);
                        ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            } => {
                let (input, weight, bias, dilation) = (*input, *weight, *bias, *dilation);
                let x = &before[input.0].value;
                let w = &before[weight.0].value;
                let (c_in, t) = (x.rows(), x.cols());
                let (c_out, k) = (w.shape()[0], w.shape()[2]);
                let need_x = before[input.0].needs_grad;
                let need_w = before[weight.0].needs_grad;
                let ck = c_in * k;
                let dw = need_w.then(|| {
                    let cols = im2col(x.data(), c_in, t, k, dilation);
                    let mut dw = vec![0.0; c_out * ck];
                    matmul_nt_into(g, &cols, &mut dw, c_out, t, ck);
                    dw
                });
                let dx = need_x.then(|| {
                    let mut dcols = vec![0.0; ck * t];
                    matmul_tn_into(w.data(), g, &mut dcols, ck, c_out, t);
                    let mut dx = vec![0.0; c_in * t];
                    for i in 0..c_in {
                        for tap in 0..k {
                            let off = (tap as isize - (k / 2) as isize) * dilation as isize;
                            let (dst, src) = shifted_ranges(t, off);
                            let row = &dcols[(i * k + tap) * t..(i * k + tap + 1) * t];
                            add_into(&mut dx[i * t..(i + 1) * t][src], &row[dst]);
                        }
                    }
                    dx
                });
                if let Some(dx) = dx {
                    self.give(input, dx);
                }
                if let Some(dw) = dw {
                    self.give(weight, dw);
                }
                if let Some(gb) = self.acc(bias, c_out) {
                    for o in 0..c_out {
                        gb[o] += g[o * t..(o + 1) * t].iter().sum::<f64>();
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(p, len) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::BroadcastCols(a) => {
                let a = *a;
                let r = before[a.0].value.rows();
                let cols = g.len() / r;
                if let Some(ga) = self.acc(a, r) {
                    for (i, gi) in ga.iter_mut().enumerate() {
                        *gi += g[i * cols..(i + 1) * cols].iter().sum::<f64>();
                    }
                }
            }
            Op::Sum(a) => {
                let a = *a;
                let len = before[a.0].value.len();
                if let Some(ga) = self.acc(a, len) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::RowMap(a, op) => {
                let (a, op) = (*a, Arc::clone(op));
                let shape = before[a.0].value.shape().to_vec();
                let cols = shape[1];
                let mut tmp = vec![0.0; g.len()];
                for (src, dst) in g.chunks(cols).zip(tmp.chunks_mut(cols)) {
                    op.apply_adjoint(src, dst);
                }
                self.give(a, tmp);
            }
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s grad buffer.
    pub fn accumulate_grad_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Destination and source index ranges for reading `src[t + off]` into
/// `dst[t]` with zero padding outside `0..len`.
fn shifted_ranges(len: usize, off: isize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let mag = off.unsigned_abs().min(len);
    if off >= 0 {
        (0..len - mag, mag..len)
    } else {
        (mag..len, 0..len - mag)
    }
}

#[inline(always)]
fn axpy_body(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out += a[m x k] * b[k x n]`, row-major. Each output element sums its
/// products in `k` order, whatever the tiling.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { gemm_avx2(a, b, out, m, k, n) };
    }
    gemm_body(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_body(a, b, out, m, k, n)
}

const TILE_R: usize = 4;
const TILE_C: usize = 8;

#[inline(always)]
fn gemm_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let mut i = 0;
    while i + TILE_R <= m {
        let mut j = 0;
        while j + TILE_C <= n {
            let mut acc = [[0.0f64; TILE_C]; TILE_R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + TILE_C]);
            }
            for kk in 0..k {
                let bv: &[f64; TILE_C] = b[kk * n + j..kk * n + j + TILE_C].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + kk];
                    for c in 0..TILE_C {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + TILE_C].copy_from_slice(row);
            }
            j += TILE_C;
        }
        if j < n {
            for r in i..i + TILE_R {
                for kk in 0..k {
                    let av = a[r * k + kk];
                    axpy_body(av, &b[kk * n + j..(kk + 1) * n], &mut out[r * n + j..(r + 1) * n]);
                }
            }
        }
        i += TILE_R;
    }
    for r in i..m {
        for kk in 0..k {
            let av = a[r * k + kk];
            axpy_body(av, &b[kk * n..(kk + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `out += a[m x k] * b[n x k]^T`.
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_into(a, &transpose(b, n, k), out, m, k, n)
}

/// `out += a[k x m]^T * b[k x n]`.
fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_into(&transpose(a, k, m), b, out, m, k, n)
}

/// Rows `(i, tap)` hold channel `i` shifted by the tap offset, zero filled.
fn im2col(x: &[f64], c_in: usize, t: usize, k: usize, dilation: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c_in * k * t];
    for i in 0..c_in {
        let xr = &x[i * t..(i + 1) * t];
        for tap in 0..k {
            let off = (tap as isize - (k / 2) as isize) * dilation as isize;
            let (dst, src) = shifted_ranges(t, off);
            let row = &mut cols[(i * k + tap) * t..(i * k + tap + 1) * t];
            row[dst].copy_from_slice(&xr[src]);
        }
    }
    cols
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![r, c], v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` around every element of `inputs`.
    fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, h: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (pi, p) in inputs.iter().enumerate() {
            let mut g = vec![0.0; p.len()];
            for j in 0..p.len() {
                let mut plus = inputs.to_vec();
                plus[pi].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[pi].data_mut()[j] -= h;
                g[j] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let mut tape = Tape::new();
        let id = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(mat(2, 2, &[3.0, -1.0, 2.5, 7.0]));
        let p = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, -1.0, 2.5, 7.0]);

        let a = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(mat(2, 1, &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let w = random(&[5, 3], &mut rng);
        let f = |ts: &[Tensor]| {
            let mut tape = Tape::new();
            let a = tape.constant(ts[0].clone());
            let b = tape.constant(ts[1].clone());
            let c = tape.matmul(a, b).unwrap();
            let wv = tape.constant(w.clone());
            let p = tape.mul(c, wv).unwrap();
            let s = tape.sum(p);
            tape.value(s).data()[0]
        };
        let mut tape = Tape::new();
        let va = tape.param(&a);
        let vb = tape.param(&b);
        let c = tape.matmul(va, vb).unwrap();
        let wv = tape.constant(w.clone());
        let p = tape.mul(c, wv).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        let num = numeric_grads(&[a, b], &f, 1e-5);
        assert!(rel_err(tape.grad(va).unwrap(), &num[0]) < 1e-6);
        assert!(rel_err(tape.grad(vb).unwrap(), &num[1]) < 1e-6);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.silu(z);
        assert_eq!(tape.value(s).data(), &[0.0]);

        let x = tape.constant(mat(1, 3, &[1.0, -2.0, 3.0]));
        let zeros = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.add(x, zeros).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);

        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(tape.add(x, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn trailing_singleton_broadcast() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(mat(2, 1, &[10.0, 20.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let m = tape.mul(x, b).unwrap();
        assert_eq!(tape.value(m).data(), &[10.0, 20.0, 30.0, 80.0, 100.0, 120.0]);
        // leading singleton is not a trailing broadcast
        let lead = tape.constant(mat(1, 3, &[1.0, 1.0, 1.0]));
        assert!(tape.add(x, lead).is_err());
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::new(vec![1, 40], (0..40).map(|_| rng.random_range(-6.0..6.0)).collect())
            .unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.silu(v);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let f = |ts: &[Tensor]| ts[0].data().iter().map(|&x| x * sigmoid(x)).sum::<f64>();
        let num = numeric_grads(&[x], &f, 1e-5);
        assert!(rel_err(tape.grad(v).unwrap(), &num[0]) < 1e-6);
    }

    #[test]
    fn backward_simple_losses() {
        let x = mat(1, 4, &[1.0, -2.0, 0.5, 3.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.param(&Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn conv1d_matches_direct_sum_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 11], &mut rng);
        let w = random(&[2, 3, 3], &mut rng);
        let b = random(&[2, 1], &mut rng);
        let dil = 2;
        let forward = |ts: &[Tensor]| -> Vec<f64> {
            let (x, w, b) = (&ts[0], &ts[1], &ts[2]);
            let mut out = vec![0.0; 2 * 11];
            for o in 0..2 {
                for t in 0..11isize {
                    let mut acc = b.data()[o];
                    for i in 0..3 {
                        for k in 0..3isize {
                            let src = t + (k - 1) * dil;
                            if (0..11).contains(&src) {
                                acc += w.data()[(o * 3 + i) * 3 + k as usize]
                                    * x.data()[i * 11 + src as usize];
                            }
                        }
                    }
                    out[o * 11 + t as usize] = acc;
                }
            }
            out
        };
        let probe = random(&[2, 11], &mut rng);
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.param(&x), tape.param(&w), tape.param(&b));
        let y = tape.conv1d(vx, vw, vb, dil as usize).unwrap();
        let direct = forward(&[x.clone(), w.clone(), b.clone()]);
        for (a, d) in tape.value(y).data().iter().zip(&direct) {
            assert!((a - d).abs() < 1e-12);
        }
        let pv = tape.constant(probe.clone());
        let m = tape.mul(y, pv).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        let f = |ts: &[Tensor]| {
            forward(ts)
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let num = numeric_grads(&[x, w, b], &f, 1e-5);
        assert!(rel_err(tape.grad(vx).unwrap(), &num[0]) < 1e-6);
        assert!(rel_err(tape.grad(vw).unwrap(), &num[1]) < 1e-6);
        assert!(rel_err(tape.grad(vb).unwrap(), &num[2]) < 1e-6);
    }

    #[test]
    fn concat_and_broadcast_route_gradients() {
        let a = mat(1, 2, &[1.0, 2.0]);
        let c = mat(2, 1, &[3.0, 4.0]);
        let mut tape = Tape::new();
        let va = tape.param(&a);
        let vc = tape.param(&c);
        let bc = tape.broadcast_cols(vc, 2).unwrap();
        assert_eq!(tape.value(bc).data(), &[3.0, 3.0, 4.0, 4.0]);
        let cat = tape.concat_rows(&[va, bc]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[3, 2]);
        let w = tape.constant(mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.mul(cat, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(va).unwrap(), &[1.0, 2.0]);
        assert_eq!(tape.grad(vc).unwrap(), &[7.0, 11.0]);
    }

    struct Reverse;
    impl RowOperator for Reverse {
        fn apply(&self, row: &[f64], out: &mut [f64]) {
            for (o, v) in out.iter_mut().zip(row.iter().rev()) {
                *o = *v;
            }
        }
        fn apply_adjoint(&self, row: &[f64], out: &mut [f64]) {
            self.apply(row, out)
        }
    }

    #[test]
    fn row_map_uses_adjoint() {
        let x = mat(1, 3, &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let r = tape.row_map(v, Arc::new(Reverse)).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 2.0, 1.0]);
        let w = tape.constant(mat(1, 3, &[10.0, 20.0, 30.0]));
        let p = tape.mul(r, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[30.0, 20.0, 10.0]);
    }

    #[test]
    fn deterministic_outputs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let a = random(&[6, 9], &mut rng);
            let b = random(&[9, 4], &mut rng);
            let mut tape = Tape::new();
            let va = tape.param(&a);
            let vb = tape.param(&b);
            let c = tape.matmul(va, vb).unwrap();
            let s = tape.silu(c);
            let l = tape.sum(s);
            tape.backward(l).unwrap();
            (tape.value(l).data().to_vec(), tape.grad(va).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1[0].to_bits(), l2[0].to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
