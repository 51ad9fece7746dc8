//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! Every node owns its forward value. [`Graph::backward`] walks the tape in
//! reverse and applies one analytic rule per operation. Parameters are bound
//! with [`Graph::param`], which keys leaves by the address of the borrowed
//! matrix so a parameter used several times maps to one leaf.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, AirError, Result};
use crate::tensor::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc, transpose, Matrix, Scalar};
use crate::train::loss;
use crate::warp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Inverted-dropout multipliers: `1/(1-rate)` with probability `1-rate`,
/// else zero, from 16-bit uniforms.
fn keep_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let threshold = ((1.0 - rate) * 65536.0).round() as u32;
    let kept = T::from_f64(1.0 / (1.0 - rate));
    let mut bytes = vec![0u8; 2 * len];
    rng.fill_bytes(&mut bytes);
    bytes
        .chunks_exact(2)
        .map(|b| {
            if (u16::from_le_bytes([b[0], b[1]]) as u32) < threshold {
                kept
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Row-by-row dropout multipliers replayable from a seed.
struct MaskStream<T> {
    rng: ChaCha8Rng,
    threshold: u32,
    kept: T,
    bytes: Vec<u8>,
}

impl<T: Scalar> MaskStream<T> {
    fn new(rate: f64, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            threshold: ((1.0 - rate) * 65536.0).round() as u32,
            kept: T::from_f64(1.0 / (1.0 - rate)),
            bytes: Vec::new(),
        }
    }

    fn next_row(&mut self, out: &mut [T]) {
        self.bytes.resize(2 * out.len(), 0);
        self.rng.fill_bytes(&mut self.bytes);
        for (o, b) in out.iter_mut().zip(self.bytes.chunks_exact(2)) {
            *o = if (u16::from_le_bytes([b[0], b[1]]) as u32) < self.threshold {
                self.kept
            } else {
                T::zero()
            };
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// Adds a `1×c` row to every row.
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    /// Multi-head scaled dot-product attention with the post-softmax
    /// weights of every head. Dropout masks are regenerated from
    /// `(rate, seed)` in the backward pass rather than stored.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        alphas: Vec<Matrix<T>>,
        dropout: Option<(f64, u64)>,
    },
    /// Elementwise product with a fixed, pre-scaled keep mask.
    Mask(Var, Vec<T>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// `out[k] = x[index[k]]` over flat storage.
    Gather(Var, Arc<Vec<usize>>),
    /// `x * s[idx]` with `s` a matrix treated as flat storage.
    ScaleByEntry(Var, Var, usize),
    /// Bilinear sampling of an `H×W` image at normalized `(H·W)×2` coordinates.
    Sample {
        image: Var,
        coords: Var,
    },
    Mse(Var, Var),
    Ncc(Var, Var),
    Smoothness {
        field: Var,
        height: usize,
        width: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

/// Gradients of a scalar output with respect to every node on the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a trainable parameter. Binding the same matrix twice returns the
    /// same leaf.
    pub fn param(&mut self, m: &Matrix<T>) -> Var {
        let key = m as *const Matrix<T> as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(m.clone(), Op::Leaf, true);
        self.params.insert(key, v);
        v
    }

    /// Leaf for a parameter previously bound with [`Graph::param`].
    pub fn param_var(&self, m: &Matrix<T>) -> Option<Var> {
        self.params.get(&(m as *const Matrix<T> as usize)).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err(format!("a·bᵀ with {:?} and {:?}", av.shape(), bv.shape())));
        }
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        matmul_bt_acc(av, bv, &mut out);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("add {:?} and {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err(format!(
                "row broadcast of {:?} onto {:?}",
                rv.shape(),
                av.shape()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let g = self.grad_of(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let g = self.grad_of(&[a]);
        self.push(out, Op::Scale(a, s), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let g = self.grad_of(&[a]);
        self.push(out, Op::Relu(a), g)
    }

    /// Row-wise softmax. Fails with `NonFinite` when any output is NaN.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            row.iter_mut().for_each(|v| *v -= max);
            T::exp_in_place(row);
            let sum: T = row.iter().copied().sum();
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        if out.data().iter().any(|v| v.is_nan()) {
            return Err(AirError::NonFinite("attention weights"));
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), g))
    }

    /// Per-row layer normalization with learned `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.shape();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(shape_err(format!(
                "layer norm gain {:?} / bias {:?} for width {d}",
                gv.shape(),
                bv.shape()
            )));
        }
        let n = T::from_f64(d as f64);
        let mut xhat = Matrix::zeros(rows, d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, d);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let g = self.grad_of(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let mask = keep_mask(self.value(a).len(), rate, rng);
        let av = self.value(a);
        let mut out = av.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        let g = self.grad_of(&[a]);
        self.push(out, Op::Mask(a, mask), g)
    }

    /// Multi-head scaled dot-product attention of projected queries `q`
    /// (`n×d`) over keys `k` and values `v` (`m×d`). Head `h` owns columns
    /// `h·d/heads..(h+1)·d/heads` of all three and writes the same columns
    /// of the output. With `dropout`, inverted dropout is applied to the
    /// attention weights.
    pub fn multi_head_attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows();
        if kv.cols() != d || vv.shape() != (m, d) {
            return Err(shape_err(format!(
                "attention with queries {:?}, keys {:?}, values {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if m == 0 {
            return Err(shape_err("attention over an empty key/value sequence"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("{heads} heads do not split width {d}")));
        }
        let hk = d / heads;
        let scale = T::from_f64(1.0 / (hk as f64).sqrt());
        let (kt, vt) = (transpose(kv.data(), m, d), transpose(vv.data(), m, d));
        let dropout = dropout
            .filter(|(rate, _)| *rate > 0.0)
            .map(|(rate, rng)| (rate, rng.next_u64()));
        let mut stream = dropout.map(|(rate, seed)| MaskStream::new(rate, seed));
        let mut out = Matrix::zeros(n, d);
        let mut alphas = Vec::with_capacity(heads);
        let mut weights = vec![T::zero(); m];
        for h in 0..heads {
            let cols = h * hk..(h + 1) * hk;
            let mut alpha = Matrix::zeros(n, m);
            for i in 0..n {
                let row = alpha.row_mut(i);
                for c in cols.clone() {
                    axpy(qv.get(i, c) * scale, &kt[c * m..(c + 1) * m], row);
                }
                let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                row.iter_mut().for_each(|x| *x -= max);
                T::exp_in_place(row);
                let sum: T = row.iter().copied().sum();
                let inv = T::one() / sum;
                row.iter_mut().for_each(|x| *x = *x * inv);
                if row.iter().any(|x| x.is_nan()) {
                    return Err(AirError::NonFinite("attention weights"));
                }
                match stream.as_mut() {
                    Some(st) => {
                        st.next_row(&mut weights);
                        for (w, &x) in weights.iter_mut().zip(row.iter()) {
                            *w = *w * x;
                        }
                    }
                    None => weights.copy_from_slice(row),
                }
                let out_row = out.row_mut(i);
                for c in cols.clone() {
                    out_row[c] = dot(&weights, &vt[c * m..(c + 1) * m]);
                }
            }
            alphas.push(alpha);
        }
        let g = self.grad_of(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                alphas,
                dropout,
            },
            g,
        ))
    }

    /// Per-head attention weights (before dropout) of a node built by
    /// [`Graph::multi_head_attention`].
    pub fn attention_weights(&self, v: Var) -> Option<&[Matrix<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention { alphas, .. } => Some(alphas),
            _ => None,
        }
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(shape_err(format!(
                "columns {start}..{} of {:?}",
                start + len,
                av.shape()
            )));
        }
        let out = Matrix::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat of matrices with differing row counts"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let g = self.grad_of(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Builds a `rows×cols` matrix whose flat entry `k` is `a`'s flat entry
    /// `index[k]`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if index.len() != rows * cols || index.iter().any(|&i| i >= av.len()) {
            return Err(shape_err("gather index out of range"));
        }
        let data = index.iter().map(|&i| av.data()[i]).collect();
        let out = Matrix::from_vec(rows, cols, data)?;
        let g = self.grad_of(&[a]);
        Ok(self.push(out, Op::Gather(a, index), g))
    }

    pub fn scale_by_entry(&mut self, a: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = self.value(s);
        if idx >= sv.len() {
            return Err(shape_err(format!("entry {idx} of {:?}", sv.shape())));
        }
        let k = sv.data()[idx];
        let out = self.value(a).map(|v| v * k);
        let g = self.grad_of(&[a, s]);
        Ok(self.push(out, Op::ScaleByEntry(a, s, idx), g))
    }

    /// Bilinear sample of `image` (`H×W`) at normalized coordinates
    /// (`(H·W)×2`, columns x then y).
    pub fn sample(&mut self, image: Var, coords: Var) -> Result<Var> {
        let out = warp::sample_kernel(self.value(image), self.value(coords))?;
        let g = self.grad_of(&[image, coords]);
        Ok(self.push(out, Op::Sample { image, coords }, g))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = loss::mse_kernel(self.value(a), self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Matrix::filled(1, 1, v), Op::Mse(a, b), g))
    }

    /// `1 − NCC(a, b)` over all entries.
    pub fn ncc_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = loss::ncc_kernel(self.value(a), self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Matrix::filled(1, 1, T::one() - v), Op::Ncc(a, b), g))
    }

    pub fn smoothness(&mut self, field: Var, height: usize, width: usize) -> Result<Var> {
        let v = loss::smoothness_kernel(self.value(field), height, width)?;
        let g = self.grad_of(&[field]);
        Ok(self.push(Matrix::filled(1, 1, v), Op::Smoothness { field, height, width }, g))
    }

    /// Gradients of the `1×1` node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let ov = self.value(output);
        grads[output.0] = Some(Matrix::filled(ov.rows(), ov.cols(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, f: impl FnOnce(&mut Matrix<T>)) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| Matrix::zeros(node.value.rows(), node.value.cols()));
        f(g);
    }

    fn backward_node(&self, node: &Node<T>, dy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |g| matmul_bt_acc(dy, bv, g));
                self.accumulate(grads, *b, |g| matmul_at_acc(av, dy, g));
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |g| matmul_acc(dy, bv, g));
                self.accumulate(grads, *b, |g| matmul_at_acc(dy, av, g));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| g.add_assign(dy));
                self.accumulate(grads, *b, |g| g.add_assign(dy));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |g| g.add_assign(dy));
                self.accumulate(grads, *row, |g| {
                    for r in 0..dy.rows() {
                        for (o, &d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |g| {
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += d * *s;
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |g| {
                    for ((o, &d), &x) in g.data_mut().iter_mut().zip(dy.data()).zip(av.data()) {
                        if x > T::zero() {
                            *o += d;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, |g| {
                    for r in 0..y.rows() {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let dot: T = yr.iter().zip(dr).map(|(&p, &q)| p * q).sum();
                        for ((o, &p), &q) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                            *o += p * (q - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = xhat.cols();
                let n = T::from_f64(d as f64);
                self.accumulate(grads, *x, |g| {
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let (hr, dr) = (xhat.row(r), dy.row(r));
                        let mut sum = T::zero();
                        let mut sum_h = T::zero();
                        for c in 0..d {
                            dxhat[c] = dr[c] * gv.data()[c];
                            sum += dxhat[c];
                            sum_h += dxhat[c] * hr[c];
                        }
                        let k = inv / n;
                        for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                            *o += k * (n * dxhat[c] - sum - hr[c] * sum_h);
                        }
                    }
                });
                self.accumulate(grads, *gain, |g| {
                    for r in 0..xhat.rows() {
                        for ((o, &h), &d) in g.data_mut().iter_mut().zip(xhat.row(r)).zip(dy.row(r)) {
                            *o += h * d;
                        }
                    }
                });
                self.accumulate(grads, *bias, |g| {
                    for r in 0..dy.rows() {
                        for (o, &d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                alphas,
                dropout,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qv.shape();
                let m = kv.rows();
                let hk = d / heads;
                let scale = T::from_f64(1.0 / (hk as f64).sqrt());
                let (kt, vt) = (transpose(kv.data(), m, d), transpose(vv.data(), m, d));
                let mut stream = dropout.map(|(rate, seed)| MaskStream::<T>::new(rate, seed));
                let mut dq = Matrix::zeros(n, d);
                let mut dkt = vec![T::zero(); d * m];
                let mut dvt = vec![T::zero(); d * m];
                let mut mask = vec![T::zero(); m];
                let mut weights = vec![T::zero(); m];
                let mut da = vec![T::zero(); m];
                for (h, alpha) in alphas.iter().enumerate() {
                    let cols = h * hk..(h + 1) * hk;
                    for i in 0..n {
                        let a = alpha.row(i);
                        if let Some(st) = stream.as_mut() {
                            st.next_row(&mut mask);
                            for ((w, &x), &keep) in weights.iter_mut().zip(a).zip(&mask) {
                                *w = x * keep;
                            }
                        } else {
                            weights.copy_from_slice(a);
                        }
                        da.iter_mut().for_each(|x| *x = T::zero());
                        let dy_row = dy.row(i);
                        for c in cols.clone() {
                            let g = dy_row[c];
                            axpy(g, &vt[c * m..(c + 1) * m], &mut da);
                            axpy(g, &weights, &mut dvt[c * m..(c + 1) * m]);
                        }
                        if stream.is_some() {
                            for (x, &keep) in da.iter_mut().zip(&mask) {
                                *x = *x * keep;
                            }
                        }
                        let row_dot = dot(a, &da);
                        for (x, &p) in da.iter_mut().zip(a) {
                            *x = p * (*x - row_dot) * scale;
                        }
                        let q_row = qv.row(i);
                        for c in cols.clone() {
                            let slot = &mut dq.row_mut(i)[c];
                            *slot += dot(&da, &kt[c * m..(c + 1) * m]);
                            axpy(q_row[c], &da, &mut dkt[c * m..(c + 1) * m]);
                        }
                    }
                }
                self.accumulate(grads, *q, |g| g.add_assign(&dq));
                self.accumulate(grads, *k, |g| {
                    for (o, x) in g.data_mut().iter_mut().zip(transpose(&dkt, d, m)) {
                        *o += x;
                    }
                });
                self.accumulate(grads, *v, |g| {
                    for (o, x) in g.data_mut().iter_mut().zip(transpose(&dvt, d, m)) {
                        *o += x;
                    }
                });
            }
            Op::Mask(a, mask) => {
                self.accumulate(grads, *a, |g| {
                    for ((o, &d), &m) in g.data_mut().iter_mut().zip(dy.data()).zip(mask) {
                        *o += d * m;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                self.accumulate(grads, *a, |g| {
                    for r in 0..dy.rows() {
                        for (o, &d) in g.row_mut(r)[*start..].iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |g| {
                        for r in 0..dy.rows() {
                            for (o, &d) in g.row_mut(r).iter_mut().zip(&dy.row(r)[offset..offset + w]) {
                                *o += d;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather(a, index) => {
                self.accumulate(grads, *a, |g| {
                    let gd = g.data_mut();
                    for (&i, &d) in index.iter().zip(dy.data()) {
                        gd[i] += d;
                    }
                });
            }
            Op::ScaleByEntry(a, s, idx) => {
                let k = self.value(*s).data()[*idx];
                let av = self.value(*a);
                self.accumulate(grads, *a, |g| {
                    for (o, &d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *o += d * k;
                    }
                });
                self.accumulate(grads, *s, |g| {
                    let dot: T = av.data().iter().zip(dy.data()).map(|(&x, &d)| x * d).sum();
                    g.data_mut()[*idx] += dot;
                });
            }
            Op::Sample { image, coords } => {
                let (iv, cv) = (self.value(*image), self.value(*coords));
                let want_image = self.nodes[image.0].needs_grad;
                let want_coords = self.nodes[coords.0].needs_grad;
                let (d_image, d_coords) = warp::sample_backward_kernel(iv, cv, dy, want_image, want_coords);
                if let Some(di) = d_image {
                    self.accumulate(grads, *image, |g| g.add_assign(&di));
                }
                if let Some(dc) = d_coords {
                    self.accumulate(grads, *coords, |g| g.add_assign(&dc));
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = dy.data()[0] * T::from_f64(2.0 / av.len() as f64);
                self.accumulate(grads, *a, |g| {
                    for ((o, &x), &y) in g.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *o += k * (x - y);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((o, &x), &y) in g.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *o += k * (y - x);
                    }
                });
            }
            Op::Ncc(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = -dy.data()[0];
                self.accumulate(grads, *a, |g| {
                    let d = loss::ncc_grad_kernel(av, bv);
                    for (o, &v) in g.data_mut().iter_mut().zip(d.data()) {
                        *o += k * v;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    let d = loss::ncc_grad_kernel(bv, av);
                    for (o, &v) in g.data_mut().iter_mut().zip(d.data()) {
                        *o += k * v;
                    }
                });
            }
            Op::Smoothness { field, height, width } => {
                let fv = self.value(*field);
                let k = dy.data()[0];
                self.accumulate(grads, *field, |g| {
                    loss::smoothness_grad_acc(fv, *height, *width, k, g);
                });
            }
        }
    }
}
