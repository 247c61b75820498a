//! Reverse-mode gradient tape over 2-D tensors.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints into the nodes created
//! with [`Tape::param`]. Nodes created with [`Tape::constant`] (and everything
//! computed only from constants) are skipped during the backward sweep.

use std::rc::Rc;

use super::ops::{gelu_grad_scalar, gelu_scalar, masked_softmax_row, row_stats};
use super::tensor::{gemm, Layout, Mask, Scalar, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    MaskedSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mse {
        pred: Var,
        diff: Vec<T>,
    },
    L1 {
        pred: Var,
        diff: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` never influenced the loss.
    pub fn take_or_zeros(&mut self, v: Var, like: &[usize]) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        deps: &[Var],
    ) -> Result<Var, NumericsError> {
        value.check_finite(name)?;
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), NumericsError> {
        self.value(v).dims2()
    }

    /// `a·b` for `a: n×k`, `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (n, k) = self.dims2(a)?;
        let (kb, m) = self.dims2(b)?;
        if k != kb {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            self.value(a).data(),
            Layout::plain(n, k),
            self.value(b).data(),
            Layout::plain(k, m),
            T::zero(),
            &mut out,
        );
        self.push(
            "matmul",
            Tensor::new(&[n, m], out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `a·bᵀ` for `a: n×k`, `b: m×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (n, k) = self.dims2(a)?;
        let (m, kb) = self.dims2(b)?;
        if k != kb {
            return Err(mismatch("matmul_nt", self.value(a), self.value(b)));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            self.value(a).data(),
            Layout::plain(n, k),
            self.value(b).data(),
            Layout::transposed(k, m),
            T::zero(),
            &mut out,
        );
        self.push(
            "matmul_nt",
            Tensor::new(&[n, m], out)?,
            Op::MatMulNt(a, b),
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the row vector `bias` (length `cols`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (_, cols) = self.dims2(a)?;
        if self.value(bias).shape() != [cols] {
            return Err(mismatch("add_row", self.value(a), self.value(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NumericsError> {
        let out = self.value(a).scale(c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn layernorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims2(x)?;
        if self.value(gamma).shape() != [cols] || self.value(beta).shape() != [cols] {
            return Err(mismatch("layernorm", self.value(x), self.value(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstds = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.value(x).data().chunks(cols) {
            let (mean, rstd) = row_stats(row, eps);
            rstds.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rstd;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let out = Tensor::new(&[rows, cols], out)?;
        self.push(
            "layernorm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd: rstds,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let out = self.value(x).map(gelu_scalar);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Row softmax of `x: rows×cols` over keys visible in `mask`.
    pub fn masked_softmax(&mut self, x: Var, mask: &Rc<Mask>) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims2(x)?;
        if mask.rows() != rows || mask.cols() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_softmax",
                left: vec![rows, cols],
                right: vec![mask.rows(), mask.cols()],
            });
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for (r, (src, dst)) in self
            .value(x)
            .data()
            .chunks(cols)
            .zip(out.data_mut().chunks_mut(cols))
            .enumerate()
        {
            masked_softmax_row(src, mask.row(r), dst);
        }
        self.push("masked_softmax", out, Op::MaskedSoftmax(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims2(x)?;
        if start + len > cols {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                left: vec![rows, cols],
                right: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for row in src.chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], out)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Ragged)?;
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, NumericsError> {
        let diff = self.value(pred).sub(target)?.into_data();
        let n = T::lit(diff.len().max(1) as f64);
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
        self.push("mse", Tensor::scalar(loss), Op::Mse { pred, diff }, &[pred])
    }

    /// Mean absolute error against a constant target.
    pub fn l1(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, NumericsError> {
        let diff = self.value(pred).sub(target)?.into_data();
        let n = T::lit(diff.len().max(1) as f64);
        let loss = diff.iter().map(|d| d.abs()).sum::<T>() / n;
        self.push("l1", Tensor::scalar(loss), Op::L1 { pred, diff }, &[pred])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.wants(v) {
            return;
        }
        for (i, g) in self.slot(grads, v).data_mut().iter_mut().enumerate() {
            *g = *g + f(i);
        }
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().expect("rank checked on forward");
                let m = node.value.shape()[1];
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.slot(grads, *a).data_mut();
                    gemm(
                        d,
                        Layout::plain(n, m),
                        bv,
                        Layout::transposed(m, k),
                        T::one(),
                        ga,
                    );
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b).data_mut();
                    gemm(
                        av,
                        Layout::transposed(k, n),
                        d,
                        Layout::plain(n, m),
                        T::one(),
                        gb,
                    );
                }
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = self.value(*a).dims2().expect("rank checked on forward");
                let m = node.value.shape()[1];
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.slot(grads, *a).data_mut();
                    gemm(
                        d,
                        Layout::plain(n, m),
                        bv,
                        Layout::plain(m, k),
                        T::one(),
                        ga,
                    );
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b).data_mut();
                    gemm(
                        d,
                        Layout::transposed(m, n),
                        av,
                        Layout::plain(n, k),
                        T::one(),
                        gb,
                    );
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| d[i]);
                self.accumulate(grads, *b, |i| d[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |i| d[i] * bv[i]);
                self.accumulate(grads, *b, |i| d[i] * av[i]);
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, |i| d[i]);
                if self.wants(*bias) {
                    let cols = self.value(*bias).len();
                    let gb = self.slot(grads, *bias).data_mut();
                    for row in d.chunks(cols) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |i| d[i] * *c),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gamma).len();
                let g = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let gg = self.slot(grads, *gamma).data_mut();
                    for (drow, xrow) in d.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] = gg[j] + drow[j] * xrow[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = self.slot(grads, *beta).data_mut();
                    for drow in d.chunks(cols) {
                        for j in 0..cols {
                            gb[j] = gb[j] + drow[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let inv_n = T::lit(1.0 / cols as f64);
                    let gx = self.slot(grads, *x).data_mut();
                    for (r, (drow, xrow)) in d.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..cols {
                            let dxh = drow[j] * g[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xrow[j];
                        }
                        mean_dxh = mean_dxh * inv_n;
                        mean_dxh_xh = mean_dxh_xh * inv_n;
                        let out = &mut gx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let dxh = drow[j] * g[j];
                            out[j] = out[j] + rstd[r] * (dxh - mean_dxh - xrow[j] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |i| d[i] * gelu_grad_scalar(xv[i]));
            }
            Op::MaskedSoftmax(x) => {
                if self.wants(*x) {
                    let cols = node.value.shape()[1];
                    let p = node.value.data();
                    let gx = self.slot(grads, *x).data_mut();
                    for ((prow, drow), grow) in
                        p.chunks(cols).zip(d.chunks(cols)).zip(gx.chunks_mut(cols))
                    {
                        let dot: T = prow.iter().zip(drow).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            grow[j] = grow[j] + prow[j] * (drow[j] - dot);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let len = node.value.shape()[1];
                    let cols = self.value(*x).shape()[1];
                    let gx = self.slot(grads, *x).data_mut();
                    for (grow, drow) in gx.chunks_mut(cols).zip(d.chunks(len)) {
                        for (g, &v) in grow[*start..*start + len].iter_mut().zip(drow) {
                            *g = *g + v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.wants(p) {
                        let gp = self.slot(grads, p).data_mut();
                        for (grow, drow) in gp.chunks_mut(w).zip(d.chunks(total)) {
                            for (g, &v) in grow.iter_mut().zip(&drow[offset..offset + w]) {
                                *g = *g + v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => self.accumulate(grads, *x, |_| d[0]),
            Op::Mse { pred, diff } => {
                let c = d[0] * T::lit(2.0 / diff.len().max(1) as f64);
                self.accumulate(grads, *pred, |i| diff[i] * c);
            }
            Op::L1 { pred, diff } => {
                let c = d[0] * T::lit(1.0 / diff.len().max(1) as f64);
                self.accumulate(grads, *pred, |i| {
                    let s = diff[i];
                    if s > T::zero() {
                        c
                    } else if s < T::zero() {
                        -c
                    } else {
                        T::zero()
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(f(inputs) ⊙ w))/d(inputs) against central differences.
    fn check_op(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut rng = Xoshiro256StarStar::seed_from_u64(99);
        let build = |inputs: &[Tensor<f64>], w: Option<&Tensor<f64>>| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars);
            let w = w
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(out).shape()));
            let wv = tape.constant(w);
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod).unwrap();
            (tape, vars, out, loss)
        };
        let (tape0, _, out0, _) = build(&inputs, None);
        let weights = rand_tensor(&mut rng, tape0.value(out0).shape());
        let (tape, vars, _, loss) = build(&inputs, Some(&weights));
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (k, var) in vars.iter().enumerate() {
            let zeros = Tensor::zeros(inputs[k].shape());
            let analytic = grads.get(*var).unwrap_or(&zeros);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let (tp, _, _, lp) = build(&plus, Some(&weights));
                let (tm, _, _, lm) = build(&minus, Some(&weights));
                let fd = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {k} elem {i}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0f64));
        let sq = tape.mul(w, w).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_map_gradient_is_input_broadcast() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3], vec![1.0f64, -2.0, 0.5]).unwrap());
        let w = tape.param(Tensor::from_fn(&[3, 2], |i| i as f64));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NotScalar { .. })
        ));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(3);
        let (a, b) = (
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
        );
        let t = rand_tensor(&mut rng, &[3, 2]);
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let av = tape.param(a.clone());
            let bv = tape.constant(b.clone());
            let y = tape.matmul(av, bv).unwrap();
            let g = tape.gelu(y).unwrap();
            let l1 = tape.mse(g, &t).unwrap();
            let l2 = tape.sum(y).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss).unwrap().get(av).unwrap().clone()
        };
        let sum = grad_of(0).add(&grad_of(1)).unwrap();
        assert!(sum.max_abs_diff(&grad_of(2)) < 1e-12);
    }

    #[test]
    fn matmul_grads() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(1);
        check_op(
            vec![
                rand_tensor(&mut rng, &[3, 4]),
                rand_tensor(&mut rng, &[4, 2]),
            ],
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        );
        check_op(
            vec![
                rand_tensor(&mut rng, &[3, 4]),
                rand_tensor(&mut rng, &[5, 4]),
            ],
            |t, v| t.matmul_nt(v[0], v[1]).unwrap(),
        );
    }

    #[test]
    fn layernorm_grads() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(2);
        check_op(
            vec![
                rand_tensor(&mut rng, &[3, 5]),
                rand_tensor(&mut rng, &[5]),
                rand_tensor(&mut rng, &[5]),
            ],
            |t, v| t.layernorm(v[0], v[1], v[2], 1e-6).unwrap(),
        );
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(4);
        check_op(vec![rand_tensor(&mut rng, &[2, 3])], |t, v| {
            t.gelu(v[0]).unwrap()
        });
        check_op(
            vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[3])],
            |t, v| t.add_row(v[0], v[1]).unwrap(),
        );
        check_op(vec![rand_tensor(&mut rng, &[2, 3])], |t, v| {
            t.scale(v[0], 0.37).unwrap()
        });
        check_op(
            vec![
                rand_tensor(&mut rng, &[2, 3]),
                rand_tensor(&mut rng, &[2, 3]),
            ],
            |t, v| t.add(v[0], v[1]).unwrap(),
        );
    }

    #[test]
    fn masked_softmax_grads() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let mask = Rc::new(Mask::from_fn(4, 4, |i, j| j < i || (i == 2 && j == 3)));
        check_op(vec![rand_tensor(&mut rng, &[4, 4])], move |t, v| {
            t.masked_softmax(v[0], &mask).unwrap()
        });
    }

    #[test]
    fn slice_concat_grads() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(6);
        check_op(vec![rand_tensor(&mut rng, &[3, 6])], |t, v| {
            let a = t.slice_cols(v[0], 1, 2).unwrap();
            let b = t.slice_cols(v[0], 3, 3).unwrap();
            t.concat_cols(&[b, a, b]).unwrap()
        });
    }

    #[test]
    fn loss_grads() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(7);
        let target = rand_tensor(&mut rng, &[2, 3]);
        let t2 = target.clone();
        check_op(vec![rand_tensor(&mut rng, &[2, 3])], move |t, v| {
            t.mse(v[0], &target).unwrap()
        });
        check_op(vec![rand_tensor(&mut rng, &[2, 3])], move |t, v| {
            t.l1(v[0], &t2).unwrap()
        });
    }

    #[test]
    fn mse_gradient_closed_form() {
        let pred = Tensor::new(&[1, 3], vec![1.0f64, 2.0, 4.0]).unwrap();
        let tgt = Tensor::new(&[1, 3], vec![0.0f64, 2.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(pred.clone());
        let loss = tape.mse(p, &tgt).unwrap();
        let g = tape.backward(loss).unwrap();
        let expected = pred.sub(&tgt).unwrap().scale(2.0 / 3.0);
        assert!(g.get(p).unwrap().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(
            tape.scale(a, 10.0),
            Err(NumericsError::NonFinite { .. })
        ));
    }
}
