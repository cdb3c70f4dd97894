//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! are borrowed from a flat slice and never copied into the tape, so many
//! graphs can be built concurrently against one parameter set and their
//! gradients reduced afterwards.

use crate::mat::{matmul_at_into, matmul_bt_into, matmul_into, Mat};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    MaskedSoftmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    SumSquares(Var),
    Sum(Var),
    Reshape(Var),
}

struct Node<T> {
    op: Op<T>,
    /// `None` for parameters, whose value lives in the borrowed slice.
    value: Option<Mat<T>>,
}

pub struct Graph<'p, T: Real> {
    params: &'p [Mat<T>],
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients from one backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Mat<T>>>,
    /// Indexed like the parameter slice; `None` when a parameter did not
    /// influence the output.
    pub params: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Mat<T>> {
        self.nodes[v.0].as_ref()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p [Mat<T>]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Mat<T>) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params[*i],
            (None, _) => unreachable!("only parameters are stored out of line"),
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.data.len(), 1);
        m.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Constant input; receives gradients but is not a parameter.
    pub fn input(&mut self, m: Mat<T>) -> Var {
        self.push(Op::Leaf, m)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.rows, "matmul {:?} x {:?}", am.shape(), bm.shape());
        let mut out = Mat::zeros(am.rows, bm.cols);
        matmul_into(am, bm, &mut out.data);
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.cols, "matmul_bt shape mismatch");
        let mut out = Mat::zeros(am.rows, bm.rows);
        matmul_bt_into(am, bm, &mut out.data);
        self.push(Op::MatMulBt(a, b), out)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Mat<T> {
        let (am, bm) = (self.value(a), self.value(b));
        assert!(am.same_shape(bm), "{:?} vs {:?}", am.shape(), bm.shape());
        Mat {
            rows: am.rows,
            cols: am.cols,
            data: am.data.iter().zip(&bm.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert!(rm.rows == 1 && rm.cols == am.cols, "add_row shape mismatch");
        let mut out = am.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rm.data) {
                *o = *o + b;
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(Op::Scale(a, s), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), out)
    }

    /// Row-wise layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let n = T::of_usize(cols);
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (gm, bm) = (self.value(gamma), self.value(beta));
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, xhat.get(r, c) * gm.data[c] + bm.data[c]);
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        )
    }

    /// Row-wise softmax over the columns flagged in `keep`; the others get
    /// exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Var {
        let am = self.value(a);
        assert_eq!(keep.len(), am.cols, "mask width mismatch");
        let mut out = Mat::zeros(am.rows, am.cols);
        for r in 0..am.rows {
            let row = am.row(r);
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let orow = out.row_mut(r);
            let mut total = T::zero();
            for ((o, &x), &k) in orow.iter_mut().zip(row).zip(keep) {
                if k {
                    *o = (x - max).exp();
                    total = total + *o;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / total;
            }
        }
        self.push(Op::MaskedSoftmax(a), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.rows, "row slice out of range");
        let out = am.slice_rows(start, len);
        self.push(Op::SliceRows(a, start), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.cols, "column slice out of range");
        let mut out = Mat::zeros(am.rows, len);
        for r in 0..am.rows {
            out.row_mut(r)
                .copy_from_slice(&am.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width mismatch");
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        self.push(Op::ConcatRows(parts.to_vec()), Mat { rows, cols, data })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let n = T::of_usize(am.rows);
        let mut out = Mat::zeros(1, am.cols);
        for r in 0..am.rows {
            for (o, &x) in out.data.iter_mut().zip(am.row(r)) {
                *o = *o + x;
            }
        }
        for o in out.data.iter_mut() {
            *o = *o / n;
        }
        self.push(Op::MeanRows(a), out)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.push(Op::SumSquares(a), Mat::filled(1, 1, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum::<T>();
        self.push(Op::Sum(a), Mat::filled(1, 1, s))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let am = self.value(a);
        assert_eq!(am.rows * am.cols, rows * cols, "reshape size mismatch");
        let out = Mat {
            rows,
            cols,
            data: am.data.clone(),
        };
        self.push(Op::Reshape(a), out)
    }

    /// `x · w + b` with `b` a `1 x n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).data.len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Mat<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, T::one()));

        fn acc<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, shape: (usize, usize)) -> &mut Mat<T> {
            grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(p) => match &mut param_grads[*p] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g.clone()),
                },
                Op::MatMul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    matmul_bt_into(&g, bm, &mut acc(&mut grads, *a, am.shape()).data);
                    matmul_at_into(am, &g, &mut acc(&mut grads, *b, bm.shape()).data);
                }
                Op::MatMulBt(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    matmul_into(&g, bm, &mut acc(&mut grads, *a, am.shape()).data);
                    matmul_at_into(&g, am, &mut acc(&mut grads, *b, bm.shape()).data);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.shape()).add_assign(&g);
                    acc(&mut grads, *b, g.shape()).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.shape()).add_assign(&g);
                    let gb = acc(&mut grads, *b, g.shape());
                    for (o, &x) in gb.data.iter_mut().zip(&g.data) {
                        *o = *o - x;
                    }
                }
                Op::Mul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, g.shape());
                    for ((o, &x), &y) in ga.data.iter_mut().zip(&g.data).zip(&bm.data) {
                        *o = *o + x * y;
                    }
                    let gb = acc(&mut grads, *b, g.shape());
                    for ((o, &x), &y) in gb.data.iter_mut().zip(&g.data).zip(&am.data) {
                        *o = *o + x * y;
                    }
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *a, g.shape()).add_assign(&g);
                    let gr = acc(&mut grads, *row, (1, g.cols));
                    for r in 0..g.rows {
                        for (o, &x) in gr.data.iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, g.shape());
                    for (o, &x) in ga.data.iter_mut().zip(&g.data) {
                        *o = *o + x * *s;
                    }
                }
                Op::Gelu(a) => {
                    let am = self.value(*a);
                    let ga = acc(&mut grads, *a, g.shape());
                    for ((o, &x), &gx) in ga.data.iter_mut().zip(&am.data).zip(&g.data) {
                        *o = *o + gx * gelu_grad(x);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.nodes[i].value.as_ref().expect("tanh output");
                    let ga = acc(&mut grads, *a, g.shape());
                    for ((o, &yv), &gx) in ga.data.iter_mut().zip(&y.data).zip(&g.data) {
                        *o = *o + gx * (T::one() - yv * yv);
                    }
                }
                Op::Exp(a) => {
                    let y = self.nodes[i].value.as_ref().expect("exp output");
                    let ga = acc(&mut grads, *a, g.shape());
                    for ((o, &yv), &gx) in ga.data.iter_mut().zip(&y.data).zip(&g.data) {
                        *o = *o + gx * yv;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma).clone();
                    let (rows, cols) = g.shape();
                    let n = T::of_usize(cols);
                    {
                        let gg = acc(&mut grads, *gamma, (1, cols));
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.data[c] = gg.data[c] + g.get(r, c) * xhat.get(r, c);
                            }
                        }
                    }
                    {
                        let gbeta = acc(&mut grads, *beta, (1, cols));
                        for r in 0..rows {
                            for (o, &v) in gbeta.data.iter_mut().zip(g.row(r)) {
                                *o = *o + v;
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, (rows, cols));
                    for r in 0..rows {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            let d = g.get(r, c) * gm.data[c];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xhat.get(r, c);
                        }
                        for c in 0..cols {
                            let d = g.get(r, c) * gm.data[c];
                            let v = inv_std[r] / n * (n * d - sum_d - xhat.get(r, c) * sum_dx);
                            gx.data[r * cols + c] = gx.data[r * cols + c] + v;
                        }
                    }
                }
                Op::MaskedSoftmax(a) => {
                    let y = self.nodes[i].value.as_ref().expect("softmax output");
                    let ga = acc(&mut grads, *a, g.shape());
                    for r in 0..g.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..g.cols {
                            let idx = r * g.cols + c;
                            ga.data[idx] = ga.data[idx] + yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let shape = self.value(*a).shape();
                    let ga = acc(&mut grads, *a, shape);
                    let off = start * shape.1;
                    for (o, &x) in ga.data[off..off + g.data.len()].iter_mut().zip(&g.data) {
                        *o = *o + x;
                    }
                }
                Op::SliceCols(a, start) => {
                    let shape = self.value(*a).shape();
                    let ga = acc(&mut grads, *a, shape);
                    for r in 0..g.rows {
                        let dst = &mut ga.data[r * shape.1 + start..r * shape.1 + start + g.cols];
                        for (o, &x) in dst.iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        let len = shape.0 * shape.1;
                        let gp = acc(&mut grads, p, shape);
                        for (o, &x) in gp.data.iter_mut().zip(&g.data[offset..offset + len]) {
                            *o = *o + x;
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape();
                        let gp = acc(&mut grads, p, shape);
                        for r in 0..shape.0 {
                            let src = &g.row(r)[offset..offset + shape.1];
                            for (o, &x) in gp.row_mut(r).iter_mut().zip(src) {
                                *o = *o + x;
                            }
                        }
                        offset += shape.1;
                    }
                }
                Op::MeanRows(a) => {
                    let shape = self.value(*a).shape();
                    let n = T::of_usize(shape.0);
                    let ga = acc(&mut grads, *a, shape);
                    for r in 0..shape.0 {
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *o = *o + x / n;
                        }
                    }
                }
                Op::SumSquares(a) => {
                    let am = self.value(*a);
                    let s = g.data[0] * T::of(2.0);
                    let ga = acc(&mut grads, *a, am.shape());
                    for (o, &x) in ga.data.iter_mut().zip(&am.data) {
                        *o = *o + s * x;
                    }
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape();
                    let s = g.data[0];
                    let ga = acc(&mut grads, *a, shape);
                    for o in ga.data.iter_mut() {
                        *o = *o + s;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape();
                    let ga = acc(&mut grads, *a, shape);
                    for (o, &x) in ga.data.iter_mut().zip(&g.data) {
                        *o = *o + x;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: param_grads,
        }
    }
}
