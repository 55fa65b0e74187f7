//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on
//! the tape, parameters are read in place from the borrowed [`ParamStore`].
//! [`Tape::backward`] replays the record in reverse and returns the
//! gradient of a scalar node with respect to every parameter it touched.
//!
//! All values are matrices. Broadcasting is limited to explicit ops:
//! a row vector added to every row ([`Tape::add_row`]) and a column
//! vector scaling or shifting every column ([`Tape::mul_col`],
//! [`Tape::sub_col`]).

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    SubCol(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows {
        src: Var,
        idx: Vec<usize>,
        frozen: Option<usize>,
    },
    Blend {
        mask: Vec<bool>,
        new: Var,
        old: Var,
    },
    Sum(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    LogMatMul(Var, Var),
    Pick(Var, Vec<(usize, usize)>),
}

enum Slot<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Slot<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

fn mat_dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `out += a · b` with `a: n×k`, `b: k×m`, `out: n×m`.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn logsumexp_slice<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        mat_dims(self.value(v))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.shape().len() == 2);
        self.nodes.push(Node {
            value: Slot::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value.as_matrix(), Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(&[rows, cols]))
    }

    /// The tape node for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Slot::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[n, k], &[k2, m]));
        }
        let mut out = vec![T::zero(); n * m];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(name, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(sa.0, sa.1, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(Error::shape("add_row", &[n, c], &[rr, rc]));
        }
        let rv = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &r) in chunk.iter_mut().zip(rv) {
                *o += r;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::AddRow(a, row), ng))
    }

    fn col_broadcast(&mut self, name: &'static str, a: Var, col: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (n, c) = self.shape(a);
        let (cr, cc) = self.shape(col);
        if cc != 1 || cr != n {
            return Err(Error::shape(name, &[n, c], &[cr, cc]));
        }
        let cv = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for (i, chunk) in out.chunks_mut(c.max(1)).enumerate() {
            for o in chunk.iter_mut() {
                *o = f(*o, cv[i]);
            }
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(Tensor::matrix(n, c, out)?, op, ng))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast("mul_col", a, col, |x, s| x * s, Op::MulCol(a, col))
    }

    /// Subtracts `col[i]` from every entry of row `i`.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast("sub_col", a, col, |x, s| x - s, Op::SubCol(a, col))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let (r0, c0) = self.shape(first);
        let ng = parts.iter().any(|&p| self.needs(p));
        match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if c != c0 {
                        return Err(Error::shape("concat(axis=0)", &[r0, c0], &[r, c]));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                Ok(self.push(Tensor::matrix(rows, c0, data)?, Op::ConcatRows(parts.to_vec()), ng))
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if r != r0 {
                        return Err(Error::shape("concat(axis=1)", &[r0, c0], &[r, c]));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Ok(self.push(Tensor::matrix(r0, cols, data)?, Op::ConcatCols(parts.to_vec()), ng))
            }
            _ => Err(Error::invalid(format!("concat axis {axis} out of range"))),
        }
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if start + len > c || len == 0 {
            return Err(Error::invalid(format!("column slice {start}..{} of width {c}", start + len)));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(n, len, data)?, Op::SliceCols(a, start), ng))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if start + len > n || len == 0 {
            return Err(Error::invalid(format!("row slice {start}..{} of height {n}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows(a, start), ng))
    }

    /// Row `i` of the result is row `idx[i]` of `src`. Gradient flowing to
    /// row `frozen` (if any) is dropped.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize], frozen: Option<usize>) -> Result<Var> {
        let (n, c) = self.shape(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("row index {bad} out of range for {n} rows")));
        }
        let s = self.value(src);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(s.row(i));
        }
        let ng = self.needs(src);
        let op = Op::GatherRows {
            src,
            idx: idx.to_vec(),
            frozen,
        };
        Ok(self.push(Tensor::matrix(idx.len(), c, data)?, op, ng))
    }

    /// Row-wise select: row `i` comes from `new` where `mask[i]`, else from `old`.
    pub fn blend(&mut self, mask: &[bool], new: Var, old: Var) -> Result<Var> {
        let (sn, so) = (self.shape(new), self.shape(old));
        if sn != so || mask.len() != sn.0 {
            return Err(Error::shape("blend", &[sn.0, sn.1], &[so.0, so.1]));
        }
        if mask.iter().all(|&m| m) {
            return Ok(new);
        }
        let (vn, vo) = (self.value(new), self.value(old));
        let mut data = Vec::with_capacity(sn.0 * sn.1);
        for (i, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { vn.row(i) } else { vo.row(i) });
        }
        let ng = self.needs(new) || self.needs(old);
        let op = Op::Blend {
            mask: mask.to_vec(),
            new,
            old,
        };
        Ok(self.push(Tensor::matrix(sn.0, sn.1, data)?, op, ng))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Per-row sums, `n×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<T> = (0..t.rows()).map(|i| t.row(i).iter().copied().sum()).collect();
        let n = data.len();
        let ng = self.needs(a);
        self.push(Tensor::matrix(n, 1, data).expect("n×1"), Op::SumRows(a), ng)
    }

    /// Per-row log-sum-exp, `n×1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<T> = (0..t.rows()).map(|i| logsumexp_slice(t.row(i))).collect();
        let n = data.len();
        let ng = self.needs(a);
        self.push(Tensor::matrix(n, 1, data).expect("n×1"), Op::LogSumExpRows(a), ng)
    }

    /// Log-semiring product: `out[i][j] = logsumexp_k(a[i][k] + b[k][j])`.
    pub fn log_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("log_matmul", &[n, k], &[k2, m]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * m);
        let mut buf = vec![T::zero(); k];
        for i in 0..n {
            for j in 0..m {
                for (p, slot) in buf.iter_mut().enumerate() {
                    *slot = av.at(i, p) + bv.at(p, j);
                }
                out.push(logsumexp_slice(&buf));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::LogMatMul(a, b), ng))
    }

    /// Picks the listed `(row, col)` entries into an `n×1` column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&(i, j)) = at.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::invalid(format!("pick ({i}, {j}) out of range for {r}×{c}")));
        }
        let t = self.value(a);
        let data: Vec<T> = at.iter().map(|&(i, j)| t.at(i, j)).collect();
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(at.len(), 1, data)?, Op::Pick(a, at.to_vec()), ng))
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// Returns the gradient of `loss` with respect to every parameter that
    /// contributed to it. The tape itself is left intact, so calling this
    /// twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));
        let mut out: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(Var(i), &node.op, &g, &mut grads, &mut out);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(
        &self,
        this: Var,
        op: &Op<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut [Option<Tensor<T>>],
    ) {
        // Accumulates `f(buffer)` into the gradient slot of `v`.
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&[self.shape(v).0, self.shape(v).1]));
            f(slot.data_mut());
        };
        let gd = g.data();
        let y = self.value(this);
        match op {
            Op::Leaf => {}
            Op::Param(id) => match &mut out[id.0] {
                Some(t) => t.add_assign(g),
                slot @ None => *slot = Some(g.clone().reshape(self.params.value(*id).shape().to_vec()).expect("param shape")),
            },
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |da| {
                    // dA = G · Bᵀ
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            da[i * k + p] += s;
                        }
                    }
                });
                acc(grads, *b, &mut |db| {
                    // dB = Aᵀ · G
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = av[i * k + p];
                            for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, gd));
                acc(grads, *b, &mut |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, gd));
                acc(grads, *b, &mut |d| d.iter_mut().zip(gd).for_each(|(x, &g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |d| {
                    for ((x, &g), &o) in d.iter_mut().zip(gd).zip(bv) {
                        *x += g * o;
                    }
                });
                acc(grads, *b, &mut |d| {
                    for ((x, &g), &o) in d.iter_mut().zip(gd).zip(av) {
                        *x += g * o;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = self.shape(*a).1;
                acc(grads, *a, &mut |d| add_into(d, gd));
                acc(grads, *row, &mut |d| {
                    for chunk in gd.chunks(c) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MulCol(a, col) => {
                let c = self.shape(*a).1.max(1);
                let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                acc(grads, *a, &mut |d| {
                    for (i, (dc, gc)) in d.chunks_mut(c).zip(gd.chunks(c)).enumerate() {
                        for (x, &g) in dc.iter_mut().zip(gc) {
                            *x += g * cv[i];
                        }
                    }
                });
                acc(grads, *col, &mut |d| {
                    for (i, (gc, ac)) in gd.chunks(c).zip(av.chunks(c)).enumerate() {
                        d[i] += gc.iter().zip(ac).map(|(&g, &x)| g * x).sum::<T>();
                    }
                });
            }
            Op::SubCol(a, col) => {
                let c = self.shape(*a).1.max(1);
                acc(grads, *a, &mut |d| add_into(d, gd));
                acc(grads, *col, &mut |d| {
                    for (i, gc) in gd.chunks(c).enumerate() {
                        d[i] -= gc.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(grads, *a, &mut |d| d.iter_mut().zip(gd).for_each(|(x, &g)| *x += g * *s));
            }
            Op::Tanh(a) => {
                let yv = y.data();
                acc(grads, *a, &mut |d| {
                    for ((x, &g), &t) in d.iter_mut().zip(gd).zip(yv) {
                        *x += g * (T::one() - t * t);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = y.data();
                acc(grads, *a, &mut |d| {
                    for ((x, &g), &s) in d.iter_mut().zip(gd).zip(yv) {
                        *x += g * s * (T::one() - s);
                    }
                });
            }
            Op::Exp(a) => {
                let yv = y.data();
                acc(grads, *a, &mut |d| {
                    for ((x, &g), &e) in d.iter_mut().zip(gd).zip(yv) {
                        *x += g * e;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let (n, c) = self.shape(p);
                    acc(grads, p, &mut |d| {
                        for i in 0..n {
                            add_into(&mut d[i * c..(i + 1) * c], &gd[i * total + off..i * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(grads, p, &mut |d| add_into(d, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a).1;
                let w = y.cols();
                acc(grads, *a, &mut |d| {
                    for (i, gc) in gd.chunks(w).enumerate() {
                        add_into(&mut d[i * c + start..i * c + start + w], gc);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = self.shape(*a).1;
                acc(grads, *a, &mut |d| add_into(&mut d[start * c..start * c + gd.len()], gd));
            }
            Op::GatherRows { src, idx, frozen } => {
                let c = self.shape(*src).1;
                acc(grads, *src, &mut |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        if Some(i) == *frozen {
                            continue;
                        }
                        add_into(&mut d[i * c..(i + 1) * c], &gd[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Blend { mask, new, old } => {
                let c = y.cols();
                acc(grads, *new, &mut |d| {
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        add_into(&mut d[i * c..(i + 1) * c], &gd[i * c..(i + 1) * c]);
                    }
                });
                acc(grads, *old, &mut |d| {
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| !m) {
                        add_into(&mut d[i * c..(i + 1) * c], &gd[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                acc(grads, *a, &mut |d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::SumRows(a) => {
                let c = self.shape(*a).1.max(1);
                acc(grads, *a, &mut |d| {
                    for (i, dc) in d.chunks_mut(c).enumerate() {
                        dc.iter_mut().for_each(|x| *x += gd[i]);
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let c = self.shape(*a).1.max(1);
                let av = self.value(*a).data();
                let yv = y.data();
                acc(grads, *a, &mut |d| {
                    for (i, (dc, ac)) in d.chunks_mut(c).zip(av.chunks(c)).enumerate() {
                        if yv[i] == T::neg_infinity() {
                            continue;
                        }
                        for (x, &v) in dc.iter_mut().zip(ac) {
                            *x += gd[i] * (v - yv[i]).exp();
                        }
                    }
                });
            }
            Op::LogMatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                // w[i][p][j] = exp(a[i][p] + b[p][j] - y[i][j]), the softmax over p.
                let weight = |i: usize, p: usize, j: usize| (av.at(i, p) + bv.at(p, j) - y.at(i, j)).exp();
                acc(grads, *a, &mut |d| {
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..m {
                                s += gd[i * m + j] * weight(i, p, j);
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                acc(grads, *b, &mut |d| {
                    for p in 0..k {
                        for j in 0..m {
                            let mut s = T::zero();
                            for i in 0..n {
                                s += gd[i * m + j] * weight(i, p, j);
                            }
                            d[p * m + j] += s;
                        }
                    }
                });
            }
            Op::Pick(a, at) => {
                let c = self.shape(*a).1;
                acc(grads, *a, &mut |d| {
                    for (k, &(i, j)) in at.iter().enumerate() {
                        d[i * c + j] += gd[k];
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
