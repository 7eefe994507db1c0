//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks
//! the nodes in reverse and accumulates vector-Jacobian products. Nodes that
//! do not depend on a leaf are marked constant and skipped during backward.
//!
//! The tape is generic over [`Real`], so the same graph built over
//! [`crate::real::Dual`] returns gradients whose tangent parts are
//! second-order directional derivatives.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    CosineRows(Var, Var),
    Softmax(Var),
}

#[derive(Clone, Debug)]
struct Node<S> {
    rows: usize,
    cols: usize,
    val: Vec<S>,
    op: Op,
    needs_grad: bool,
}

/// Broadcast layout of the right operand in `add_bcast`/`mul_bcast`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(lr: usize, lc: usize, rr: usize, rc: usize) -> Bcast {
    if rr == lr && rc == lc {
        Bcast::Same
    } else if rr == 1 && rc == 1 {
        Bcast::Scalar
    } else if rr == 1 && rc == lc {
        Bcast::Row
    } else if rc == 1 && rr == lr {
        Bcast::Col
    } else {
        panic!("broadcast shape mismatch: {lr}x{lc} with {rr}x{rc}")
    }
}

#[inline]
fn bcast_index(kind: Bcast, i: usize, j: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i * cols + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Grads<S> {
    g: Vec<Option<Vec<S>>>,
    sizes: Vec<usize>,
}

impl<S: Real> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.g[v.0].as_deref()
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var) -> Vec<S> {
        match &self.g[v.0] {
            Some(g) => g.clone(),
            None => vec![S::zero(); self.sizes[v.0]],
        }
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, val: Vec<S>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, val.len());
        self.nodes.push(Node {
            rows,
            cols,
            val,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, rows: usize, cols: usize, val: Vec<S>) -> Var {
        assert_eq!(rows * cols, val.len(), "leaf shape mismatch");
        self.push(rows, cols, val, Op::Leaf, true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, val: Vec<S>) -> Var {
        assert_eq!(rows * cols, val.len(), "constant shape mismatch");
        self.push(rows, cols, val, Op::Const, false)
    }

    pub fn constant_f64(&mut self, rows: usize, cols: usize, val: &[f64]) -> Var {
        let v = val.iter().map(|&x| S::from_f64(x)).collect();
        self.constant(rows, cols, v)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(1, 1, vec![S::from_f64(x)])
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].val
    }

    pub fn values_f64(&self, v: Var) -> Vec<f64> {
        self.nodes[v.0].val.iter().map(|x| x.value()).collect()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> S {
        let n = &self.nodes[v.0];
        assert_eq!(n.val.len(), 1, "not a scalar node");
        n.val[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch: {n}x{k} * {k2}x{m}");
        let av = &self.nodes[a.0].val;
        let bv = &self.nodes[b.0].val;
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == S::zero() {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(n, m, out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].val;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(av[i * c + j]);
            }
        }
        let ng = self.ng(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, rows * cols, "reshape size mismatch");
        let out = self.nodes[a.0].val.clone();
        let ng = self.ng(a);
        self.push(rows, cols, out, Op::Reshape(a), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise shape mismatch");
        let out = self.nodes[a.0]
            .val
            .iter()
            .zip(&self.nodes[b.0].val)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; the gradient goes to the smaller operand
    /// (left operand on ties).
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(
            a,
            b,
            |x, y| if x.value() <= y.value() { x } else { y },
            Op::Min(a, b),
        )
    }

    fn bcast(&mut self, a: Var, b: Var, mul: bool) -> Var {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        let kind = bcast_kind(r, c, br, bc);
        let av = &self.nodes[a.0].val;
        let bv = &self.nodes[b.0].val;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = av[i * c + j];
                let y = bv[bcast_index(kind, i, j, c)];
                out.push(if mul { x * y } else { x + y });
            }
        }
        let ng = self.ng(a) || self.ng(b);
        let op = if mul { Op::MulBcast(a, b) } else { Op::AddBcast(a, b) };
        self.push(r, c, out, op, ng)
    }

    /// `a + b` where `b` is the same shape, a row (1×c), a column (r×1) or a scalar.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        self.bcast(a, b, false)
    }

    /// `a ⊙ b` with the broadcasting rules of [`Tape::add_bcast`].
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        self.bcast(a, b, true)
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].val.iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x.scale(c), Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let cc = S::from_f64(c);
        self.map(a, |x| x + cc, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| x.sigmoid(), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| if x.value() > 0.0 { x } else { S::zero() },
            Op::Relu(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        self.map(
            a,
            |x| {
                if x.value() < lo {
                    l
                } else if x.value() > hi {
                    h
                } else {
                    x
                }
            },
            Op::Clamp(a, lo, hi),
        )
    }

    /// Sum of all entries, 1×1.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = S::zero();
        for &x in &self.nodes[a.0].val {
            s += x;
        }
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].val.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums: r×c → 1×c.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].val;
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(1, c, out, Op::SumRows(a), ng)
    }

    /// Row sums: r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].val;
        let mut out = vec![S::zero(); r];
        for i in 0..r {
            for j in 0..c {
                out[i] += av[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(r, 1, out, Op::SumCols(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, r, "concat_cols row mismatch");
                self.shape(p).1
            })
            .sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.nodes[p.0].val[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].val);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let av = &self.nodes[a.0].val;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        self.push(r, len, out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "slice_rows out of range");
        let out = self.nodes[a.0].val[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        self.push(len, c, out, Op::SliceRows(a, start), ng)
    }

    /// Cosine similarity of every row of `m` (K×d) with `key` (1×d), K×1.
    /// Rows or keys of zero norm score 0.
    pub fn cosine_rows(&mut self, m: Var, key: Var) -> Var {
        let (k, d) = self.shape(m);
        assert_eq!(self.shape(key), (1, d), "cosine key shape mismatch");
        let mv = &self.nodes[m.0].val;
        let kv = &self.nodes[key.0].val;
        let nk = norm(kv);
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let row = &mv[i * d..(i + 1) * d];
            let nm = norm(row);
            if nm.value() == 0.0 || nk.value() == 0.0 {
                out.push(S::zero());
            } else {
                out.push(dot(row, kv) / (nm * nk));
            }
        }
        let ng = self.ng(m) || self.ng(key);
        self.push(k, 1, out, Op::CosineRows(m, key), ng)
    }

    /// Softmax over all entries of `a` (used on K×1 score columns).
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].val;
        let mut mx = av[0];
        for &x in av {
            if x.value() > mx.value() {
                mx = x;
            }
        }
        let e: Vec<S> = av.iter().map(|&x| (x - mx).exp()).collect();
        let mut z = S::zero();
        for &x in &e {
            z += x;
        }
        let out = e.into_iter().map(|x| x / z).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Softmax(a), ng)
    }

    /// Linear layer `x·w + b` with `b` a row broadcast over the batch.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bcast(h, b)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.nodes[loss.0].val.len(), 1, "backward needs a scalar loss");
        self.backward_seeded(loss, vec![S::one()])
    }

    /// Reverse pass with an explicit cotangent for `out`.
    pub fn backward_seeded(&self, out: Var, seed: Vec<S>) -> Grads<S> {
        let n = out.0 + 1;
        let mut g: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        let sizes = self.nodes.iter().map(|n| n.val.len()).collect();
        assert_eq!(seed.len(), self.nodes[out.0].val.len());
        g[out.0] = Some(seed);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gi) = g[i].take() else { continue };
            self.propagate(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Grads { g, sizes }
    }

    fn acc<'a>(&self, g: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].val.len();
        Some(g[v.0].get_or_insert_with(|| vec![S::zero(); len]))
    }

    fn propagate(&self, i: usize, gi: &[S], g: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let val = &node.val;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                let av = &self.nodes[a.0].val;
                let bv = &self.nodes[b.0].val;
                if let Some(ga) = self.acc(g, *a) {
                    for r in 0..n {
                        let grow = &gi[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            let mut s = S::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[r * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    for r in 0..n {
                        let grow = &gi[r * m..(r + 1) * m];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == S::zero() {
                                continue;
                            }
                            let gbrow = &mut gb[p * m..(p + 1) * m];
                            for (o, &y) in gbrow.iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(*a);
                if let Some(ga) = self.acc(g, *a) {
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += gi[j * r + ii];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (o, &x) in ga.iter_mut().zip(gi) {
                        *o += x;
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (o, &x) in ga.iter_mut().zip(gi) {
                        *o += x;
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    for (o, &x) in gb.iter_mut().zip(gi) {
                        *o += x;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (o, &x) in ga.iter_mut().zip(gi) {
                        *o += x;
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    for (o, &x) in gb.iter_mut().zip(gi) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].val;
                let bv = &self.nodes[b.0].val;
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(gi).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].val;
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(bv) {
                        *o += x / y;
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    for (((o, &x), &y), &q) in gb.iter_mut().zip(gi).zip(bv).zip(val) {
                        *o -= x * q / y;
                    }
                }
            }
            Op::AddBcast(a, b) | Op::MulBcast(a, b) => {
                let mul = matches!(node.op, Op::MulBcast(..));
                let (r, c) = (node.rows, node.cols);
                let (br, bc) = self.shape(*b);
                let kind = bcast_kind(r, c, br, bc);
                let av = &self.nodes[a.0].val;
                let bv = &self.nodes[b.0].val;
                if let Some(ga) = self.acc(g, *a) {
                    for ii in 0..r {
                        for j in 0..c {
                            let idx = ii * c + j;
                            if mul {
                                ga[idx] += gi[idx] * bv[bcast_index(kind, ii, j, c)];
                            } else {
                                ga[idx] += gi[idx];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    for ii in 0..r {
                        for j in 0..c {
                            let idx = ii * c + j;
                            let bi = bcast_index(kind, ii, j, c);
                            if mul {
                                gb[bi] += gi[idx] * av[idx];
                            } else {
                                gb[bi] += gi[idx];
                            }
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (o, &x) in ga.iter_mut().zip(gi) {
                        *o += x.scale(*c);
                    }
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    for (o, &x) in ga.iter_mut().zip(gi) {
                        *o += x;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(val) {
                        *o += x * (S::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(val) {
                        *o += x * y * (S::one() - y);
                    }
                }
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].val;
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(av) {
                        if y.value() > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(val) {
                        *o += x * y;
                    }
                }
            }
            Op::Ln(a) => {
                let av = &self.nodes[a.0].val;
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(av) {
                        *o += x / y;
                    }
                }
            }
            Op::Square(a) => {
                let av = &self.nodes[a.0].val;
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(av) {
                        *o += (x * y).scale(2.0);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.nodes[a.0].val;
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(av) {
                        let v = y.value();
                        if v >= *lo && v <= *hi {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(g, *a) {
                    for o in ga.iter_mut() {
                        *o += gi[0];
                    }
                }
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                if let Some(ga) = self.acc(g, *a) {
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += gi[j];
                        }
                    }
                }
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                if let Some(ga) = self.acc(g, *a) {
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += gi[ii];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if let Some(gp) = self.acc(g, p) {
                        for ii in 0..r {
                            for j in 0..c {
                                gp[ii * c + j] += gi[ii * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].val.len();
                    if let Some(gp) = self.acc(g, p) {
                        for (o, &x) in gp.iter_mut().zip(&gi[off..off + len]) {
                            *o += x;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let len = node.cols;
                if let Some(ga) = self.acc(g, *a) {
                    for ii in 0..r {
                        for j in 0..len {
                            ga[ii * c + start + j] += gi[ii * len + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.cols;
                if let Some(ga) = self.acc(g, *a) {
                    for (o, &x) in ga[start * c..].iter_mut().zip(gi) {
                        *o += x;
                    }
                }
            }
            Op::Min(a, b) => {
                let av = &self.nodes[a.0].val;
                let bv = &self.nodes[b.0].val;
                let left: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| x.value() <= y.value())
                    .collect();
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &l) in ga.iter_mut().zip(gi).zip(&left) {
                        if l {
                            *o += x;
                        }
                    }
                }
                if let Some(gb) = self.acc(g, *b) {
                    for ((o, &x), &l) in gb.iter_mut().zip(gi).zip(&left) {
                        if !l {
                            *o += x;
                        }
                    }
                }
            }
            Op::CosineRows(m, key) => {
                let (k, d) = self.shape(*m);
                let mv = &self.nodes[m.0].val;
                let kv = &self.nodes[key.0].val;
                let nk = norm(kv);
                let mut gm_local = vec![S::zero(); k * d];
                let mut gk_local = vec![S::zero(); d];
                for r in 0..k {
                    let row = &mv[r * d..(r + 1) * d];
                    let nm = norm(row);
                    if nm.value() == 0.0 || nk.value() == 0.0 {
                        continue;
                    }
                    let cos = val[r];
                    let inv = S::one() / (nm * nk);
                    for j in 0..d {
                        gm_local[r * d + j] += gi[r] * (kv[j] * inv - cos * row[j] / (nm * nm));
                        gk_local[j] += gi[r] * (row[j] * inv - cos * kv[j] / (nk * nk));
                    }
                }
                if let Some(gm) = self.acc(g, *m) {
                    for (o, x) in gm.iter_mut().zip(gm_local) {
                        *o += x;
                    }
                }
                if let Some(gk) = self.acc(g, *key) {
                    for (o, x) in gk.iter_mut().zip(gk_local) {
                        *o += x;
                    }
                }
            }
            Op::Softmax(a) => {
                let mut s = S::zero();
                for (&x, &y) in gi.iter().zip(val) {
                    s += x * y;
                }
                if let Some(ga) = self.acc(g, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(gi).zip(val) {
                        *o += y * (x - s);
                    }
                }
            }
        }
    }
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn norm<S: Real>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::Dual;

    /// Central finite-difference gradient of a scalar function.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn check(build: fn(&mut Tape<f64>, Var) -> Var, x: &[f64], rows: usize, cols: usize) {
        let f = |v: &[f64]| {
            let mut t = Tape::<f64>::new();
            let a = t.leaf(rows, cols, v.to_vec());
            let out = build(&mut t, a);
            t.scalar(out)
        };
        let mut t = Tape::<f64>::new();
        let a = t.leaf(rows, cols, x.to_vec());
        let out = build(&mut t, a);
        let g = t.backward(out).get_or_zero(a);
        let num = fd_grad(&f, x);
        for (i, (a, b)) in g.iter().zip(&num).enumerate() {
            assert!(
                (a - b).abs() <= 1e-6 * (1.0 + b.abs()),
                "coordinate {i}: autodiff {a} vs fd {b}"
            );
        }
    }

    const X6: [f64; 6] = [0.3, -0.7, 1.1, 0.05, -0.4, 0.9];

    #[test]
    fn matmul_transpose_bcast_gradients() {
        check(
            |t, a| {
                let w = t.constant_f64(3, 2, &[0.5, -1.0, 0.25, 0.75, -0.3, 0.2]);
                let at = t.transpose(a);
                let b = t.reshape(at, 2, 3);
                let h = t.matmul(b, w);
                let row = t.slice_rows(a, 0, 1);
                let r2 = t.slice_cols(row, 1, 2);
                let h = t.add_bcast(h, r2);
                let col = t.slice_cols(a, 0, 1);
                let col = t.slice_rows(col, 0, 2);
                let h = t.mul_bcast(h, col);
                let s = t.square(h);
                t.sum(s)
            },
            &X6,
            2,
            3,
        );
    }

    #[test]
    fn nonlinearity_gradients() {
        check(
            |t, a| {
                let x = t.tanh(a);
                let y = t.sigmoid(a);
                let z = t.mul(x, y);
                let e = t.exp(z);
                let sq = t.square(a);
                let l = t.add_const(sq, 1.0);
                let l = t.ln(l);
                let d = t.div(e, l);
                let r = t.relu(a);
                let m = t.min(d, r);
                let s = t.sum_rows(m);
                let s2 = t.sum_cols(d);
                let a1 = t.mean(s);
                let a2 = t.sum(s2);
                let c = t.clamp(a, -0.5, 0.5);
                let a3 = t.sum(c);
                let p = t.add(a1, a2);
                let p = t.sub(p, a3);
                t.scale(p, 0.7)
            },
            &X6,
            3,
            2,
        );
    }

    #[test]
    fn cosine_softmax_concat_gradients() {
        check(
            |t, a| {
                let key = t.slice_rows(a, 0, 1);
                let rest = t.slice_rows(a, 1, 2);
                let cos = t.cosine_rows(rest, key);
                let sm = t.softmax(cos);
                let both = t.concat_rows(&[sm, cos]);
                let bt = t.transpose(both);
                let cc = t.concat_cols(&[bt, key]);
                let w = t.constant_f64(1, 7, &[1.0, -2.0, 0.5, 3.0, 0.2, -0.4, 1.5]);
                let p = t.mul(cc, w);
                let s = t.square(p);
                t.sum(s)
            },
            &[0.3, -0.7, 1.1, 0.5, 0.4, 0.9, -0.2, 0.1, -0.6],
            3,
            3,
        );
    }

    #[test]
    fn cosine_of_zero_rows_is_zero_with_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let m = t.leaf(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let k = t.leaf(1, 2, vec![1.0, 0.0]);
        let c = t.cosine_rows(m, k);
        assert_eq!(t.value(c)[0], 0.0);
        assert!((t.value(c)[1] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        let s = t.sum(c);
        let g = t.backward(s);
        assert_eq!(&g.get_or_zero(m)[..2], &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant_f64(1, 2, &[1.0, 2.0]);
        let x = t.leaf(1, 2, vec![3.0, 4.0]);
        let p = t.mul(c, x);
        let s = t.sum(p);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn dual_tape_gives_hessian_vector_product() {
        // f(x) = sum(tanh(x)^2 * x0); compare the tangent of the gradient
        // against finite differences of the f64 gradient.
        fn build<S: Real>(t: &mut Tape<S>, x: Var) -> Var {
            let th = t.tanh(x);
            let sq = t.square(th);
            let x0 = t.slice_cols(x, 0, 1);
            let p = t.mul_bcast(sq, x0);
            t.sum(p)
        }
        let x = [0.4, -0.3, 0.8];
        let v = [1.0, 0.5, -2.0];
        let mut t = Tape::<Dual>::new();
        let xs = x.iter().zip(&v).map(|(&a, &b)| Dual::new(a, b)).collect();
        let xv = t.leaf(1, 3, xs);
        let out = build(&mut t, xv);
        let hv: Vec<f64> = t.backward(out).get_or_zero(xv).iter().map(|d| d.d).collect();
        let grad = |p: &[f64]| {
            let mut t = Tape::<f64>::new();
            let a = t.leaf(1, 3, p.to_vec());
            let o = build(&mut t, a);
            t.backward(o).get_or_zero(a)
        };
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (gp, gm) = (grad(&xp), grad(&xm));
        for i in 0..3 {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            assert!((hv[i] - fd).abs() < 1e-6, "{} vs {}", hv[i], fd);
        }
    }
}
