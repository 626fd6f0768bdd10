//! Dense f64 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! The tape is rebuilt on every optimization step: nodes are appended in
//! evaluation order, so every node's inputs have smaller ids and a single
//! reverse sweep over the node vector is a valid backpropagation order.
//! Rank is at most 2 (scalars, vectors, matrices); that is enough for the
//! kinematics, losses, and perceptrons built on top.

use crate::error::{Error, Result};

/// Dense row-major f64 tensor, rank 0..=2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            shape.iter().product::<usize>() == data.len() && shape.len() <= 2,
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    /// Row-major matrix from an iterator of 3-vectors.
    pub fn from_rows3(rows: &[[f64; 3]]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * 3);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![rows.len(), 3], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

/// True when every entry is finite. `x * 0.0` is NaN exactly for NaN/Inf
/// inputs, so a single sum detects any non-finite entry in one pass.
pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().map(|x| x * 0.0).sum::<f64>() == 0.0
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
#[allow(dead_code)] // constant payloads are kept for diagnostics
enum Op {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddConst(Var, f64),
    MulConst(Var, f64),
    /// [m,k] x [k,n] -> [m,n]
    Matmul(Var, Var),
    /// a x b^T : [m,k] x [n,k] -> [m,n]
    MatmulNT(Var, Var),
    Sum(Var),
    /// [n,m] -> [n]
    SumRows(Var),
    /// [n,m] -> [n]; u32 argmin per row
    MinRows(Var, Vec<u32>),
    MaxRows(Var, Vec<u32>),
    /// [n,m] -> [m]; argmin per column
    MinCols(Var, Vec<u32>),
    /// [g*p, d] -> [g, d]; arg row per (g, d)
    MaxPoolGroups(Var, usize, Vec<u32>),
    Relu(Var),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Clamp(Var, f64, f64),
    /// rows (rank 2) or elements (rank <= 1) along axis 0
    Gather(Var, Vec<u32>),
    /// axis 0; scalars concat to a vector
    Concat(Vec<Var>),
    Reshape(Var),
    /// [n,3] x [m,3] -> [n,m] of squared Euclidean distances
    SqDist(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Matmul(..) => "matmul",
            Op::MatmulNT(..) => "matmul_nt",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::MinRows(..) => "min_rows",
            Op::MaxRows(..) => "max_rows",
            Op::MinCols(..) => "min_cols",
            Op::MaxPoolGroups(..) => "max_pool_groups",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Clamp(..) => "clamp",
            Op::Gather(..) => "gather",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::SqDist(..) => "sq_dist",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Define-by-run computation graph over [`Tensor`] values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Broadcast relation between two operand shapes.
enum Bcast {
    Same,
    /// rhs is a scalar
    ScalarR,
    /// lhs is a scalar
    ScalarL,
    /// lhs [n,d], rhs [d]: rhs repeated per row
    RowR,
}

fn bcast_kind(a: &Tensor, b: &Tensor) -> Bcast {
    if a.shape() == b.shape() {
        Bcast::Same
    } else if b.is_scalar() {
        Bcast::ScalarR
    } else if a.is_scalar() {
        Bcast::ScalarL
    } else if a.shape.len() == 2 && b.shape.len() == 1 && a.shape[1] == b.shape[0] {
        Bcast::RowR
    } else {
        panic!("incompatible shapes for broadcast: {:?} vs {:?}", a.shape, b.shape)
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match bcast_kind(a, b) {
        Bcast::Same => Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        },
        Bcast::ScalarR => {
            let s = b.data[0];
            Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x, s)).collect() }
        }
        Bcast::ScalarL => {
            let s = a.data[0];
            Tensor { shape: b.shape.clone(), data: b.data.iter().map(|&y| f(s, y)).collect() }
        }
        Bcast::RowR => {
            let d = b.data.len();
            let mut out = Vec::with_capacity(a.data.len());
            for row in a.data.chunks_exact(d) {
                for (x, y) in row.iter().zip(&b.data) {
                    out.push(f(*x, *y));
                }
            }
            Tensor { shape: a.shape.clone(), data: out }
        }
    }
}

/// Raw matmul on row-major buffers: C[m,n] (+)= A[m,k] * B[k,n].
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// C[m,n] (+)= A[m,k] * B[n,k]^T.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * n + j] += s;
        }
    }
}

/// C[k,n] (+)= A[m,k]^T * B[m,n].
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut out[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        debug_assert!(all_finite(&value.data), "non-finite value produced by op {}", op.name());
        self.nodes.push(Node { op, value, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf { requires_grad }, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_bcast(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Div(a, b), v, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|x| -x).collect(),
        };
        let ng = self.ng(a);
        self.push(Op::Neg(a), v, ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|x| x + c).collect(),
        };
        let ng = self.ng(a);
        self.push(Op::AddConst(a, c), v, ng)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|x| x * c).collect(),
        };
        let ng = self.ng(a);
        self.push(Op::MulConst(a, c), v, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.shape.len() == 2 && tb.shape.len() == 2, "matmul needs rank-2 operands");
        let (m, k, k2, n) = (ta.shape[0], ta.shape[1], tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_raw(&ta.data, &tb.data, m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Matmul(a, b), Tensor::matrix(m, n, out), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.shape.len() == 2 && tb.shape.len() == 2, "matmul_nt needs rank-2 operands");
        let (m, k, n, k2) = (ta.shape[0], ta.shape[1], tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_nt_raw(&ta.data, &tb.data, m, k, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatmulNT(a, b), Tensor::matrix(m, n, out), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.mul_const(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(t.shape.len() == 2, "sum_rows needs rank-2 input");
        let (n, m) = (t.shape[0], t.shape[1]);
        let data: Vec<f64> = t.data.chunks_exact(m).map(|row| row.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Op::SumRows(a), Tensor::new(vec![n], data), ng)
    }

    fn rowwise_select(&mut self, a: Var, smaller: impl Fn(f64, f64) -> bool, max: bool) -> Var {
        let t = self.value(a);
        assert!(t.shape.len() == 2, "row reduce needs rank-2 input");
        let (n, m) = (t.shape[0], t.shape[1]);
        assert!(m > 0, "row reduce over empty rows");
        let mut args = Vec::with_capacity(n);
        let mut vals = Vec::with_capacity(n);
        for row in t.data.chunks_exact(m) {
            let mut best = 0usize;
            for (j, &x) in row.iter().enumerate().skip(1) {
                if smaller(x, row[best]) {
                    best = j;
                }
            }
            args.push(best as u32);
            vals.push(row[best]);
        }
        let ng = self.ng(a);
        let value = Tensor::new(vec![n], vals);
        if max {
            self.push(Op::MaxRows(a, args), value, ng)
        } else {
            self.push(Op::MinRows(a, args), value, ng)
        }
    }

    /// Per-row minimum with argmin routing; ties break to the lowest index.
    pub fn min_rows(&mut self, a: Var) -> Var {
        self.rowwise_select(a, |x, best| x < best, false)
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        self.rowwise_select(a, |x, best| x > best, true)
    }

    /// Per-column minimum with argmin routing; ties break to the lowest index.
    pub fn min_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(t.shape.len() == 2, "min_cols needs rank-2 input");
        let (n, m) = (t.shape[0], t.shape[1]);
        assert!(n > 0, "min_cols over empty columns");
        let mut args = vec![0u32; m];
        let mut vals = t.data[..m].to_vec();
        for i in 1..n {
            let row = &t.data[i * m..(i + 1) * m];
            for (j, &x) in row.iter().enumerate() {
                if x < vals[j] {
                    vals[j] = x;
                    args[j] = i as u32;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Op::MinCols(a, args), Tensor::new(vec![m], vals), ng)
    }

    /// Column-wise max within consecutive row groups of `group` rows:
    /// [g*p, d] -> [g, d]. Used as a permutation-invariant point-set pool.
    pub fn max_pool_groups(&mut self, a: Var, group: usize) -> Var {
        let t = self.value(a);
        assert!(t.shape.len() == 2, "max_pool_groups needs rank-2 input");
        let (n, d) = (t.shape[0], t.shape[1]);
        assert!(group > 0 && n % group == 0, "rows {n} not divisible by group {group}");
        let g = n / group;
        let mut args = vec![0u32; g * d];
        let mut vals = vec![f64::NEG_INFINITY; g * d];
        for gi in 0..g {
            for r in 0..group {
                let row = gi * group + r;
                for c in 0..d {
                    let x = t.data[row * d + c];
                    if x > vals[gi * d + c] {
                        vals[gi * d + c] = x;
                        args[gi * d + c] = row as u32;
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(Op::MaxPoolGroups(a, group, args), Tensor::matrix(g, d, vals), ng)
    }

    fn unary(&mut self, a: Var, op: fn(Var) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| f(x)).collect(),
        };
        let ng = self.ng(a);
        self.push(op(a), v, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu, |x| x * sigmoid(x))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos, f64::cos)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x.max(c)).collect(),
        };
        let ng = self.ng(a);
        self.push(Op::ClampMin(a, c), v, ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x.clamp(lo, hi)).collect(),
        };
        let ng = self.ng(a);
        self.push(Op::Clamp(a, lo, hi), v, ng)
    }

    /// Select rows (rank 2) or elements (rank 1) along axis 0.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let (value, ng) = match t.shape.len() {
            2 => {
                let (n, d) = (t.shape[0], t.shape[1]);
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    assert!(i < n, "gather row {i} out of bounds {n}");
                    data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
                }
                (Tensor::matrix(idx.len(), d, data), self.ng(a))
            }
            _ => {
                let n = t.data.len();
                let data: Vec<f64> = idx
                    .iter()
                    .map(|&i| {
                        assert!(i < n, "gather element {i} out of bounds {n}");
                        t.data[i]
                    })
                    .collect();
                (Tensor::vector(data), self.ng(a))
            }
        };
        let idx32 = idx.iter().map(|&i| i as u32).collect();
        self.push(Op::Gather(a, idx32), value, ng)
    }

    /// Concatenate along axis 0. Scalars and vectors concat to a vector;
    /// matrices must share their column count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let rank2 = self.value(parts[0]).shape.len() == 2;
        let mut data = Vec::new();
        let mut rows = 0usize;
        let cols = self.value(parts[0]).cols();
        let mut ng = false;
        for &p in parts {
            let t = self.value(p);
            if rank2 {
                assert_eq!(t.shape.len(), 2, "concat rank mismatch");
                assert_eq!(t.shape[1], cols, "concat column mismatch");
                rows += t.shape[0];
            }
            data.extend_from_slice(&t.data);
            ng |= self.ng(p);
        }
        let value = if rank2 {
            Tensor::matrix(rows, cols, data)
        } else {
            Tensor::vector(data)
        };
        self.push(Op::Concat(parts.to_vec()), value, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(
            t.data.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let value = Tensor { shape: shape.to_vec(), data: t.data.clone() };
        let ng = self.ng(a);
        self.push(Op::Reshape(a), value, ng)
    }

    /// Squared Euclidean distance matrix between row sets: [n,d] x [m,d] -> [n,m].
    /// Computed directly per pair (no norm expansion) so values match a
    /// brute-force loop bit for bit.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.shape.len() == 2 && tb.shape.len() == 2, "sq_dist needs rank-2 operands");
        assert_eq!(ta.shape[1], tb.shape[1], "sq_dist dimension mismatch");
        let (n, d, m) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = Vec::with_capacity(n * m);
        for arow in ta.data.chunks_exact(d) {
            for brow in tb.data.chunks_exact(d) {
                let mut s = 0.0;
                for (&x, &y) in arow.iter().zip(brow) {
                    let diff = x - y;
                    s += diff * diff;
                }
                out.push(s);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::SqDist(a, b), Tensor::matrix(n, m, out), ng)
    }

    /// Locate the earliest node whose value holds a NaN or Inf.
    pub fn find_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !all_finite(&n.value.data))
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate across calls
    /// until `zero_grads`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rt.shape
            )));
        }
        if !rt.data[0].is_finite() {
            let at = self.find_nonfinite();
            return Err(Error::Fault(match at {
                Some((i, name)) => {
                    format!("non-finite value encountered; first produced by op '{name}' (node {i})")
                }
                None => "non-finite backward root".to_string(),
            }));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor {
            shape: self.nodes[root.0].value.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if let Op::Leaf { requires_grad: true } = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                    None => self.grads[i] = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accum(&self, adj: &mut [Option<Tensor>], v: Var, extra: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&extra.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(extra),
        }
    }

    /// Reduce a full-shape gradient back to an operand's shape under the
    /// broadcast rule that produced the output.
    fn reduce_to(&self, g: &Tensor, operand: Var) -> Tensor {
        let target = &self.nodes[operand.0].value;
        if g.shape == target.shape {
            return g.clone();
        }
        if target.is_scalar() {
            return Tensor {
                shape: target.shape.clone(),
                data: vec![g.data.iter().sum()],
            };
        }
        // row broadcast: sum over rows
        let d = target.data.len();
        let mut out = vec![0.0; d];
        for row in g.data.chunks_exact(d) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Tensor { shape: target.shape.clone(), data: out }
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accum(adj, *a, self.reduce_to(g, *a));
                self.accum(adj, *b, self.reduce_to(g, *b));
            }
            Op::Sub(a, b) => {
                self.accum(adj, *a, self.reduce_to(g, *a));
                let mut gb = self.reduce_to(g, *b);
                for x in &mut gb.data {
                    *x = -*x;
                }
                self.accum(adj, *b, gb);
            }
            Op::Mul(a, b) => {
                let ga = zip_bcast(g, val(*b), |x, y| x * y);
                let gba = zip_bcast(g, val(*a), |x, y| x * y);
                self.accum(adj, *a, self.reduce_to(&ga, *a));
                self.accum(adj, *b, self.reduce_to(&gba, *b));
            }
            Op::Div(a, b) => {
                let ga = zip_bcast(g, val(*b), |x, y| x / y);
                self.accum(adj, *a, self.reduce_to(&ga, *a));
                let out = &self.nodes[i].value;
                // d/db (a/b) = -(a/b)/b
                let t = zip_bcast(g, out, |x, o| x * o);
                let gb = zip_bcast(&t, val(*b), |x, y| -x / y);
                self.accum(adj, *b, self.reduce_to(&gb, *b));
            }
            Op::Neg(a) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|x| -x).collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::AddConst(a, _) => self.accum(adj, *a, g.clone()),
            Op::MulConst(a, c) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|x| x * c).collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_raw(&g.data, &tb.data, m, n, k, &mut ga);
                    self.accum(adj, *a, Tensor::matrix(m, k, ga));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_raw(&ta.data, &g.data, m, k, n, &mut gb);
                    self.accum(adj, *b, Tensor::matrix(k, n, gb));
                }
            }
            Op::MatmulNT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_raw(&g.data, &tb.data, m, n, k, &mut ga);
                    self.accum(adj, *a, Tensor::matrix(m, k, ga));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; n * k];
                    matmul_tn_raw(&g.data, &ta.data, m, n, k, &mut gb);
                    self.accum(adj, *b, Tensor::matrix(n, k, gb));
                }
            }
            Op::Sum(a) => {
                let ta = val(*a);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: vec![g.data[0]; ta.data.len()],
                };
                self.accum(adj, *a, ga);
            }
            Op::SumRows(a) => {
                let ta = val(*a);
                let m = ta.shape[1];
                let mut data = Vec::with_capacity(ta.data.len());
                for &gv in &g.data {
                    data.extend(std::iter::repeat(gv).take(m));
                }
                self.accum(adj, *a, Tensor { shape: ta.shape.clone(), data });
            }
            Op::MinRows(a, args) | Op::MaxRows(a, args) => {
                let ta = val(*a);
                let m = ta.shape[1];
                let mut ga = Tensor::zeros(&ta.shape);
                for (r, (&gv, &j)) in g.data.iter().zip(args).enumerate() {
                    ga.data[r * m + j as usize] += gv;
                }
                self.accum(adj, *a, ga);
            }
            Op::MinCols(a, args) => {
                let ta = val(*a);
                let m = ta.shape[1];
                let mut ga = Tensor::zeros(&ta.shape);
                for (c, (&gv, &r)) in g.data.iter().zip(args).enumerate() {
                    ga.data[r as usize * m + c] += gv;
                }
                self.accum(adj, *a, ga);
            }
            Op::MaxPoolGroups(a, _, args) => {
                let ta = val(*a);
                let d = ta.shape[1];
                let mut ga = Tensor::zeros(&ta.shape);
                for (out_idx, (&gv, &row)) in g.data.iter().zip(args).enumerate() {
                    let c = out_idx % d;
                    ga.data[row as usize * d + c] += gv;
                }
                self.accum(adj, *a, ga);
            }
            Op::Relu(a) => {
                let ta = val(*a);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::Silu(a) => {
                let ta = val(*a);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &x)| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::Sin(a) => {
                let ta = val(*a);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: g.data.iter().zip(&ta.data).map(|(&gv, &x)| gv * x.cos()).collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::Cos(a) => {
                let ta = val(*a);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: g.data.iter().zip(&ta.data).map(|(&gv, &x)| -gv * x.sin()).collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::Square(a) => {
                let ta = val(*a);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: g.data.iter().zip(&ta.data).map(|(&gv, &x)| 2.0 * gv * x).collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[i].value;
                let ta = val(*a);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&out.data)
                        .map(|(&gv, &s)| gv * 0.5 / s)
                        .collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::ClampMin(a, c) => {
                let ta = val(*a);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &x)| if x > *c { gv } else { 0.0 })
                        .collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ta = val(*a);
                let ga = Tensor {
                    shape: ta.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(&gv, &x)| if x > *lo && x < *hi { gv } else { 0.0 })
                        .collect(),
                };
                self.accum(adj, *a, ga);
            }
            Op::Gather(a, idx) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(&ta.shape);
                if ta.shape.len() == 2 {
                    let d = ta.shape[1];
                    for (k, &row) in idx.iter().enumerate() {
                        let src = &g.data[k * d..(k + 1) * d];
                        let dst = &mut ga.data[row as usize * d..(row as usize + 1) * d];
                        for (o, x) in dst.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                } else {
                    for (k, &j) in idx.iter().enumerate() {
                        ga.data[j as usize] += g.data[k];
                    }
                }
                self.accum(adj, *a, ga);
            }
            Op::Concat(parts) => {
                let mut off = 0usize;
                for &p in parts {
                    let len = self.nodes[p.0].value.data.len();
                    if self.nodes[p.0].needs_grad {
                        let gp = Tensor {
                            shape: self.nodes[p.0].value.shape.clone(),
                            data: g.data[off..off + len].to_vec(),
                        };
                        self.accum(adj, p, gp);
                    }
                    off += len;
                }
            }
            Op::Reshape(a) => {
                let ta = val(*a);
                let ga = Tensor { shape: ta.shape.clone(), data: g.data.clone() };
                self.accum(adj, *a, ga);
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, d, m) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                let mut ga = Tensor::zeros(&ta.shape);
                let mut gb = Tensor::zeros(&tb.shape);
                for r in 0..n {
                    let arow = &ta.data[r * d..(r + 1) * d];
                    for c in 0..m {
                        let gv = g.data[r * m + c];
                        if gv == 0.0 {
                            continue;
                        }
                        let brow = &tb.data[c * d..(c + 1) * d];
                        for k in 0..d {
                            let diff = 2.0 * gv * (arow[k] - brow[k]);
                            ga.data[r * d + k] += diff;
                            gb.data[c * d + k] -= diff;
                        }
                    }
                }
                if self.nodes[a.0].needs_grad {
                    self.accum(adj, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    self.accum(adj, *b, gb);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_matches_analytic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient_is_zero_at_negative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0]), true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(x, x);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[8.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn nonfinite_root_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0), true);
        let y = tape.sqrt(x); // NaN
        let err = tape.backward(y).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("sqrt"), "unexpected message: {msg}");
    }

    #[test]
    fn matmul_matches_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn row_broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![1.0; 6]), true);
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let c = tape.add(a, b);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn min_rows_routes_gradient_to_argmin() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![3.0, 1.0, 2.0, 0.5, 4.0, 0.5]), true);
        let m = tape.min_rows(a);
        assert_eq!(tape.value(m).data(), &[1.0, 0.5]);
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        // tie in row 1 breaks to the lowest index
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn sq_dist_matches_brute_force() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let b = tape.constant(Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]));
        let d = tape.sq_dist(a, b);
        assert_eq!(tape.value(d).data(), &[1.0, 2.0]);
    }

    #[test]
    fn max_pool_groups_is_columnwise_per_group() {
        let mut tape = Tape::new();
        let a = tape.leaf(
            Tensor::matrix(4, 2, vec![1.0, 5.0, 2.0, 4.0, 9.0, 0.0, 8.0, 1.0]),
            true,
        );
        let p = tape.max_pool_groups(a, 2);
        assert_eq!(tape.value(p).data(), &[2.0, 5.0, 9.0, 1.0]);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(
            tape.grad(a).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]
        );
    }
}
